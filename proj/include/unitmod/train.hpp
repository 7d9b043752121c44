#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unitmod/detector.hpp"
#include "unitmod/losses.hpp"
#include "unitmod/metrics.hpp"
#include "unitmod/synth.hpp"
#include "unitmod/ucrt.hpp"
#include "unitmod/unit_net.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace train {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int warmup_iters = 100;
    double alpha = physics::kDefaultAlpha;
    loss::LossWeights weights;
    loss::PixelReduction reduction = loss::PixelReduction::Mean;
    bool tv_both_branches = true;
    bool cc_both_branches = true;
    std::uint64_t seed = 0;
    bool unitmodule_enabled = true;
    bool ucrt_enabled = false;
    ucrt::UcrtConfig ucrt;
    net::UnitModuleConfig unit;
    double ema_decay = 0.0;  // accepted only as 0: weight averaging is not implemented
    int checkpoint_every = 10;
    double score_thresh = 0.3;
    double iou_thresh = 0.5;

    void validate() const;
    /// Also checks the schedule against the iteration budget.
    void validate(long total_iters) const;
};

/// `key = value` lines, `#` starts a comment. Unknown keys are rejected.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string format_config(const TrainConfig& c);

/// Linear warmup from base/warmup to base, then cosine to 0 at the last step.
double learning_rate(const TrainConfig& c, long step, long total_steps);

/// SGD with momentum and decoupled-from-norm weight decay: decay applies to
/// conv and linear weights only.
class Sgd {
public:
    Sgd() = default;
    explicit Sgd(std::vector<NamedTensor> params);
    void zero_grad();
    void step(double lr, double momentum, double weight_decay);
    std::vector<NamedTensor> state() const;
    void load(const std::vector<NamedTensor>& entries, const std::string& prefix);
    const std::vector<NamedTensor>& params() const { return params_; }

private:
    std::vector<NamedTensor> params_;
    std::vector<Tensor> momentum_;
    std::vector<bool> decay_;
};

struct EvalReport {
    metrics::ApResult ap;
    double psnr_enhanced = 0;
    double psnr_degraded = 0;
    double gray_world_enhanced = 0;
    double gray_world_degraded = 0;
    double consistency = 0;  // mean |α·t1 − t2|
    double images_per_second = 0;
    int images = 0;
};

/// Runs the deployment path (reparameterized module when given) and the
/// detector over `samples`. Without a module, the detector sees the degraded
/// input and PSNR(enhanced) equals PSNR(degraded).
EvalReport evaluate(const net::UnitModule* unit, const det::ToyDetector& detector,
                    const std::vector<synth::SyntheticSample>& samples, double alpha, double score_thresh,
                    double iou_thresh, std::vector<std::vector<det::Detection>>* detections = nullptr);

/// Mean |α·t1 − t2| of the training-form network in eval mode.
double transmission_consistency(net::UnitModule& unit, const std::vector<synth::SyntheticSample>& samples,
                                double alpha);

struct Batch {
    Tensor images;  // [N,3,H,W] degraded inputs
    std::vector<std::vector<synth::Box>> boxes;
};

Batch make_batch(const std::vector<synth::SyntheticSample>& samples, const std::vector<std::size_t>& indices);

struct HistoryRow {
    int epoch = 0;
    long step = 0;
    double lr = 0;
    double l_total = 0;
    double l_unitmodule = 0;
    double l_detector = 0;
    double l_t = 0;
    EvalReport val;

    static std::string csv_header();
    std::string csv_row() const;
};

class Trainer {
public:
    explicit Trainer(TrainConfig config);

    const TrainConfig& config() const { return config_; }
    net::UnitModule& unit() { return unit_; }
    det::ToyDetector& detector() { return detector_; }
    long step() const { return step_; }
    int epoch() const { return epoch_; }
    Sgd& optimizer() { return sgd_; }

    /// Sets the iteration budget used by the schedule.
    void set_total_steps(long total);
    long total_steps() const { return total_steps_; }

    /// One joint update on a batch of degraded images.
    loss::LossReport train_step(const Batch& batch);
    /// Forward and loss only, no update and no statistics side effects.
    loss::LossReport compute_losses(const Batch& batch, Tensor* total);

    EvalReport evaluate(const std::vector<synth::SyntheticSample>& samples);

    /// Trains from the current epoch to config.epochs, writing history.csv,
    /// steps.csv and checkpoints into `out_dir`.
    std::vector<HistoryRow> fit(const std::vector<synth::SyntheticSample>& train_set,
                                const std::vector<synth::SyntheticSample>& val_set, const std::filesystem::path& out_dir);

    std::vector<NamedTensor> checkpoint_entries() const;
    void save_checkpoint(const std::filesystem::path& path) const;
    /// Restores module, detector, optimizer, counters and rng.
    void load_checkpoint(const std::filesystem::path& path);

private:
    loss::LossReport forward_losses(const Batch& batch, Mode mode, Tensor& total);

    TrainConfig config_;
    net::UnitModule unit_;
    det::ToyDetector detector_;
    Sgd sgd_;
    Rng rng_;
    long step_ = 0;
    int epoch_ = 0;
    long total_steps_ = 0;
};

/// Module and (when present) detector restored from a checkpoint file.
struct LoadedModels {
    net::UnitModule unit;
    std::optional<det::ToyDetector> detector;
};
LoadedModels load_models(const std::filesystem::path& checkpoint);

}  // namespace train
UNITMOD_END_NAMESPACE
