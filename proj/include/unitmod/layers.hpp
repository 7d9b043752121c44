#pragma once

#include <string>
#include <vector>

#include "unitmod/ops.hpp"
#include "unitmod/rng.hpp"
#include "unitmod/tensor_io.hpp"

UNITMOD_BEGIN_NAMESPACE

/// How a network is being run.
///  Train    : live normalization statistics, running averages updated.
///  Eval     : training-form network without side effects.
///  Inference: deployment form: branch normalizations use running averages
///              and training-only heads are unavailable.
enum class Mode { Train, Eval, Inference };

struct ConvLayer {
    Tensor weight;  // [Cout, Cin/groups, K, K]
    Tensor bias;    // [Cout] or undefined
    int stride = 1;
    int padding = 0;
    int groups = 1;

    /// Uniform ±sqrt(6/fan_in) weights; zero bias when `with_bias`.
    static ConvLayer make(int cin, int cout, int kernel, int stride, int padding, int groups,
                          bool with_bias, Rng& rng);
    Tensor forward(const Tensor& x) const;
    int kernel() const { return weight.dim(2); }
};

struct NormLayer {
    Tensor gamma;  // [C]
    Tensor beta;   // [C]
    int groups = 1;
    // Exponential averages of per-group moments, only tracked where a layer
    // is later folded into a convolution.
    Tensor running_mean;  // [groups]
    Tensor running_var;   // [groups]
    bool track_stats = false;

    static NormLayer make(int channels, int groups, bool track_stats);
    /// Live group normalization; in Train mode also folds this batch's
    /// moments into the running averages.
    Tensor forward(const Tensor& x, Mode mode, double momentum);
    /// Normalization with the running averages, i.e. a per-channel affine map.
    Tensor forward_frozen(const Tensor& x) const;
    /// Per-channel (scale, shift) equivalent of forward_frozen.
    std::pair<std::vector<real>, std::vector<real>> folded_affine() const;
    int channels() const { return gamma.dim(0); }
};

struct LinearLayer {
    Tensor weight;  // [G, F]
    Tensor bias;    // [G]

    static LinearLayer make(int in, int out, Rng& rng);
    Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }
};

constexpr double kNormEps = 1e-5;

/// Initializes `t` uniformly in ±bound from `rng`.
void fill_uniform(Tensor& t, double bound, Rng& rng);

/// Collects (name, tensor) pairs; parameter tensors are shared, not copied.
class StateBuilder {
public:
    explicit StateBuilder(std::string prefix = {}) : prefix_(std::move(prefix)) {}
    void add(const std::string& name, const Tensor& t) {
        if (t.defined()) entries_.push_back({prefix_ + name, t});
    }
    void conv(const std::string& name, const ConvLayer& c) {
        add(name + ".weight", c.weight);
        add(name + ".bias", c.bias);
    }
    void norm(const std::string& name, const NormLayer& n, bool with_stats) {
        add(name + ".weight", n.gamma);
        add(name + ".bias", n.beta);
        if (with_stats && n.track_stats) {
            add(name + ".running_mean", n.running_mean);
            add(name + ".running_var", n.running_var);
        }
    }
    void linear(const std::string& name, const LinearLayer& l) {
        add(name + ".weight", l.weight);
        add(name + ".bias", l.bias);
    }
    std::vector<NamedTensor> take() { return std::move(entries_); }

private:
    std::string prefix_;
    std::vector<NamedTensor> entries_;
};

/// Copies values from `entries` into the tensors named by `targets`
/// (matched by name, shapes must agree). Throws IoError on a missing name.
void load_into(const std::vector<NamedTensor>& targets, const std::vector<NamedTensor>& entries);

std::int64_t count_elements(const std::vector<NamedTensor>& entries);

UNITMOD_END_NAMESPACE
