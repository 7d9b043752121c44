// unitmod: command-line entry point for data synthesis, training,
// enhancement, augmentation, evaluation and gradient checks.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "unitmod/gradcheck_f64.hpp"
#include "unitmod/image_io.hpp"
#include "unitmod/metrics.hpp"
#include "unitmod/ops.hpp"
#include "unitmod/synth.hpp"
#include "unitmod/train.hpp"
#include "unitmod/ucrt.hpp"

namespace fs = std::filesystem;
using namespace unitmod;

namespace {

std::vector<fs::path> png_files(const fs::path& in) {
    std::vector<fs::path> out;
    if (fs::is_regular_file(in)) {
        out.push_back(in);
        return out;
    }
    if (!fs::is_directory(in)) throw IoError("input '" + in.string() + "' does not exist");
    for (const auto& e : fs::directory_iterator(in)) {
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw IoError("no PNG files in '" + in.string() + "'");
    return out;
}

// Dataset folders keep their inputs under degraded/; bare folders are used as is.
fs::path image_folder(const fs::path& dir) {
    return fs::is_directory(dir / "degraded") ? dir / "degraded" : dir;
}

Tensor as_batch(const Tensor& image) { return image.reshape({1, 3, image.dim(1), image.dim(2)}); }

// Average of the three transmission channels of a [1,3,H,W] map.
Tensor channel_average(const Tensor& t) {
    const int h = t.dim(2), w = t.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor out({h, w});
    for (std::int64_t i = 0; i < plane; ++i) out[i] = (t[i] + t[plane + i] + t[2 * plane + i]) / 3;
    return out;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

int cmd_synth(std::uint64_t seed, int count, int size, const fs::path& out) {
    const auto samples = synth::generate_dataset(seed, count, size);
    synth::write_dataset(samples, out);
    std::printf("wrote %d samples of %dx%d to %s\n", count, size, size, out.c_str());
    return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& data, const fs::path& val, const fs::path& out,
              const fs::path& resume) {
    train::TrainConfig cfg = config_path.empty() ? train::TrainConfig{} : train::load_config(config_path);
    const auto train_set = synth::read_dataset(data);
    const auto val_set = val.empty() ? std::vector<synth::SyntheticSample>{} : synth::read_dataset(val);
    train::Trainer trainer(cfg);
    if (!resume.empty()) trainer.load_checkpoint(resume);
    ensure_dir(out);
    {
        std::ofstream os(out / "config.cfg");
        os << train::format_config(cfg);
    }
    const auto rows = trainer.fit(train_set, val_set, out);
    for (const auto& r : rows) {
        std::printf("epoch %d step %ld loss %.4f (unit %.4f det %.4f) val mAP %.4f psnr %.2f/%.2f\n", r.epoch,
                    r.step, r.l_total, r.l_unitmodule, r.l_detector, r.val.ap.mean.value_or(-1.0),
                    r.val.psnr_enhanced, r.val.psnr_degraded);
    }
    std::printf("final checkpoint: %s\n", (out / "final.umck").c_str());
    return 0;
}

int cmd_enhance(const fs::path& ckpt, const fs::path& in, const fs::path& out, bool dump_t) {
    auto models = train::load_models(ckpt);
    net::UnitModule deploy = models.unit.reparameterized() ? models.unit : models.unit.reparameterize();
    const auto files = png_files(in);
    ensure_dir(out);
    NoGradGuard guard;
    for (const auto& f : files) {
        Tensor img = read_png(f);
        auto r = deploy.enhance(as_batch(img), Mode::Inference);
        const std::string stem = f.stem().string();
        write_png(out / (stem + ".png"), r.enhanced);
        if (dump_t) {
            write_png(out / (stem + "_t.png"), false_color(channel_average(r.t.value)));
            std::ofstream os(out / (stem + "_A.txt"));
            os.precision(9);
            os << "A = " << r.a.value[0] << " " << r.a.value[1] << " " << r.a.value[2] << "\n";
        }
    }
    std::printf("enhanced %zu image(s) into %s\n", files.size(), out.c_str());
    return 0;
}

int cmd_augment(const fs::path& data, const fs::path& out, std::uint64_t seed, const ucrt::UcrtConfig& cfg) {
    const auto files = png_files(image_folder(data));
    ensure_dir(out);
    for (std::size_t i = 0; i < files.size(); ++i) {
        Rng rng(mix_seed(seed, i));
        ucrt::UcrtTrace trace;
        Tensor res = ucrt::apply(read_png(files[i]), cfg, rng, &trace);
        write_png(out / files[i].filename(), res);
        std::printf("%s hue %.2f -> %.2f (dH %+.2f dS %+.2f dV %+.2f)\n", files[i].filename().c_str(), trace.hue_in,
                    trace.hue_out, trace.delta_h, trace.delta_s, trace.delta_v);
    }
    return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, bool without, bool oracle, double score_thresh,
             const fs::path& detections_out) {
    auto models = train::load_models(ckpt);
    const auto samples = synth::read_dataset(data);
    if (!models.detector && !oracle) throw ContractError("checkpoint has no detector; use --oracle-detections");
    std::vector<std::vector<det::Detection>> dets;
    train::EvalReport rep;
    if (models.detector) {
        rep = train::evaluate(without ? nullptr : &models.unit, *models.detector, samples, physics::kDefaultAlpha,
                              score_thresh, 0.5, &dets);
    } else {
        Rng rng(0);
        det::ToyDetector placeholder(rng);
        rep = train::evaluate(without ? nullptr : &models.unit, placeholder, samples, physics::kDefaultAlpha,
                              score_thresh, 0.5);
    }
    if (oracle) {
        std::vector<std::vector<synth::Box>> gt;
        dets.clear();
        for (const auto& s : samples) {
            gt.push_back(s.boxes);
            std::vector<det::Detection> d;
            for (const auto& b : s.boxes) d.push_back({b, 1.0});
            dets.push_back(d);
        }
        rep.ap = metrics::average_precision(dets, gt, 0.5);
    }
    const char* names[] = {"disc", "rectangle", "ring"};
    for (std::size_t c = 0; c < rep.ap.per_class.size(); ++c) {
        if (rep.ap.per_class[c]) {
            std::printf("AP@0.5 %-9s %.4f\n", names[c], *rep.ap.per_class[c]);
        } else {
            std::printf("AP@0.5 %-9s undefined (no ground truth)\n", names[c]);
        }
    }
    std::printf("mAP@0.5            %.4f\n", rep.ap.mean.value_or(0.0));
    std::printf("PSNR enhanced      %.3f dB\n", rep.psnr_enhanced);
    std::printf("PSNR degraded      %.3f dB\n", rep.psnr_degraded);
    std::printf("gray-world dev     %.6f (degraded %.6f)\n", without ? rep.gray_world_degraded : rep.gray_world_enhanced,
                rep.gray_world_degraded);
    net::UnitModule deploy = models.unit.reparameterized() ? models.unit : models.unit.reparameterize();
    std::printf("params unitmodule  %lld (deployed)\n", static_cast<long long>(deploy.inference_parameter_count()));
    if (models.detector) std::printf("params detector    %lld\n", static_cast<long long>(models.detector->parameter_count()));
    std::printf("images/second      %.1f\n", rep.images_per_second);
    if (!detections_out.empty()) {
        std::ofstream os(detections_out);
        if (!os) throw IoError("cannot write '" + detections_out.string() + "'");
        os << det::detections_csv(dets);
    }
    return 0;
}

int cmd_gradcheck(const std::string& module, double tol, double step, bool fault) {
    f64_bridge::GradRequest req{module, tol, step, fault};
    const auto rows = f64_bridge::run_gradcheck(req);
    std::fputs(f64_bridge::format_rows(rows).c_str(), stdout);
    const auto failed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.pass; });
    std::printf("%zu case(s), %ld failed\n", rows.size(), static_cast<long>(failed));
    return failed == 0 ? 0 : 1;
}

int cmd_hue_stats(const fs::path& in, const ucrt::UcrtConfig& cfg) {
    const auto files = png_files(image_folder(in));
    int inside = 0;
    double total = 0;
    for (const auto& f : files) {
        const double m = ucrt::hue_mean_rgb(read_png(f));
        const bool ok = m >= cfg.hue_min && m <= cfg.hue_max;
        inside += ok;
        total += m;
        std::printf("%s %.3f %s\n", f.filename().c_str(), m, ok ? "in-range" : "out-of-range");
    }
    std::printf("images %zu, mean hue %.3f, in [%.0f,%.0f]: %d (%.1f%%)\n", files.size(), total / files.size(),
                cfg.hue_min, cfg.hue_max, inside, 100.0 * inside / files.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unitmod: physics-guided underwater enhancement jointly trained with a toy detector"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    std::uint64_t seed = 0;
    int count = 0, size = 64;
    std::string out, in, data, val, ckpt, config, resume, module = "all", detections;
    bool dump_t = false, without = false, with_unit = false, fault = false, oracle = false;
    double tol = 1e-3, step = 1e-4, score_thresh = 0.3;
    ucrt::UcrtConfig ucfg;

    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic degraded detection dataset");
    synth_cmd->add_option("--seed", seed, "Dataset seed")->default_val(0);
    synth_cmd->add_option("--count", count, "Number of samples (> 0)")->required();
    synth_cmd->add_option("--size", size, "Square image size in [32,256]")->default_val(64);
    synth_cmd->add_option("--out", out, "Output dataset directory")->required();

    auto* train_cmd = app.add_subcommand("train", "Jointly train UnitModule and the toy detector");
    train_cmd->add_option("--config", config, "key = value config file (defaults when omitted)");
    train_cmd->add_option("--data", data, "Training dataset directory")->required();
    train_cmd->add_option("--val", val, "Validation dataset directory");
    train_cmd->add_option("--out", out, "Output directory for history, steps and checkpoints")->required();
    train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

    auto* enhance_cmd = app.add_subcommand("enhance", "Enhance PNG images with a trained module");
    enhance_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    enhance_cmd->add_option("--in", in, "Input PNG file or directory")->required();
    enhance_cmd->add_option("--out", out, "Output directory")->required();
    enhance_cmd->add_flag("--dump-t", dump_t, "Also write the transmission map (false color) and A (text)");

    auto* augment_cmd = app.add_subcommand("augment", "Apply hue-bounded color jitter to a folder of images");
    augment_cmd->add_option("--data", data, "Dataset or image directory")->required();
    augment_cmd->add_option("--out", out, "Output directory")->required();
    augment_cmd->add_option("--seed", seed, "Augmentation seed")->default_val(0);
    augment_cmd->add_option("--hue-min", ucfg.hue_min, "Lower hue-mean bound")->default_val(18.0);
    augment_cmd->add_option("--hue-max", ucfg.hue_max, "Upper hue-mean bound")->default_val(116.0);
    augment_cmd->add_option("--h-jitter", ucfg.h_jitter, "Maximum hue shift")->default_val(5.0);
    augment_cmd->add_option("--sv-jitter", ucfg.sv_jitter, "Maximum saturation/value shift")->default_val(30.0);
    augment_cmd->add_option("--p", ucfg.p_h, "Per-channel jitter probability")->default_val(0.5);

    auto* eval_cmd = app.add_subcommand("eval", "Report detection and enhancement metrics on a dataset");
    eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--data", data, "Dataset directory")->required();
    auto* with_flag = eval_cmd->add_flag("--with-unitmodule", with_unit, "Enhance before detection (default)");
    eval_cmd->add_flag("--without", without, "Feed degraded images straight to the detector")->excludes(with_flag);
    eval_cmd->add_flag("--oracle-detections", oracle, "Score ground-truth boxes as detections");
    eval_cmd->add_option("--score-thresh", score_thresh, "Detection score threshold")->default_val(0.3);
    eval_cmd->add_option("--detections", detections, "Write detections CSV to this path");

    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit precision");
    grad_cmd->add_option("--module", module, "all | tensor | losses | net")
        ->check(CLI::IsMember({"all", "tensor", "losses", "net"}))
        ->default_val("all");
    grad_cmd->add_option("--tol", tol, "Relative error tolerance")->default_val(1e-3);
    grad_cmd->add_option("--step", step, "Central difference step")->default_val(1e-4);
    grad_cmd->add_flag("--inject-fault", fault, "Add a case with a deliberately wrong backward");

    auto* hue_cmd = app.add_subcommand("hue-stats", "Hue-mean survey of a folder of images");
    hue_cmd->add_option("--in", in, "Dataset or image directory")->required();
    hue_cmd->add_option("--hue-min", ucfg.hue_min, "Lower hue-mean bound")->default_val(18.0);
    hue_cmd->add_option("--hue-max", ucfg.hue_max, "Upper hue-mean bound")->default_val(116.0);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        ucfg.p_s = ucfg.p_v = ucfg.p_h;
        if (*synth_cmd) return cmd_synth(seed, count, size, out);
        if (*train_cmd) return cmd_train(config, data, val, out, resume);
        if (*enhance_cmd) return cmd_enhance(ckpt, in, out, dump_t);
        if (*augment_cmd) return cmd_augment(data, out, seed, ucfg);
        if (*eval_cmd) return cmd_eval(ckpt, data, without, oracle, score_thresh, detections);
        if (*grad_cmd) return cmd_gradcheck(module, tol, step, fault);
        if (*hue_cmd) return cmd_hue_stats(in, ucfg);
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
