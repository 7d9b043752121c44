#include "unitmod/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <sstream>

#include "unitmod/physics.hpp"
#include "unitmod/tensor_io.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace train {

namespace fs = std::filesystem;

namespace {

constexpr int kEvalBatch = 16;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size()) throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    return out;
}

long parse_long(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long out = 0;
    try {
        out = std::stol(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size()) throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<NamedTensor> prefixed(std::vector<NamedTensor> entries, const std::string& prefix) {
    for (auto& e : entries) e.name = prefix + e.name;
    return entries;
}

bool finite(double v) { return std::isfinite(v); }

int first_nonfinite_image(const Tensor& t) {
    if (!t.defined() || t.ndim() == 0) return -1;
    const int n = t.dim(0);
    const std::int64_t per = t.numel() / std::max(n, 1);
    auto d = t.data();
    for (int b = 0; b < n; ++b) {
        for (std::int64_t i = 0; i < per; ++i) {
            if (!std::isfinite(d[static_cast<std::size_t>(b * per + i)])) return b;
        }
    }
    return -1;
}

Tensor text_tensor(const std::string& s) {
    Tensor t({static_cast<int>(s.size())});
    for (std::size_t i = 0; i < s.size(); ++i) t[static_cast<std::int64_t>(i)] = static_cast<unsigned char>(s[i]);
    return t;
}

std::string tensor_text(const Tensor& t) {
    std::string s(static_cast<std::size_t>(t.numel()), '\0');
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<char>(static_cast<int>(t[static_cast<std::int64_t>(i)]));
    return s;
}

const Tensor& find_entry(const std::vector<NamedTensor>& entries, const std::string& name, const fs::path& path) {
    for (const auto& e : entries) {
        if (e.name == name) return e.tensor;
    }
    throw IoError("checkpoint '" + path.string() + "' lacks entry '" + name + "'");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write '" + path.string() + "'");
    os << text;
    if (!os) throw IoError("write failed for '" + path.string() + "'");
}

// Keeps header plus the rows whose leading integer field is below `limit`.
std::string kept_rows(const fs::path& path, long limit) {
    std::ifstream is(path);
    if (!is) return {};
    std::string line, out;
    bool header = true;
    while (std::getline(is, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        if (std::stol(line.substr(0, line.find(','))) < limit) out += line + "\n";
    }
    return out;
}

Tensor image_batch(const std::vector<synth::SyntheticSample>& samples, std::size_t begin, std::size_t end,
                   bool clean) {
    const auto& first = clean ? samples[begin].clean : samples[begin].degraded;
    const int h = first.dim(1), w = first.dim(2);
    const std::int64_t per = 3LL * h * w;
    Tensor out({static_cast<int>(end - begin), 3, h, w});
    for (std::size_t i = begin; i < end; ++i) {
        const auto& img = clean ? samples[i].clean : samples[i].degraded;
        if (img.dim(1) != h || img.dim(2) != w) throw DimensionError("batch images must share one size");
        std::copy_n(img.data().begin(), per, out.data().begin() + static_cast<std::int64_t>(i - begin) * per);
    }
    return out;
}

Tensor image_of(const Tensor& batch, int i) {
    const int h = batch.dim(2), w = batch.dim(3);
    const std::int64_t per = 3LL * h * w;
    Tensor out({3, h, w});
    std::copy_n(batch.data().begin() + i * per, per, out.data().begin());
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (warmup_iters < 0) throw ConfigError("warmup_iters must be non-negative");
    physics::Alpha a(alpha);
    (void)a;
    weights.validate();
    ucrt.validate();
    unit.validate();
    if (ema_decay != 0.0) throw ConfigError("ema_decay is not supported; weight averaging is not implemented");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
    if (!(score_thresh > 0 && score_thresh < 1)) throw ConfigError("score_thresh must lie in (0,1)");
    if (!(iou_thresh > 0 && iou_thresh < 1)) throw ConfigError("iou_thresh must lie in (0,1)");
}

void TrainConfig::validate(long total_iters) const {
    validate();
    if (warmup_iters >= total_iters) {
        throw ConfigError("warmup_iters (" + std::to_string(warmup_iters) + ") must be below the total iteration count (" +
                          std::to_string(total_iters) + ")");
    }
}

TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters{
        {"epochs", [&](auto& k, auto& v) { c.epochs = static_cast<int>(parse_long(k, v)); }},
        {"batch_size", [&](auto& k, auto& v) { c.batch_size = static_cast<int>(parse_long(k, v)); }},
        {"lr", [&](auto& k, auto& v) { c.lr = parse_double(k, v); }},
        {"momentum", [&](auto& k, auto& v) { c.momentum = parse_double(k, v); }},
        {"weight_decay", [&](auto& k, auto& v) { c.weight_decay = parse_double(k, v); }},
        {"warmup_iters", [&](auto& k, auto& v) { c.warmup_iters = static_cast<int>(parse_long(k, v)); }},
        {"alpha", [&](auto& k, auto& v) { c.alpha = parse_double(k, v); }},
        {"w1", [&](auto& k, auto& v) { c.weights.w1 = parse_double(k, v); }},
        {"w2", [&](auto& k, auto& v) { c.weights.w2 = parse_double(k, v); }},
        {"w3", [&](auto& k, auto& v) { c.weights.w3 = parse_double(k, v); }},
        {"w4", [&](auto& k, auto& v) { c.weights.w4 = parse_double(k, v); }},
        {"w5", [&](auto& k, auto& v) { c.weights.w5 = parse_double(k, v); }},
        {"loss_reduction",
         [&](auto& k, auto& v) {
             if (v == "mean") {
                 c.reduction = loss::PixelReduction::Mean;
             } else if (v == "sum") {
                 c.reduction = loss::PixelReduction::Sum;
             } else {
                 throw ConfigError("config key '" + k + "': expected mean or sum, got '" + v + "'");
             }
         }},
        {"tv_both_branches", [&](auto& k, auto& v) { c.tv_both_branches = parse_bool(k, v); }},
        {"cc_both_branches", [&](auto& k, auto& v) { c.cc_both_branches = parse_bool(k, v); }},
        {"seed", [&](auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(parse_long(k, v)); }},
        {"unitmodule_enabled", [&](auto& k, auto& v) { c.unitmodule_enabled = parse_bool(k, v); }},
        {"ucrt_enabled", [&](auto& k, auto& v) { c.ucrt_enabled = parse_bool(k, v); }},
        {"ucrt_hue_min", [&](auto& k, auto& v) { c.ucrt.hue_min = parse_double(k, v); }},
        {"ucrt_hue_max", [&](auto& k, auto& v) { c.ucrt.hue_max = parse_double(k, v); }},
        {"ucrt_h_jitter", [&](auto& k, auto& v) { c.ucrt.h_jitter = parse_double(k, v); }},
        {"ucrt_sv_jitter", [&](auto& k, auto& v) { c.ucrt.sv_jitter = parse_double(k, v); }},
        {"stem_c1", [&](auto& k, auto& v) { c.unit.stem_c1 = static_cast<int>(parse_long(k, v)); }},
        {"stem_c2", [&](auto& k, auto& v) { c.unit.stem_c2 = static_cast<int>(parse_long(k, v)); }},
        {"k1", [&](auto& k, auto& v) { c.unit.k1 = static_cast<int>(parse_long(k, v)); }},
        {"k2", [&](auto& k, auto& v) { c.unit.k2 = static_cast<int>(parse_long(k, v)); }},
        {"t_min", [&](auto& k, auto& v) { c.unit.t_min = parse_double(k, v); }},
        {"strict_reparam", [&](auto& k, auto& v) { c.unit.strict_reparam = parse_bool(k, v); }},
        {"ema_decay", [&](auto& k, auto& v) { c.ema_decay = parse_double(k, v); }},
        {"checkpoint_every", [&](auto& k, auto& v) { c.checkpoint_every = static_cast<int>(parse_long(k, v)); }},
        {"score_thresh", [&](auto& k, auto& v) { c.score_thresh = parse_double(k, v); }},
        {"iou_thresh", [&](auto& k, auto& v) { c.iou_thresh = parse_double(k, v); }},
    };
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        it->second(key, value);
    }
    c.validate();
    return c;
}

TrainConfig load_config(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open config '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string format_config(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "epochs = " << c.epochs << "\nbatch_size = " << c.batch_size << "\nlr = " << c.lr
       << "\nmomentum = " << c.momentum << "\nweight_decay = " << c.weight_decay
       << "\nwarmup_iters = " << c.warmup_iters << "\nalpha = " << c.alpha << "\nw1 = " << c.weights.w1
       << "\nw2 = " << c.weights.w2 << "\nw3 = " << c.weights.w3 << "\nw4 = " << c.weights.w4
       << "\nw5 = " << c.weights.w5
       << "\nloss_reduction = " << (c.reduction == loss::PixelReduction::Mean ? "mean" : "sum")
       << "\ntv_both_branches = " << (c.tv_both_branches ? "true" : "false")
       << "\ncc_both_branches = " << (c.cc_both_branches ? "true" : "false") << "\nseed = " << c.seed
       << "\nunitmodule_enabled = " << (c.unitmodule_enabled ? "true" : "false")
       << "\nucrt_enabled = " << (c.ucrt_enabled ? "true" : "false") << "\nstem_c1 = " << c.unit.stem_c1
       << "\nstem_c2 = " << c.unit.stem_c2 << "\nk1 = " << c.unit.k1 << "\nk2 = " << c.unit.k2
       << "\nt_min = " << c.unit.t_min << "\ncheckpoint_every = " << c.checkpoint_every
       << "\nscore_thresh = " << c.score_thresh << "\niou_thresh = " << c.iou_thresh << "\n";
    return os.str();
}

double learning_rate(const TrainConfig& c, long step, long total_steps) {
    if (step < c.warmup_iters) return c.lr * static_cast<double>(step + 1) / c.warmup_iters;
    const double span = static_cast<double>(std::max<long>(total_steps - c.warmup_iters, 1));
    const double progress = std::min(1.0, static_cast<double>(step - c.warmup_iters + 1) / span);
    return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Sgd::Sgd(std::vector<NamedTensor> params) : params_(std::move(params)) {
    for (const auto& p : params_) {
        momentum_.push_back(Tensor::zeros(p.tensor.shape()));
        const bool is_weight = p.name.size() >= 7 && p.name.compare(p.name.size() - 7, 7, ".weight") == 0;
        decay_.push_back(is_weight && p.tensor.ndim() >= 2);
    }
}

void Sgd::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

void Sgd::step(double lr, double momentum, double weight_decay) {
    const real lr_r = static_cast<real>(lr), mom = static_cast<real>(momentum), wd = static_cast<real>(weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor w = params_[i].tensor;
        if (!w.has_grad()) continue;
        auto g = w.grad();
        auto v = w.data();
        auto buf = momentum_[i].data();
        const bool decay = decay_[i];
        for (std::size_t k = 0; k < v.size(); ++k) {
            const real gk = decay ? g[k] + wd * v[k] : g[k];
            buf[k] = mom * buf[k] + gk;
            v[k] -= lr_r * buf[k];
        }
    }
}

std::vector<NamedTensor> Sgd::state() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.push_back({params_[i].name, momentum_[i]});
    return out;
}

void Sgd::load(const std::vector<NamedTensor>& entries, const std::string& prefix) {
    load_into(prefixed(state(), prefix), entries);
}

Batch make_batch(const std::vector<synth::SyntheticSample>& samples, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ConfigError("make_batch: empty index list");
    const int h = samples[indices[0]].degraded.dim(1), w = samples[indices[0]].degraded.dim(2);
    const std::int64_t per = 3LL * h * w;
    Batch b;
    b.images = Tensor({static_cast<int>(indices.size()), 3, h, w});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& s = samples[indices[i]];
        if (s.degraded.dim(1) != h || s.degraded.dim(2) != w) throw DimensionError("batch images must share one size");
        std::copy_n(s.degraded.data().begin(), per, b.images.data().begin() + static_cast<std::int64_t>(i) * per);
        b.boxes.push_back(s.boxes);
    }
    return b;
}

double transmission_consistency(net::UnitModule& unit, const std::vector<synth::SyntheticSample>& samples,
                                double alpha) {
    NoGradGuard guard;
    const physics::Alpha al(alpha);
    double acc = 0;
    std::int64_t count = 0;
    for (std::size_t s = 0; s < samples.size(); s += kEvalBatch) {
        const std::size_t e = std::min(samples.size(), s + kEvalBatch);
        Tensor j1 = image_batch(samples, s, e, false);
        const auto a = physics::background_light(j1);
        Tensor j2 = physics::degrade_alpha(j1, al, a);
        const auto t1 = unit.thead(unit.backbone(j1, Mode::Eval));
        const auto t2 = unit.thead(unit.backbone(j2, Mode::Eval));
        auto x = t1.value.data();
        auto y = t2.value.data();
        for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(alpha * x[i] - y[i]);
        count += static_cast<std::int64_t>(x.size());
    }
    return count > 0 ? acc / static_cast<double>(count) : 0.0;
}

EvalReport evaluate(const net::UnitModule* unit, const det::ToyDetector& detector,
                    const std::vector<synth::SyntheticSample>& samples, double alpha, double score_thresh,
                    double iou_thresh, std::vector<std::vector<det::Detection>>* detections) {
    NoGradGuard guard;
    EvalReport r;
    r.images = static_cast<int>(samples.size());
    if (samples.empty()) return r;
    std::optional<net::UnitModule> deploy;
    if (unit) deploy = unit->reparameterized() ? *unit : unit->reparameterize();
    std::vector<std::vector<det::Detection>> all;
    std::vector<std::vector<synth::Box>> gt;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < samples.size(); s += kEvalBatch) {
        const std::size_t e = std::min(samples.size(), s + kEvalBatch);
        Tensor degraded = image_batch(samples, s, e, false);
        Tensor enhanced = deploy ? deploy->enhance(degraded, Mode::Inference).enhanced : degraded;
        auto dets = det::decode_and_nms(detector.forward(enhanced), score_thresh, iou_thresh);
        for (std::size_t i = s; i < e; ++i) {
            const int k = static_cast<int>(i - s);
            Tensor enh = metrics::clip_unit(image_of(enhanced, k));
            r.psnr_enhanced += metrics::psnr(enh, samples[i].clean);
            r.psnr_degraded += metrics::psnr(samples[i].degraded, samples[i].clean);
            r.gray_world_enhanced += metrics::gray_world_deviation(enh);
            r.gray_world_degraded += metrics::gray_world_deviation(samples[i].degraded);
            all.push_back(std::move(dets[static_cast<std::size_t>(k)]));
            gt.push_back(samples[i].boxes);
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double n = static_cast<double>(samples.size());
    r.psnr_enhanced /= n;
    r.psnr_degraded /= n;
    r.gray_world_enhanced /= n;
    r.gray_world_degraded /= n;
    r.images_per_second = secs > 0 ? n / secs : 0.0;
    r.ap = metrics::average_precision(all, gt, 0.5);
    if (unit) {
        net::UnitModule view = *unit;
        r.consistency = view.reparameterized() ? 0.0 : transmission_consistency(view, samples, alpha);
    }
    if (detections) *detections = std::move(all);
    return r;
}

std::string HistoryRow::csv_header() {
    return "epoch,step,lr,l_total,l_unitmodule,l_detector,l_t,val_map,val_ap_disc,val_ap_rect,val_ap_ring,"
           "val_psnr_enhanced,val_psnr_degraded,val_gray_world_enhanced,val_consistency";
}

std::string HistoryRow::csv_row() const {
    auto ap_or = [](const std::optional<double>& v) { return v ? *v : -1.0; };
    char buf[768];
    std::snprintf(buf, sizeof(buf), "%d,%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", epoch,
                  step, lr, l_total, l_unitmodule, l_detector, l_t, ap_or(val.ap.mean), ap_or(val.ap.per_class.size() > 0 ? val.ap.per_class[0] : std::nullopt),
                  ap_or(val.ap.per_class.size() > 1 ? val.ap.per_class[1] : std::nullopt),
                  ap_or(val.ap.per_class.size() > 2 ? val.ap.per_class[2] : std::nullopt), val.psnr_enhanced,
                  val.psnr_degraded, val.gray_world_enhanced, val.consistency);
    return buf;
}

namespace {

net::UnitModule build_unit(const TrainConfig& c) {
    c.validate();
    Rng rng(mix_seed(c.seed, 1));
    return net::UnitModule(c.unit, rng);
}

det::ToyDetector build_detector(const TrainConfig& c) {
    Rng rng(mix_seed(c.seed, 2));
    return det::ToyDetector(rng);
}

}  // namespace

Trainer::Trainer(TrainConfig config)
    : config_(std::move(config)),
      unit_(build_unit(config_)),
      detector_(build_detector(config_)),
      rng_(mix_seed(config_.seed, 3)) {
    std::vector<NamedTensor> params;
    if (config_.unitmodule_enabled) params = prefixed(unit_.parameters(true), "unit.");
    for (auto& p : prefixed(detector_.parameters(), "det.")) params.push_back(std::move(p));
    sgd_ = Sgd(std::move(params));
}

void Trainer::set_total_steps(long total) {
    config_.validate(total);
    total_steps_ = total;
}

loss::LossReport Trainer::forward_losses(const Batch& batch, Mode mode, Tensor& total) {
    loss::LossReport rep;
    rep.step = step_;
    const auto red = config_.reduction;
    Tensor l_unit;
    Tensor det_input = batch.images;
    net::EnhanceResult r1, r2;
    if (config_.unitmodule_enabled) {
        const physics::Alpha alpha(config_.alpha);
        r1 = unit_.enhance(batch.images, mode);
        const physics::BackgroundLight a{r1.a.value.detach()};
        Tensor j2 = physics::degrade_alpha(batch.images, alpha, a);
        r2 = unit_.enhance(j2, mode);
        loss::LossComponents c;
        c.l_t = loss::transmission_loss(r1.t, r2.t, alpha, red);
        c.l_sp = loss::saturated_pixel_loss(r1.enhanced, r2.enhanced, red);
        c.l_tv = loss::total_variation_loss(r1.enhanced, red);
        if (config_.tv_both_branches) c.l_tv = c.l_tv + loss::total_variation_loss(r2.enhanced, red);
        c.l_cc = loss::color_cast_loss(r1.enhanced);
        if (config_.cc_both_branches) c.l_cc = c.l_cc + loss::color_cast_loss(r2.enhanced);
        if (r1.color_cast) c.l_acc = loss::assisting_color_cast_loss(*r1.color_cast, a);
        l_unit = loss::unit_module_loss(c, config_.weights, rep);
        det_input = r1.enhanced;
    }
    Tensor raw = detector_.forward(det_input);
    Tensor l_det = det::detector_loss(raw, batch.boxes);
    rep.l_detector = l_det.item();
    total = l_unit.defined() ? l_unit + l_det : l_det;
    rep.l_total = total.item();

    const std::pair<const char*, double> terms[] = {{"l_t", rep.l_t},           {"l_sp", rep.l_sp},
                                                    {"l_tv", rep.l_tv},         {"l_cc", rep.l_cc},
                                                    {"l_acc", rep.l_acc},       {"l_detector", rep.l_detector},
                                                    {"l_total", rep.l_total}};
    for (const auto& [name, value] : terms) {
        if (finite(value)) continue;
        int index = -1;
        for (const Tensor* t : {&r1.enhanced, &r1.t.value, &r2.enhanced, &r2.t.value, &raw}) {
            index = first_nonfinite_image(*t);
            if (index >= 0) break;
        }
        throw NumericError("non-finite " + std::string(name) + " at step " + std::to_string(step_) +
                           (index >= 0 ? " (batch index " + std::to_string(index) + ")" : " (no single image isolated)") +
                           "; report: " + rep.csv_row());
    }
    return rep;
}

loss::LossReport Trainer::compute_losses(const Batch& batch, Tensor* total) {
    Tensor t;
    auto rep = forward_losses(batch, Mode::Eval, t);
    if (total) *total = t;
    return rep;
}

loss::LossReport Trainer::train_step(const Batch& batch) {
    if (total_steps_ <= 0) throw ContractError("train_step: set_total_steps before training");
    Tensor total;
    sgd_.zero_grad();
    auto rep = forward_losses(batch, Mode::Train, total);
    total.backward();
    sgd_.step(learning_rate(config_, step_, total_steps_), config_.momentum, config_.weight_decay);
    ++step_;
    return rep;
}

EvalReport Trainer::evaluate(const std::vector<synth::SyntheticSample>& samples) {
    return train::evaluate(config_.unitmodule_enabled ? &unit_ : nullptr, detector_, samples, config_.alpha,
                           config_.score_thresh, config_.iou_thresh);
}

std::vector<HistoryRow> Trainer::fit(const std::vector<synth::SyntheticSample>& train_set,
                                     const std::vector<synth::SyntheticSample>& val_set, const fs::path& out_dir) {
    if (train_set.empty()) throw ConfigError("training set is empty");
    const long per_epoch = static_cast<long>((train_set.size() + config_.batch_size - 1) / config_.batch_size);
    set_total_steps(per_epoch * config_.epochs);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

    std::string history = HistoryRow::csv_header() + "\n" + kept_rows(out_dir / "history.csv", epoch_ + 1);
    std::string steps = loss::LossReport::csv_header() + "\n" + kept_rows(out_dir / "steps.csv", step_);
    std::vector<HistoryRow> rows;
    for (int e = epoch_; e < config_.epochs; ++e) {
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.below(i)]);
        HistoryRow row;
        double lr_last = 0;
        for (long b = 0; b < per_epoch; ++b) {
            const std::size_t s = static_cast<std::size_t>(b) * config_.batch_size;
            const std::size_t t = std::min(order.size(), s + config_.batch_size);
            Batch batch = make_batch(train_set, {order.begin() + static_cast<std::ptrdiff_t>(s),
                                                 order.begin() + static_cast<std::ptrdiff_t>(t)});
            const std::uint64_t aug_seed = rng_.next_u64();
            if (config_.ucrt_enabled) batch.images = ucrt::apply_batch(batch.images, config_.ucrt, aug_seed);
            lr_last = learning_rate(config_, step_, total_steps_);
            const auto rep = train_step(batch);
            steps += rep.csv_row() + "\n";
            row.l_total += rep.l_total / per_epoch;
            row.l_unitmodule += rep.l_unitmodule / per_epoch;
            row.l_detector += rep.l_detector / per_epoch;
            row.l_t += rep.l_t / per_epoch;
        }
        epoch_ = e + 1;
        row.epoch = epoch_;
        row.step = step_;
        row.lr = lr_last;
        row.val = evaluate(val_set);
        history += row.csv_row() + "\n";
        rows.push_back(row);
        write_text(out_dir / "history.csv", history);
        write_text(out_dir / "steps.csv", steps);
        if (config_.checkpoint_every > 0 && epoch_ % config_.checkpoint_every == 0) {
            save_checkpoint(out_dir / ("ckpt_epoch_" + std::to_string(epoch_) + ".umck"));
        }
    }
    save_checkpoint(out_dir / "final.umck");
    return rows;
}

std::vector<NamedTensor> Trainer::checkpoint_entries() const {
    auto entries = prefixed(unit_.state(), "unit.");
    for (auto& e : prefixed(detector_.parameters(), "det.")) entries.push_back(std::move(e));
    for (auto& e : prefixed(sgd_.state(), "opt.")) entries.push_back(std::move(e));
    entries.push_back({"meta.step", Tensor::scalar(static_cast<real>(step_))});
    entries.push_back({"meta.epoch", Tensor::scalar(static_cast<real>(epoch_))});
    entries.push_back({"meta.rng", text_tensor(rng_.state())});
    return entries;
}

void Trainer::save_checkpoint(const fs::path& path) const { unitmod::save_checkpoint(path, checkpoint_entries()); }

void Trainer::load_checkpoint(const fs::path& path) {
    const auto entries = unitmod::load_checkpoint(path);
    auto unit_targets = prefixed(unit_.state(), "unit.");
    std::erase_if(unit_targets, [](const NamedTensor& t) { return t.name == "unit.config"; });
    load_into(unit_targets, entries);
    detector_.load(entries, "det.");
    sgd_.load(entries, "opt.");
    step_ = static_cast<long>(find_entry(entries, "meta.step", path).item());
    epoch_ = static_cast<int>(find_entry(entries, "meta.epoch", path).item());
    rng_.set_state(tensor_text(find_entry(entries, "meta.rng", path)));
}

LoadedModels load_models(const fs::path& checkpoint) {
    const auto entries = unitmod::load_checkpoint(checkpoint);
    LoadedModels m{net::UnitModule::from_state(entries, "unit."), std::nullopt};
    const bool has_detector = std::any_of(entries.begin(), entries.end(),
                                          [](const NamedTensor& e) { return e.name.rfind("det.", 0) == 0; });
    if (has_detector) {
        Rng rng(0);
        det::ToyDetector d(rng);
        d.load(entries, "det.");
        m.detector = std::move(d);
    }
    return m;
}

}  // namespace train
UNITMOD_END_NAMESPACE
