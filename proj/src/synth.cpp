#include "unitmod/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>

#include "unitmod/image_io.hpp"
#include "unitmod/parallel.hpp"
#include "unitmod/physics.hpp"
#include "unitmod/tensor_io.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace synth {

namespace fs = std::filesystem;

namespace {

constexpr int kGridStride = 16;
constexpr int kMaxShapes = 5;
constexpr int kPlacementTries = 60;

std::array<double, 3> hsv_color(double hue_deg, double s, double v) {
    const double h = std::fmod(hue_deg, 360.0) / 60.0;
    const int i = std::min(static_cast<int>(h), 5);
    const double f = h - i;
    const double p = v * (1 - s), q = v * (1 - s * f), u = v * (1 - s * (1 - f));
    switch (i) {
        case 0: return {v, u, p};
        case 1: return {q, v, p};
        case 2: return {p, v, u};
        case 3: return {p, q, v};
        case 4: return {u, p, v};
        default: return {v, p, q};
    }
}

struct ShapeDraft {
    int cls;
    double cx, cy;
    double rx, ry;  // half extents (disc/ring radius in both)
    double inner;   // ring inner radius
};

bool covers(const ShapeDraft& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    switch (s.cls) {
        case 0: return dx * dx + dy * dy <= s.rx * s.rx;
        case 1: return std::abs(dx) <= s.rx && std::abs(dy) <= s.ry;
        default: {
            const double d2 = dx * dx + dy * dy;
            return d2 <= s.rx * s.rx && d2 >= s.inner * s.inner;
        }
    }
}

std::optional<Box> tight_box(const ShapeDraft& s, int size) {
    int x0 = size, y0 = size, x1 = -1, y1 = -1;
    const int lo_x = std::max(0, static_cast<int>(s.cx - s.rx) - 1);
    const int hi_x = std::min(size - 1, static_cast<int>(s.cx + s.rx) + 1);
    const int lo_y = std::max(0, static_cast<int>(s.cy - s.ry) - 1);
    const int hi_y = std::min(size - 1, static_cast<int>(s.cy + s.ry) + 1);
    for (int y = lo_y; y <= hi_y; ++y) {
        for (int x = lo_x; x <= hi_x; ++x) {
            if (!covers(s, x + 0.5, y + 0.5)) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    if (x1 < 0) return std::nullopt;
    return Box{s.cls, double(x0), double(y0), double(x1 + 1), double(y1 + 1)};
}

bool separated(const Box& a, const Box& b, double margin) {
    return a.x_max + margin <= b.x_min || b.x_max + margin <= a.x_min || a.y_max + margin <= b.y_min ||
           b.y_max + margin <= a.y_min;
}

std::pair<int, int> center_cell(const Box& b) {
    return {static_cast<int>(0.5 * (b.x_min + b.x_max)) / kGridStride,
            static_cast<int>(0.5 * (b.y_min + b.y_max)) / kGridStride};
}

std::string format_triple(const std::array<double, 3>& v) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", v[0], v[1], v[2]);
    return buf;
}

std::array<double, 3> parse_triple(const std::string& text, const fs::path& file) {
    std::istringstream is(text);
    std::array<double, 3> v{};
    if (!(is >> v[0] >> v[1] >> v[2])) throw IoError("'" + file.string() + "': malformed triple '" + text + "'");
    return v;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write '" + path.string() + "'");
    os << text;
    if (!os) throw IoError("write failed for '" + path.string() + "'");
}

Tensor as_batch(const Tensor& image) { return image.reshape({1, image.dim(0), image.dim(1), image.dim(2)}); }

}  // namespace

Tensor DegradationSpec::transmission() const {
    const int h = depth.dim(2), w = depth.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor t({1, 3, h, w});
    auto d = depth.data();
    auto out = t.data();
    for (int c = 0; c < 3; ++c) {
        for (std::int64_t i = 0; i < plane; ++i) {
            out[c * plane + i] = static_cast<real>(std::exp(-beta[static_cast<std::size_t>(c)] * d[i]));
        }
    }
    return t;
}

Tensor DegradationSpec::background() const {
    return Tensor({1, 3}, {static_cast<real>(a[0]), static_cast<real>(a[1]), static_cast<real>(a[2])});
}

Scene generate_scene(Rng& rng, int size) {
    if (size < 32 || size > 256) throw ConfigError("scene size must lie in [32,256], got " + std::to_string(size));
    const std::int64_t plane = static_cast<std::int64_t>(size) * size;
    Scene scene;
    scene.image = Tensor({3, size, size});
    auto img = scene.image.data();

    // Background: a two-color linear gradient with faint stripes.
    std::array<double, 3> c0{}, c1{};
    for (int c = 0; c < 3; ++c) {
        c0[static_cast<std::size_t>(c)] = rng.uniform(0.1, 0.7);
        c1[static_cast<std::size_t>(c)] = rng.uniform(0.1, 0.7);
    }
    const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
    const double stripe_freq = rng.uniform(2.0, 6.0) * 2 * std::numbers::pi / size;
    const double stripe_phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double stripe_theta = rng.uniform(0.0, std::numbers::pi);
    const double stripe_amp = rng.uniform(0.02, 0.08);
    const double ux = std::cos(theta), uy = std::sin(theta);
    const double span = std::abs(ux) * size + std::abs(uy) * size;
    const double offset = std::min(0.0, ux) * size + std::min(0.0, uy) * size;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double s = ((x + 0.5) * ux + (y + 0.5) * uy - offset) / span;
            const double stripe =
                stripe_amp * std::sin(stripe_freq * ((x + 0.5) * std::cos(stripe_theta) +
                                                     (y + 0.5) * std::sin(stripe_theta)) + stripe_phase);
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - s) * c0[static_cast<std::size_t>(c)] + s * c1[static_cast<std::size_t>(c)] + stripe;
                img[c * plane + y * size + x] = static_cast<real>(std::clamp(v, 0.0, 1.0));
            }
        }
    }

    const double scale = size / 64.0;
    const int wanted = rng.range(1, kMaxShapes);
    std::vector<std::pair<int, int>> cells;
    for (int n = 0; n < wanted; ++n) {
        const int cls = rng.range(0, kNumClasses - 1);
        const std::array<double, 3> color = hsv_color(rng.uniform(0.0, 360.0), rng.uniform(0.6, 1.0),
                                                      rng.uniform(0.7, 1.0));
        for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
            ShapeDraft s{cls, 0, 0, 0, 0, 0};
            if (cls == 1) {
                s.rx = rng.uniform(4.0, 11.0) * scale;
                s.ry = rng.uniform(4.0, 11.0) * scale;
            } else {
                s.rx = s.ry = rng.uniform(cls == 2 ? 6.0 : 4.5, 12.0) * scale;
                s.inner = cls == 2 ? s.rx * rng.uniform(0.45, 0.6) : 0.0;
            }
            s.cx = rng.uniform(s.rx + 1, size - s.rx - 1);
            s.cy = rng.uniform(s.ry + 1, size - s.ry - 1);
            const auto box = tight_box(s, size);
            if (!box || box->area() < 16.0) continue;
            const auto cell = center_cell(*box);
            bool ok = std::find(cells.begin(), cells.end(), cell) == cells.end();
            for (const auto& other : scene.boxes) ok = ok && separated(*box, other, 2.0);
            if (!ok) continue;
            for (int y = static_cast<int>(box->y_min); y < static_cast<int>(box->y_max); ++y) {
                for (int x = static_cast<int>(box->x_min); x < static_cast<int>(box->x_max); ++x) {
                    if (!covers(s, x + 0.5, y + 0.5)) continue;
                    for (int c = 0; c < 3; ++c) {
                        img[c * plane + y * size + x] = static_cast<real>(color[static_cast<std::size_t>(c)]);
                    }
                }
            }
            scene.boxes.push_back(*box);
            cells.push_back(cell);
            break;
        }
    }
    if (scene.boxes.empty()) {
        // Placement into an empty canvas cannot fail for the size bounds above;
        // a centered disc keeps the contract regardless.
        ShapeDraft s{0, size / 2.0, size / 2.0, 6.0 * scale, 6.0 * scale, 0};
        const auto box = tight_box(s, size);
        for (int y = static_cast<int>(box->y_min); y < static_cast<int>(box->y_max); ++y) {
            for (int x = static_cast<int>(box->x_min); x < static_cast<int>(box->x_max); ++x) {
                if (covers(s, x + 0.5, y + 0.5)) {
                    for (int c = 0; c < 3; ++c) img[c * plane + y * size + x] = real(0.9);
                }
            }
        }
        scene.boxes.push_back(*box);
    }
    return scene;
}

Tensor degrade_with(const Tensor& clean, const DegradationSpec& spec) {
    if (clean.ndim() != 3 || clean.dim(0) != 3) {
        throw DimensionError("degrade_with: expected 3×H×W, got " + shape_str(clean.shape()));
    }
    if (!spec.depth.defined() || spec.depth.dim(2) != clean.dim(1) || spec.depth.dim(3) != clean.dim(2)) {
        throw DimensionError("degrade_with: depth field does not match the image");
    }
    Tensor out = physics::degrade_km(as_batch(clean), {spec.transmission()}, {spec.background()});
    return out.reshape(clean.shape());
}

SyntheticSample apply_degradation(const Tensor& clean, Rng& rng) {
    if (clean.ndim() != 3 || clean.dim(0) != 3) {
        throw DimensionError("apply_degradation: expected 3×H×W, got " + shape_str(clean.shape()));
    }
    const int h = clean.dim(1), w = clean.dim(2);
    DegradationSpec spec;
    spec.a = {rng.uniform(0.3, 0.6), rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.9)};
    spec.beta[0] = rng.uniform(0.5, 1.0);
    spec.beta[1] = rng.uniform(0.2, 0.5);
    do {
        spec.beta[2] = rng.uniform(0.1, 0.3);
    } while (spec.beta[2] >= spec.beta[1]);
    if (spec.beta[1] >= spec.beta[0]) spec.beta[1] = std::nextafter(spec.beta[0], 0.0);

    // Depth: a few low-frequency waves plus a ramp, rescaled into a random
    // sub-interval of [0, kMaxDepth].
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::array<Wave, 3> waves{};
    for (auto& wv : waves) {
        wv = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(0.0, 2 * std::numbers::pi),
              rng.uniform(0.3, 1.0)};
    }
    const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
    const double lo = rng.uniform(0.3, 1.5);
    const double hi = std::min(kMaxDepth, lo + rng.uniform(0.5, 1.5));
    spec.depth = Tensor({1, 1, h, w});
    auto d = spec.depth.data();
    double mn = 1e300, mx = -1e300;
    std::vector<double> raw(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double u = (x + 0.5) / w, v = (y + 0.5) / h;
            double f = gx * u + gy * v;
            for (const auto& wv : waves) f += wv.amp * std::cos(2 * std::numbers::pi * (wv.fx * u + wv.fy * v) + wv.phase);
            raw[static_cast<std::size_t>(y) * w + x] = f;
            mn = std::min(mn, f);
            mx = std::max(mx, f);
        }
    }
    const double range = mx - mn > 1e-12 ? mx - mn : 1.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        d[i] = static_cast<real>(std::clamp(lo + (hi - lo) * (raw[i] - mn) / range, 0.0, kMaxDepth));
    }

    SyntheticSample s;
    s.clean = clean;
    s.degraded = degrade_with(clean, spec);
    s.spec = std::move(spec);
    return s;
}

SyntheticSample generate_sample(std::uint64_t seed, std::uint64_t index, int size) {
    Rng rng(mix_seed(seed, index));
    Scene scene = generate_scene(rng, size);
    SyntheticSample s = apply_degradation(scene.image, rng);
    s.boxes = std::move(scene.boxes);
    return s;
}

std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, int count, int size, std::uint64_t first_index) {
    if (count <= 0) throw ConfigError("dataset count must be positive, got " + std::to_string(count));
    std::vector<SyntheticSample> out(static_cast<std::size_t>(count));
    parallel_for(count, [&](int i) {
        out[static_cast<std::size_t>(i)] = generate_sample(seed, first_index + static_cast<std::uint64_t>(i), size);
    });
    return out;
}

std::string sample_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05zu", index);
    return buf;
}

void write_dataset(const std::vector<SyntheticSample>& samples, const fs::path& dir) {
    std::error_code ec;
    for (const char* sub : {"clean", "degraded", "labels", "specs"}) {
        fs::create_directories(dir / sub, ec);
        if (ec) throw IoError("cannot create '" + (dir / sub).string() + "': " + ec.message());
    }
    std::ostringstream manifest;
    manifest << "# unitmod synthetic dataset\n" << "count " << samples.size() << "\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const std::string id = sample_id(i);
        write_png(dir / "clean" / (id + ".png"), s.clean);
        write_png(dir / "degraded" / (id + ".png"), s.degraded);
        std::ostringstream labels;
        for (const auto& b : s.boxes) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%d %.17g %.17g %.17g %.17g\n", b.cls, b.x_min, b.y_min, b.x_max, b.y_max);
            labels << buf;
        }
        write_text(dir / "labels" / (id + ".txt"), labels.str());
        save_tensor(dir / "specs" / (id + ".umt"), s.spec.depth);
        write_text(dir / "specs" / (id + ".txt"),
                   "a = " + format_triple(s.spec.a) + "\nbeta = " + format_triple(s.spec.beta) + "\n");
        manifest << id << " a=" << format_triple(s.spec.a) << " beta=" << format_triple(s.spec.beta) << "\n";
    }
    write_text(dir / "manifest.txt", manifest.str());
}

std::vector<SyntheticSample> read_dataset(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.txt";
    std::ifstream manifest(manifest_path);
    if (!manifest) throw IoError("cannot open dataset manifest '" + manifest_path.string() + "'");
    std::vector<std::string> ids;
    long declared = -1;
    std::string line;
    while (std::getline(manifest, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string head;
        is >> head;
        if (head == "count") {
            if (!(is >> declared)) throw IoError("'" + manifest_path.string() + "': malformed count line");
        } else {
            ids.push_back(head);
        }
    }
    if (declared < 0 || static_cast<std::size_t>(declared) != ids.size()) {
        throw IoError("'" + manifest_path.string() + "': declared count does not match listed samples");
    }
    std::vector<SyntheticSample> out(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::string& id = ids[i];
        auto& s = out[i];
        s.clean = read_png(dir / "clean" / (id + ".png"));
        s.degraded = read_png(dir / "degraded" / (id + ".png"));
        const fs::path label_path = dir / "labels" / (id + ".txt");
        std::ifstream labels(label_path);
        if (!labels) throw IoError("cannot open '" + label_path.string() + "'");
        while (std::getline(labels, line)) {
            line = trim(line);
            if (line.empty()) continue;
            std::istringstream is(line);
            Box b;
            if (!(is >> b.cls >> b.x_min >> b.y_min >> b.x_max >> b.y_max) || b.cls < 0 || b.cls >= kNumClasses) {
                throw IoError("'" + label_path.string() + "': malformed label '" + line + "'");
            }
            s.boxes.push_back(b);
        }
        s.spec.depth = load_tensor(dir / "specs" / (id + ".umt"));
        const fs::path side = dir / "specs" / (id + ".txt");
        std::ifstream sidecar(side);
        if (!sidecar) throw IoError("cannot open '" + side.string() + "'");
        std::map<std::string, std::string> kv;
        while (std::getline(sidecar, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        if (!kv.count("a") || !kv.count("beta")) throw IoError("'" + side.string() + "': missing a or beta");
        s.spec.a = parse_triple(kv["a"], side);
        s.spec.beta = parse_triple(kv["beta"], side);
        if (s.clean.shape() != s.degraded.shape() || s.spec.depth.ndim() != 4 ||
            s.spec.depth.dim(2) != s.clean.dim(1) || s.spec.depth.dim(3) != s.clean.dim(2)) {
            throw IoError("sample '" + id + "' in '" + dir.string() + "' has inconsistent sizes");
        }
    }
    return out;
}

}  // namespace synth
UNITMOD_END_NAMESPACE
