#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "unitmod/gradcheck.hpp"
#include "unitmod/ops.hpp"
#include "unitmod/rng.hpp"

using namespace unitmod;

namespace {

Tensor random_leaf(const Shape& shape, Rng& rng, double lo = -1, double hi = 1) {
    Tensor t(shape);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    t.set_requires_grad();
    return t;
}

void require_all_pass(const std::string& module) {
    gradcheck::Options opt;
    for (const auto& r : gradcheck::run_suite(module, opt)) {
        INFO(r.module << "/" << r.name << " max_rel_err " << r.max_rel_err << " worst " << r.worst);
        CHECK(r.pass);
        CHECK(r.checked > 0);
    }
}

}  // namespace

TEST_CASE("precision of this build") { CHECK(std::string(precision_name()) == "f64"); }

TEST_CASE("tensor ops pass finite differences") { require_all_pass("tensor"); }
TEST_CASE("losses pass finite differences") { require_all_pass("losses"); }
TEST_CASE("network and joint objective pass finite differences") { require_all_pass("net"); }

TEST_CASE("depthwise K=9 conv input gradient at step 1e-3") {
    Rng rng(21);
    gradcheck::Case c{"tensor", "dw9", {random_leaf({2, 4, 8, 8}, rng), random_leaf({4, 1, 9, 9}, rng)},
                      [](const std::vector<Tensor>& x) { return ops::sum(ops::conv2d(x[0], x[1], {}, {1, 4, 4})); }};
    gradcheck::Options opt;
    opt.step = 1e-3;
    opt.refinements = 0;
    const auto r = gradcheck::check(c, opt);
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("smooth elementwise ops over 20 seeds") {
    using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
    const std::vector<std::pair<const char*, Fn>> ops_list = {
        {"sigmoid", [](const auto& x) { return ops::sigmoid(x[0]); }},
        {"softplus", [](const auto& x) { return ops::softplus(x[0]); }},
        {"mul", [](const auto& x) { return x[0] * x[1]; }},
        {"div", [](const auto& x) { return x[0] / (x[1] * x[1] + 0.5); }},
        {"group_norm", [](const auto& x) { return ops::group_norm(x[0], 2, x[1].reshape({4}), x[1].reshape({4}) * 0.5); }},
    };
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        for (const auto& [name, fn] : ops_list) {
            Tensor a = random_leaf({1, 4, 3, 3}, rng);
            Tensor b = random_leaf(std::string(name) == "group_norm" ? Shape{1, 4, 1, 1} : Shape{1, 4, 3, 3}, rng);
            gradcheck::Case c{"tensor", name, {a, b}, gradcheck::projected(fn, seed)};
            gradcheck::Options opt;
            opt.step = 1e-3;
            opt.refinements = 0;
            const auto r = gradcheck::check(c, opt);
            INFO(name << " seed " << seed);
            CHECK(r.max_rel_err < 1e-3);
        }
    }
}

TEST_CASE("a wrong backward is reported by name") {
    const auto results = gradcheck::run_suite("tensor", gradcheck::Options{}, true);
    bool seen = false;
    for (const auto& r : results) {
        if (r.name != "faulty_square") continue;
        seen = true;
        CHECK_FALSE(r.pass);
        CHECK(r.max_rel_err == doctest::Approx(0.5).epsilon(1e-3));
    }
    CHECK(seen);
    const std::string table = gradcheck::format_table(results);
    CHECK(table.find("faulty_square") != std::string::npos);
    CHECK(table.find("FAIL") != std::string::npos);
}

TEST_CASE("the tolerance option is respected") {
    Rng rng(5);
    gradcheck::Case c{"tensor", "exp", {random_leaf({3, 3}, rng)},
                      [](const std::vector<Tensor>& x) { return ops::sum(ops::exp(x[0])); }};
    gradcheck::Options loose;
    loose.tolerance = 1e-3;
    CHECK(gradcheck::check(c, loose).pass);
    gradcheck::Options strict = loose;
    strict.tolerance = 1e-14;
    strict.refinements = 0;
    CHECK_FALSE(gradcheck::check(c, strict).pass);
}

TEST_CASE("unknown module is a configuration error") {
    CHECK_THROWS_AS(gradcheck::builtin_cases("bogus"), ConfigError);
}
