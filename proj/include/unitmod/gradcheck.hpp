#pragma once

#include <functional>
#include <string>
#include <vector>

#include "unitmod/tensor.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace gradcheck {

struct Options {
    double tolerance = 1e-3;
    double step = 1e-4;
    /// Retries of an element that fails, each with a ten times smaller step.
    /// Steps across an activation kink disagree; a wrong derivative does not
    /// improve with the step.
    int refinements = 3;
    /// Denominator floor of the relative error, so that near-zero
    /// gradients are compared absolutely.
    double floor = 1e-6;
    /// Elements checked per input tensor; 0 checks all of them.
    int max_elements = 0;
    std::uint64_t seed = 7;
};

/// A scalar function of leaf tensors. `inputs` must require gradients.
struct Case {
    std::string module;
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Tensor(const std::vector<Tensor>&)> fn;
    double tolerance_scale = 1.0;
    int max_elements = -1;  // -1 defers to Options
};

struct Result {
    std::string module;
    std::string name;
    double max_rel_err = 0;
    double max_abs_err = 0;
    double tolerance = 0;
    std::int64_t checked = 0;
    std::int64_t refined = 0;  // elements that needed a smaller step
    std::string worst;  // "input:element" of the largest error
    bool pass = false;
};

/// Compares reverse-mode gradients with central differences.
Result check(const Case& c, const Options& opt);

/// Modules: tensor, losses, net, or all. `with_fault` adds a case whose
/// backward is deliberately wrong.
std::vector<Case> builtin_cases(const std::string& module, bool with_fault = false);
std::vector<Result> run_suite(const std::string& module, const Options& opt, bool with_fault = false);

std::string format_table(const std::vector<Result>& results);

/// sum(f(x) ⊙ R) for a fixed pseudo-random R; turns a tensor-valued op into
/// a scalar that exercises every output gradient.
std::function<Tensor(const std::vector<Tensor>&)> projected(std::function<Tensor(const std::vector<Tensor>&)> op,
                                                            std::uint64_t seed = 11);

}  // namespace gradcheck
UNITMOD_END_NAMESPACE
