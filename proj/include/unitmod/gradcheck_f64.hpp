#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Precision-neutral entry point to the 64-bit gradient checks, callable from
// code built against either precision.
namespace unitmod::f64_bridge {

struct GradRow {
    std::string module;
    std::string name;
    double max_rel_err = 0;
    double tolerance = 0;
    std::int64_t checked = 0;
    std::int64_t refined = 0;
    std::string worst;
    bool pass = false;
};

struct GradRequest {
    std::string module = "all";
    double tolerance = 1e-3;
    double step = 1e-4;
    bool with_fault = false;
};

std::vector<GradRow> run_gradcheck(const GradRequest& request);
std::string format_rows(const std::vector<GradRow>& rows);

}  // namespace unitmod::f64_bridge
