#ifndef UNITMOD_F64
#error "this file must be compiled with UNITMOD_F64"
#endif

#include "unitmod/gradcheck_f64.hpp"

#include "unitmod/gradcheck.hpp"

namespace unitmod::f64_bridge {

std::vector<GradRow> run_gradcheck(const GradRequest& request) {
    gradcheck::Options opt;
    opt.tolerance = request.tolerance;
    opt.step = request.step;
    std::vector<GradRow> rows;
    for (const auto& r : gradcheck::run_suite(request.module, opt, request.with_fault)) {
        rows.push_back({r.module, r.name, r.max_rel_err, r.tolerance, r.checked, r.refined, r.worst, r.pass});
    }
    return rows;
}

std::string format_rows(const std::vector<GradRow>& rows) {
    std::vector<gradcheck::Result> results;
    for (const auto& r : rows) {
        gradcheck::Result x;
        x.module = r.module;
        x.name = r.name;
        x.max_rel_err = r.max_rel_err;
        x.tolerance = r.tolerance;
        x.checked = r.checked;
        x.refined = r.refined;
        x.worst = r.worst;
        x.pass = r.pass;
        results.push_back(x);
    }
    return gradcheck::format_table(results);
}

}  // namespace unitmod::f64_bridge
