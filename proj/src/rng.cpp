#include "unitmod/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

UNITMOD_BEGIN_NAMESPACE

double Rng::normal() {
    const double u1 = uniform_open_closed();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw IoError("malformed generator state");
}

UNITMOD_END_NAMESPACE
