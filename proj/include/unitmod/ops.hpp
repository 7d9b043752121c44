#pragma once

#include <vector>

#include "unitmod/tensor.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace ops {

// Elementwise arithmetic. Operands must have equal shapes, or one of them may
// be a scalar (one element), a per-channel vector [C] (matched against axis 1),
// or a per-image-channel array [N,C] / [N,C,1,1] broadcast over the trailing
// axes of an N×C×... operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, real s);
Tensor mul_scalar(const Tensor& x, real s);
/// s - x
Tensor rsub_scalar(real s, const Tensor& x);
Tensor neg(const Tensor& x);
Tensor square(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
/// max(x, floor). Gradient passes only where x > floor.
Tensor clamp_min(const Tensor& x, real floor);

/// Sum of all elements, shape [1].
Tensor sum(const Tensor& x);
/// Mean of all elements, shape [1].
Tensor mean(const Tensor& x);
/// Spatial mean of an N×C×... tensor, shape [N,C].
Tensor channel_mean(const Tensor& x);

Tensor narrow(const Tensor& x, int axis, int start, int length);
Tensor concat(const std::vector<Tensor>& parts, int axis);

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

/// Cross-correlation with zero padding. `weight` is [Cout, Cin/groups, KH, KW];
/// `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv2dOptions opt);

/// Per-sample, per-group moments recorded by group_norm (biased variance).
struct GroupStats {
    int batch = 0;
    int groups = 0;
    std::vector<real> mean;  // batch × groups
    std::vector<real> var;   // batch × groups
};

/// Group normalization over N×C×... (channels split into `groups` contiguous
/// groups). `gamma`/`beta` are [C].
Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma, const Tensor& beta,
                  real eps = real(1e-5), GroupStats* stats = nullptr);

Tensor upsample_nearest2x(const Tensor& input);

/// Adaptive average pooling to out_h × out_w; bin i spans
/// [floor(i*H/out_h), ceil((i+1)*H/out_h)).
Tensor adaptive_avg_pool2d(const Tensor& input, int out_h, int out_w);

/// x [M,F] times weight [G,F] transposed, plus bias [G] (may be undefined).
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

}  // namespace ops

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return ops::div(a, b); }
inline Tensor operator+(const Tensor& a, real s) { return ops::add_scalar(a, s); }
inline Tensor operator+(real s, const Tensor& a) { return ops::add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, real s) { return ops::add_scalar(a, -s); }
inline Tensor operator-(real s, const Tensor& a) { return ops::rsub_scalar(s, a); }
inline Tensor operator*(const Tensor& a, real s) { return ops::mul_scalar(a, s); }
inline Tensor operator*(real s, const Tensor& a) { return ops::mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return ops::neg(a); }

UNITMOD_END_NAMESPACE
