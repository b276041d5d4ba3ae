#pragma once

// Deformation-field geometry: warping, composition, velocity-field
// integration, cross-level upsampling and Jacobian analysis. All displacement
// math is in voxel units of the field's own level; only upsample_field
// converts between levels.

#include "daffnet/ops3d.hpp"
#include "daffnet/rng.hpp"
#include "daffnet/volume.hpp"

namespace daffnet {

enum class Mode { train, infer };

// out(p) = source(p + u(p)); trilinear variant differentiable in both.
template <class T>
TensorT<T> warp(const TensorT<T>& source, const FieldT<T>& field, Interp interp) {
    return warp3d(source, field.disp, interp);
}

// u_out(p) = u_res(p) + u_coarse(p + u_res(p)): apply residual first, then
// the coarse field, matching feature warping by the coarse field before the
// residual is estimated.
template <class T>
FieldT<T> compose(const FieldT<T>& coarse, const FieldT<T>& residual) {
    detail::check_same_shape("compose", coarse.disp, residual.disp);
    auto resampled = warp3d(coarse.disp, residual.disp, Interp::trilinear);
    return FieldT<T>{add(residual.disp, resampled), residual.level};
}

// spatial x2 with displacement values doubled (voxel-unit change of level)
template <class T>
FieldT<T> upsample_field(const FieldT<T>& field) {
    return FieldT<T>{mul_scalar(trilinear_resize(field.disp, 2.0), T(2)), field.level - 1};
}

// scaling and squaring: u <- v / 2^steps, then u <- u o u, `steps` times
template <class T>
FieldT<T> integrate_velocity(const FieldT<T>& velocity, int steps) {
    if (steps < 0) throw shape_error("integrate_velocity: steps must be >= 0");
    FieldT<T> u{mul_scalar(velocity.disp, T(1) / (T)(std::uint64_t(1) << steps)), velocity.level};
    for (int i = 0; i < steps; ++i) u = compose(u, u);
    return u;
}

// train: v = mu + eps .* exp(0.5 * log_var); infer: v = mu
template <class T>
FieldT<T> sample_velocity(const FieldT<T>& mu, const FieldT<T>& log_var, Mode mode, Rng& rng) {
    detail::check_same_shape("sample_velocity", mu.disp, log_var.disp);
    if (mode == Mode::infer) return mu;
    auto eps = TensorT<T>::from(mu.disp.shape(), rng.normal_vec<T>(mu.disp.numel()));
    auto stddev = exp_op(mul_scalar(log_var.disp, T(0.5)));
    return FieldT<T>{add(mu.disp, mul(eps, stddev)), mu.level};
}

// det(I3 + grad u) per voxel, forward differences, one-sided at the far
// border. Differentiable.
template <class T>
TensorT<T> jacobian_det(const FieldT<T>& field) {
    const auto& u = field.disp;
    detail::check_rank5("jacobian_det", u);
    if (u.dim(1) != 3) throw shape_error("jacobian_det: field must have 3 channels");
    if (u.dim(2) < 2 || u.dim(3) < 2 || u.dim(4) < 2)
        throw shape_error("jacobian_det: spatial dims must be >= 2");

    // J[a][b] = d(u_a)/d(axis b) + delta_ab
    std::array<std::array<TensorT<T>, 3>, 3> J;
    for (int a = 0; a < 3; ++a) {
        auto comp = slice_channels(u, a, a + 1);
        for (int b = 0; b < 3; ++b) {
            auto d = forward_diff_onesided(comp, b + 2);
            J[a][b] = a == b ? add_scalar(d, T(1)) : d;
        }
    }
    auto minor = [](const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& c,
                    const TensorT<T>& d) { return sub(mul(a, b), mul(c, d)); };
    auto det = add(sub(mul(J[0][0], minor(J[1][1], J[2][2], J[1][2], J[2][1])),
                       mul(J[0][1], minor(J[1][0], J[2][2], J[1][2], J[2][0]))),
                   mul(J[0][2], minor(J[1][0], J[2][1], J[1][1], J[2][0])));
    return det;  // [N,1,D,H,W]
}

// nearest-neighbor label warping for evaluation and data generation
inline LabelMap warp_labels_nearest(const LabelMap& labels, const Field& field) {
    const auto& u = field.disp;
    if (u.dim(2) != labels.dims[0] || u.dim(3) != labels.dims[1] || u.dim(4) != labels.dims[2])
        throw shape_error("warp_labels_nearest: dims mismatch");
    const std::int64_t D = labels.dims[0], H = labels.dims[1], W = labels.dims[2];
    const std::int64_t sp = D * H * W;
    const float* ud = u.values().data();
    const float* uh = ud + sp;
    const float* uw = uh + sp;
    LabelMap out = labels;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t j = (z * H + y) * W + x;
                const auto clampi = [](std::int64_t v, std::int64_t n) {
                    return std::min(std::max(v, std::int64_t(0)), n - 1);
                };
                const std::int64_t zi = clampi((std::int64_t)std::llround((double)z + ud[j]), D);
                const std::int64_t yi = clampi((std::int64_t)std::llround((double)y + uh[j]), H);
                const std::int64_t xi = clampi((std::int64_t)std::llround((double)x + uw[j]), W);
                out.classes[j] = labels.classes[(zi * H + yi) * W + xi];
            }
    return out;
}

}  // namespace daffnet
