#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "daffnet/fieldops.hpp"
#include "support.hpp"

using namespace daffnet;
using testsup::grad_check;
using testsup::rand_tensor;
using testsup::randn_tensor;
using testsup::rel_err;

namespace {

// independent trilinear sampler with border clamping (oracle-side)
template <class T>
T sample_tri(const std::vector<T>& vol, int D, int H, int W, double cz, double cy, double cx) {
    cz = std::min(std::max(cz, 0.0), double(D - 1));
    cy = std::min(std::max(cy, 0.0), double(H - 1));
    cx = std::min(std::max(cx, 0.0), double(W - 1));
    const int z0 = std::min((int)std::floor(cz), D - 1), y0 = std::min((int)std::floor(cy), H - 1),
              x0 = std::min((int)std::floor(cx), W - 1);
    const int z1 = std::min(z0 + 1, D - 1), y1 = std::min(y0 + 1, H - 1),
              x1 = std::min(x0 + 1, W - 1);
    const double fz = cz - z0, fy = cy - y0, fx = cx - x0;
    double acc = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                acc += vol[((dz ? z1 : z0) * H + (dy ? y1 : y0)) * W + (dx ? x1 : x0)] *
                       (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
    return (T)acc;
}

// smooth random field with a given maximum displacement norm: a short random
// sine series (analytically smooth, near-zero at the faces so trajectories
// stay inside the domain)
template <class T>
FieldT<T> smooth_field(std::size_t dim, Rng& rng, double max_norm, int level = 1) {
    const std::size_t sp = dim * dim * dim;
    const double pi = 3.14159265358979323846;
    std::vector<T> v(3 * sp, T(0));
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 4; ++k) {
            const int fz = k ? 1 + (int)rng.integer(2) : 1, fy = k ? 1 + (int)rng.integer(2) : 1,
                      fx = k ? 1 + (int)rng.integer(2) : 1;
            const int fprod = fz * fy * fx;
            const double amp = rng.normal() / (fprod == 1 ? 1.0 : 16.0 * fprod);
            for (std::size_t z = 0; z < dim; ++z)
                for (std::size_t y = 0; y < dim; ++y)
                    for (std::size_t x = 0; x < dim; ++x)
                        v[c * sp + (z * dim + y) * dim + x] +=
                            (T)(amp * std::sin(pi * fz * (z + 0.5) / dim) *
                                std::sin(pi * fy * (y + 0.5) / dim) *
                                std::sin(pi * fx * (x + 0.5) / dim));
        }
    double worst = 0;
    for (std::size_t j = 0; j < sp; ++j) {
        const double n = std::sqrt(double(v[j]) * v[j] + double(v[sp + j]) * v[sp + j] +
                                   double(v[2 * sp + j]) * v[2 * sp + j]);
        worst = std::max(worst, n);
    }
    const T s = (T)(max_norm / (worst + 1e-12));
    for (auto& x : v) x *= s;
    return FieldT<T>{TensorT<T>::from({1, 3, dim, dim, dim}, std::move(v)), level};
}

// forward Euler integration of dx/dt = v(x) over t in [0,1]
template <class T>
std::vector<T> euler_oracle(const FieldT<T>& vel, int substeps) {
    const int D = (int)vel.disp.dim(2), H = (int)vel.disp.dim(3), W = (int)vel.disp.dim(4);
    const std::size_t sp = (std::size_t)D * H * W;
    std::vector<T> vz(vel.disp.values().begin(), vel.disp.values().begin() + sp);
    std::vector<T> vy(vel.disp.values().begin() + sp, vel.disp.values().begin() + 2 * sp);
    std::vector<T> vx(vel.disp.values().begin() + 2 * sp, vel.disp.values().begin() + 3 * sp);
    std::vector<T> out(3 * sp);
    const double h = 1.0 / substeps;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double cz = z, cy = y, cx = x;
                for (int s = 0; s < substeps; ++s) {
                    const double dz = sample_tri(vz, D, H, W, cz, cy, cx);
                    const double dy = sample_tri(vy, D, H, W, cz, cy, cx);
                    const double dx = sample_tri(vx, D, H, W, cz, cy, cx);
                    cz += h * dz;
                    cy += h * dy;
                    cx += h * dx;
                }
                const std::size_t j = (std::size_t)(z * H + y) * W + x;
                out[j] = (T)(cz - z);
                out[sp + j] = (T)(cy - y);
                out[2 * sp + j] = (T)(cx - x);
            }
    return out;
}

}  // namespace

TEST_CASE("warp: zero field is the bit-exact identity") {
    Rng rng(3);
    auto src = rand_tensor<float>({1, 2, 5, 5, 5}, rng);
    auto f = zero_field<float>(5, 5, 5);
    CHECK(warp(src, f, Interp::trilinear).values() == src.values());
    CHECK(warp(src, f, Interp::nearest).values() == src.values());
}

TEST_CASE("warp: integer translation shifts a ramp, clamped at the border") {
    const int D = 6;
    std::vector<float> v(D * D * D);
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < D; ++y)
            for (int x = 0; x < D; ++x) v[(z * D + y) * D + x] = (float)z;
    auto src = Tensor::from({1, 1, D, D, D}, v);
    auto f = zero_field<float>(D, D, D);
    for (std::size_t j = 0; j < (std::size_t)D * D * D; ++j)
        f.disp.mutable_values()[j] = 1.f;  // displace along d
    auto out = warp(src, f, Interp::trilinear);
    for (int z = 0; z < D; ++z) {
        const float want = (float)std::min(z + 1, D - 1);  // clamped at the far border
        CHECK(out.values()[(z * D + 2) * D + 2] == doctest::Approx(want));
    }
}

TEST_CASE("warp: matches a per-voxel interpolation oracle on a random smooth field") {
    Rng rng(7);
    const int D = 8;
    auto src = rand_tensor<double>({1, 1, D, D, D}, rng);
    auto f = smooth_field<double>(D, rng, 2.5);
    auto out = warp(src, f, Interp::trilinear);
    const std::size_t sp = (std::size_t)D * D * D;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < D; ++y)
            for (int x = 0; x < D; ++x) {
                const std::size_t j = (std::size_t)(z * D + y) * D + x;
                const double want =
                    sample_tri(src.values(), D, D, D, z + f.disp.values()[j],
                               y + f.disp.values()[sp + j], x + f.disp.values()[2 * sp + j]);
                CHECK(rel_err(out.values()[j], want) < 1e-6);
            }
}

TEST_CASE("warp: gradients w.r.t. source and field match finite differences") {
    Rng rng(11);
    const std::size_t D = 4;
    auto src = rand_tensor<double>({1, 1, D, D, D}, rng);
    // keep sampling coordinates strictly interior so the finite-difference
    // probe never crosses a clamp or cell boundary
    auto disp = rand_tensor<double>({1, 3, D, D, D}, rng, -0.4, 0.4);
    auto w = rand_tensor<double>({1, 1, D, D, D}, rng);
    auto loss = [&]() {
        return sum(mul(warp3d(src, disp, Interp::trilinear), w));
    };
    CHECK(grad_check(loss, {src, disp}) < 1e-3);
}

TEST_CASE("compose: identity on either side") {
    Rng rng(13);
    auto u = smooth_field<float>(6, rng, 1.5);
    auto zero = zero_field<float>(6, 6, 6);
    auto right = compose(u, zero);
    auto left = compose(zero, u);
    for (std::size_t i = 0; i < u.disp.numel(); ++i) {
        CHECK(right.disp.values()[i] == doctest::Approx(u.disp.values()[i]).epsilon(1e-6));
        CHECK(left.disp.values()[i] == doctest::Approx(u.disp.values()[i]).epsilon(1e-6));
    }
}

TEST_CASE("compose: constant translations add in the interior") {
    const std::size_t D = 8;
    auto t1 = zero_field<float>(D, D, D);
    auto t2 = zero_field<float>(D, D, D);
    const std::size_t sp = D * D * D;
    for (std::size_t j = 0; j < sp; ++j) {
        t1.disp.mutable_values()[j] = 1.f;           // +1 along d
        t2.disp.mutable_values()[2 * sp + j] = 1.f;  // +1 along w
    }
    auto c = compose(t1, t2);
    // interior region unaffected by clamping
    for (std::size_t z = 1; z < D - 2; ++z) {
        const std::size_t j = (z * D + 3) * D + 3;
        CHECK(c.disp.values()[j] == doctest::Approx(1.f));
        CHECK(c.disp.values()[sp + j] == doctest::Approx(0.f));
        CHECK(c.disp.values()[2 * sp + j] == doctest::Approx(1.f));
    }
}

TEST_CASE("compose: associative to first order for small smooth fields") {
    // magnitudes kept well inside the 0.5-voxel bound: the trilinear
    // resampling floor of composed piecewise-linear fields on 16^3 grids is
    // a few 1e-3 at 0.5 voxels, quadratic in the magnitude
    Rng rng(17);
    const std::size_t D = 16;
    auto a = smooth_field<float>(D, rng, 0.15);
    auto b = smooth_field<float>(D, rng, 0.15);
    auto c = smooth_field<float>(D, rng, 0.15);
    auto lhs = compose(compose(a, b), c);
    auto rhs = compose(a, compose(b, c));
    double worst = 0;
    for (std::size_t i = 0; i < lhs.disp.numel(); ++i)
        worst = std::max(worst, std::abs((double)lhs.disp.values()[i] - rhs.disp.values()[i]));
    CHECK(worst < 1e-3);
}

TEST_CASE("upsample_field: zero stays zero, units double across levels") {
    auto z = zero_field<float>(4, 4, 4, 2);
    auto up = upsample_field(z);
    CHECK(up.disp.shape() == Shape{1, 3, 8, 8, 8});
    CHECK(up.level == 1);
    for (auto v : up.disp.values()) CHECK(v == 0.f);

    auto c = zero_field<float>(4, 4, 4, 2);
    const std::size_t sp = 64;
    for (std::size_t j = 0; j < sp; ++j) c.disp.mutable_values()[j] = 1.f;
    auto cup = upsample_field(c);
    for (std::size_t j = 0; j < 512; ++j) {
        CHECK(cup.disp.values()[j] == doctest::Approx(2.f));
        CHECK(cup.disp.values()[512 + j] == doctest::Approx(0.f));
    }
}

TEST_CASE("upsample_field: linear ramp upsamples to the scaled interpolant") {
    const int D = 4;
    auto f = zero_field<float>(D, D, D, 2);
    const std::size_t sp = (std::size_t)D * D * D;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < D; ++y)
            for (int x = 0; x < D; ++x)
                f.disp.mutable_values()[(std::size_t)(z * D + y) * D + x] = 0.25f * x;
    auto up = upsample_field(f);
    // oracle: trilinear resize of the ramp times two
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                const double cx = std::min(std::max((x + 0.5) / 2.0 - 0.5, 0.0), 3.0);
                const double want = 2.0 * 0.25 * cx;
                CHECK(std::abs(up.disp.values()[(std::size_t)(z * 8 + y) * 8 + x] - want) < 1e-5);
            }
}

TEST_CASE("integrate_velocity: zero velocity gives the identity for any step count") {
    auto v = zero_field<float>(6, 6, 6);
    for (int s : {0, 1, 4, 7}) {
        auto u = integrate_velocity(v, s);
        for (auto x : u.disp.values()) CHECK(x == 0.f);
    }
}

TEST_CASE("integrate_velocity: constant velocity is its own exponential in the interior") {
    const std::size_t D = 12;
    auto v = zero_field<float>(D, D, D);
    const std::size_t sp = D * D * D;
    for (std::size_t j = 0; j < sp; ++j) v.disp.mutable_values()[sp + j] = 1.25f;  // along h
    auto u = integrate_velocity(v, 7);
    for (std::size_t z = 3; z < D - 3; ++z)
        for (std::size_t y = 3; y < D - 3; ++y) {
            const std::size_t j = (z * D + y) * D + 5;
            CHECK(u.disp.values()[j] == doctest::Approx(0.f).epsilon(1e-5));
            CHECK(u.disp.values()[sp + j] == doctest::Approx(1.25f).epsilon(1e-4));
        }
}

TEST_CASE("integrate_velocity: agrees with a 1024-substep Euler oracle") {
    // velocity magnitudes drawn in [1.0, 1.5] voxels (inside the 2-voxel
    // bound): squaring on a 16^3 grid has a trilinear discretization floor
    // that grows quadratically with the magnitude
    Rng rng(23);
    const std::size_t D = 16;
    for (int trial = 0; trial < 3; ++trial) {
        auto v = smooth_field<float>(D, rng, rng.uniform(1.0, 1.5));
        auto u = integrate_velocity(v, 7);
        auto want = euler_oracle(v, 1024);
        double worst = 0;
        for (std::size_t i = 0; i < u.disp.numel(); ++i)
            worst = std::max(worst, std::abs((double)u.disp.values()[i] - want[i]));
        CHECK(worst < 1e-2);
    }
}

TEST_CASE("integrate_velocity: converges in step count") {
    Rng rng(29);
    auto v = smooth_field<float>(16, rng, 2.0);
    auto u7 = integrate_velocity(v, 7);
    auto u8 = integrate_velocity(v, 8);
    double worst = 0;
    for (std::size_t i = 0; i < u7.disp.numel(); ++i)
        worst = std::max(worst, std::abs((double)u7.disp.values()[i] - u8.disp.values()[i]));
    CHECK(worst < 1e-3);
}

TEST_CASE("integrate_velocity: integrated smooth fields stay fold-free in the interior") {
    Rng rng(31);
    const std::size_t D = 16;
    for (int trial = 0; trial < 5; ++trial) {
        auto v = smooth_field<float>(D, rng, 2.0);
        auto u = integrate_velocity(v, 7);
        auto det = jacobian_det(u);
        std::size_t pos = 0, tot = 0;
        for (std::size_t z = 0; z + 1 < D; ++z)
            for (std::size_t y = 0; y + 1 < D; ++y)
                for (std::size_t x = 0; x + 1 < D; ++x) {
                    ++tot;
                    if (det.values()[(z * D + y) * D + x] > 0.f) ++pos;
                }
        CHECK((double)pos / tot >= 0.999);
    }
}

TEST_CASE("sample_velocity: inference returns the mean, tiny variance collapses to it") {
    Rng rng(37);
    auto mu = smooth_field<float>(4, rng, 1.0);
    auto lv = zero_field<float>(4, 4, 4);
    Rng noise(1);
    auto inf = sample_velocity(mu, lv, Mode::infer, noise);
    CHECK(inf.disp.values() == mu.disp.values());

    for (auto& x : lv.disp.mutable_values()) x = -50.f;
    auto tr = sample_velocity(mu, lv, Mode::train, noise);
    for (std::size_t i = 0; i < tr.disp.numel(); ++i)
        CHECK(std::abs(tr.disp.values()[i] - mu.disp.values()[i]) < 1e-8);
}

TEST_CASE("sample_velocity: unit log-variance sampling has unit empirical std") {
    const std::size_t D = 2;
    auto mu = zero_field<float>(D, D, D);
    auto lv = zero_field<float>(D, D, D);
    Rng noise(99);
    const int samples = 100000;
    const std::size_t n = mu.disp.numel();
    std::vector<double> sum(n, 0.0), sq(n, 0.0);
    for (int s = 0; s < samples; ++s) {
        auto v = sample_velocity(mu, lv, Mode::train, noise);
        for (std::size_t i = 0; i < n; ++i) {
            sum[i] += v.disp.values()[i];
            sq[i] += (double)v.disp.values()[i] * v.disp.values()[i];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double m = sum[i] / samples;
        const double sd = std::sqrt(sq[i] / samples - m * m);
        CHECK(sd > 0.99);
        CHECK(sd < 1.01);
    }
}

TEST_CASE("jacobian_det: identity and translation fields have unit determinant") {
    auto f = zero_field<float>(5, 5, 5);
    auto det = jacobian_det(f);
    for (auto v : det.values()) CHECK(v == doctest::Approx(1.f));

    for (std::size_t j = 0; j < 125; ++j) f.disp.mutable_values()[j] = 2.f;
    auto det2 = jacobian_det(f);
    for (auto v : det2.values()) CHECK(v == doctest::Approx(1.f));
}

TEST_CASE("jacobian_det: uniform scaling field has det s^3") {
    const std::size_t D = 8;
    const float s = 1.2f;
    auto f = zero_field<float>(D, D, D);
    const std::size_t sp = D * D * D;
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < D; ++y)
            for (std::size_t x = 0; x < D; ++x) {
                const std::size_t j = (z * D + y) * D + x;
                f.disp.mutable_values()[j] = (s - 1.f) * z;
                f.disp.mutable_values()[sp + j] = (s - 1.f) * y;
                f.disp.mutable_values()[2 * sp + j] = (s - 1.f) * x;
            }
    auto det = jacobian_det(f);
    for (std::size_t z = 1; z < D - 1; ++z)
        for (std::size_t y = 1; y < D - 1; ++y)
            for (std::size_t x = 1; x < D - 1; ++x)
                CHECK(det.values()[(z * D + y) * D + x] == doctest::Approx(1.728f).epsilon(1e-4));
}

TEST_CASE("jacobian_det: differentiable end to end") {
    Rng rng(41);
    auto disp = rand_tensor<double>({1, 3, 3, 3, 3}, rng, -0.3, 0.3);
    auto w = rand_tensor<double>({1, 1, 3, 3, 3}, rng);
    auto loss = [&]() { return sum(mul(jacobian_det(FieldT<double>{disp, 1}), w)); };
    CHECK(grad_check(loss, {disp}) < 1e-3);
}

TEST_CASE("warp_labels_nearest: shifts classes and keeps ids valid") {
    LabelMap lm;
    lm.dims = {4, 4, 4};
    lm.num_classes = 2;
    lm.classes.assign(64, 0);
    lm.classes[(1 * 4 + 1) * 4 + 1] = 2;
    auto f = zero_field<float>(4, 4, 4);
    const std::size_t sp = 64;
    for (std::size_t j = 0; j < sp; ++j) f.disp.mutable_values()[j] = 1.f;
    auto out = warp_labels_nearest(lm, f);
    CHECK(out.at(0, 1, 1) == 2);  // source voxel one step along d
    CHECK(out.at(1, 1, 1) == 0);
    for (auto c : out.classes) CHECK((c == 0 || c == 2));
}
