#pragma once

// Spatial operations on [N,C,D,H,W] tensors: convolution, pooling, resizing,
// Gaussian and box filtering, finite differences and trilinear warping.
// Parallel loops are arranged so each output element is written by exactly one
// thread with a fixed inner summation order (bit-stable results).

#include "daffnet/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace daffnet {

namespace detail {

inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d: cross-correlation, cubic kernel [Cout,Cin,k,k,k], zero padding.

template <class T>
TensorT<T> conv3d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>& bias,
                  int stride = 1, int padding = 0) {
    detail::check_rank5("conv3d", input);
    if (kernel.rank() != 5 || kernel.dim(2) != kernel.dim(3) || kernel.dim(3) != kernel.dim(4))
        throw shape_error("conv3d: kernel must be [Cout,Cin,k,k,k], got " + shape_str(kernel.shape()));
    if (kernel.dim(2) % 2 == 0) throw shape_error("conv3d: kernel size must be odd");
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
        throw shape_error("conv3d: bias must be [Cout]");
    if (input.dim(1) != kernel.dim(1))
        throw shape_error("conv3d: input channels " + std::to_string(input.dim(1)) +
                          " != kernel channels " + std::to_string(kernel.dim(1)));
    if (stride < 1) throw shape_error("conv3d: stride must be >= 1");

    const std::int64_t N = input.dim(0), Ci = input.dim(1), D = input.dim(2), H = input.dim(3),
                       W = input.dim(4);
    const std::int64_t Co = kernel.dim(0), K = kernel.dim(2);
    const std::int64_t P = padding, S = stride;
    const std::int64_t Do = (D + 2 * P - K) / S + 1, Ho = (H + 2 * P - K) / S + 1,
                       Wo = (W + 2 * P - K) / S + 1;
    if (Do < 1 || Ho < 1 || Wo < 1) throw shape_error("conv3d: output would be empty");

    auto out = detail::make_op<T>("conv3d", {(std::size_t)N, (std::size_t)Co, (std::size_t)Do,
                                             (std::size_t)Ho, (std::size_t)Wo},
                                  {input.node(), kernel.node(), bias.node()});
    const T* in = input.node()->data.data();
    const T* wt = kernel.node()->data.data();
    const T* bs = bias.node()->data.data();
    T* ov = out->data.data();

    const std::int64_t in_c = D * H * W, in_z = H * W;
    const std::int64_t out_c = Do * Ho * Wo, out_z = Ho * Wo;
    const std::int64_t wt_co = Ci * K * K * K, wt_ci = K * K * K;

    for (std::int64_t n = 0; n < N; ++n) {
#pragma omp parallel for collapse(2) schedule(static)
        for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t zo = 0; zo < Do; ++zo) {
                T* oplane = ov + ((n * Co + co) * Do + zo) * out_z;
                std::fill(oplane, oplane + out_z, bs[co]);
                for (std::int64_t ci = 0; ci < Ci; ++ci)
                    for (std::int64_t kz = 0; kz < K; ++kz) {
                        const std::int64_t zi = zo * S + kz - P;
                        if (zi < 0 || zi >= D) continue;
                        for (std::int64_t ky = 0; ky < K; ++ky)
                            for (std::int64_t yo = 0; yo < Ho; ++yo) {
                                const std::int64_t yi = yo * S + ky - P;
                                if (yi < 0 || yi >= H) continue;
                                const T* irow = in + (n * Ci + ci) * in_c + zi * in_z + yi * W;
                                T* orow = oplane + yo * Wo;
                                const T* wrow = wt + co * wt_co + ci * wt_ci + (kz * K + ky) * K;
                                if (S == 1) {
                                    for (std::int64_t kx = 0; kx < K; ++kx) {
                                        const T w = wrow[kx];
                                        const std::int64_t x0 = std::max<std::int64_t>(0, P - kx);
                                        const std::int64_t x1 =
                                            std::min<std::int64_t>(Wo, W + P - kx);
                                        const T* ip = irow + x0 + kx - P;
                                        for (std::int64_t x = x0; x < x1; ++x)
                                            orow[x] += w * ip[x - x0];
                                    }
                                } else {
                                    for (std::int64_t xo = 0; xo < Wo; ++xo)
                                        for (std::int64_t kx = 0; kx < K; ++kx) {
                                            const std::int64_t xi = xo * S + kx - P;
                                            if (xi < 0 || xi >= W) continue;
                                            orow[xo] += wrow[kx] * irow[xi];
                                        }
                                }
                            }
                    }
            }
    }

    if (out->requires_grad) {
        auto *pi = input.node().get(), *pk = kernel.node().get(), *pb = bias.node().get(),
             *po = out.get();
        out->backward_fn = [pi, pk, pb, po, N, Ci, Co, D, H, W, Do, Ho, Wo, K, P, S, in_c, in_z,
                            out_c, out_z, wt_co, wt_ci]() {
            const T* g = po->grad.data();
            if (pi->requires_grad) {
                pi->ensure_grad();
                T* gi = pi->grad.data();
                const T* wt2 = pk->data.data();
                for (std::int64_t n = 0; n < N; ++n) {
#pragma omp parallel for collapse(2) schedule(static)
                    for (std::int64_t ci = 0; ci < Ci; ++ci)
                        for (std::int64_t zi = 0; zi < D; ++zi) {
                            T* gplane = gi + (n * Ci + ci) * in_c + zi * in_z;
                            for (std::int64_t co = 0; co < Co; ++co)
                                for (std::int64_t kz = 0; kz < K; ++kz) {
                                    const std::int64_t zn = zi + P - kz;
                                    if (S == 1) {
                                        const std::int64_t zo = zn;
                                        if (zo < 0 || zo >= Do) continue;
                                        for (std::int64_t ky = 0; ky < K; ++ky)
                                            for (std::int64_t yi = 0; yi < H; ++yi) {
                                                const std::int64_t yo = yi + P - ky;
                                                if (yo < 0 || yo >= Ho) continue;
                                                const T* grow =
                                                    g + (n * Co + co) * out_c + zo * out_z + yo * Wo;
                                                T* grow_i = gplane + yi * W;
                                                const T* wrow =
                                                    wt2 + co * wt_co + ci * wt_ci + (kz * K + ky) * K;
                                                for (std::int64_t kx = 0; kx < K; ++kx) {
                                                    const T w = wrow[kx];
                                                    const std::int64_t x0 =
                                                        std::max<std::int64_t>(0, kx - P);
                                                    const std::int64_t x1 = std::min<std::int64_t>(
                                                        W, Wo + kx - P);
                                                    const T* gp = grow + x0 + P - kx;
                                                    for (std::int64_t x = x0; x < x1; ++x)
                                                        grow_i[x] += w * gp[x - x0];
                                                }
                                            }
                                    } else {
                                        if (zn < 0 || zn % S != 0) continue;
                                        const std::int64_t zo = zn / S;
                                        if (zo >= Do) continue;
                                        for (std::int64_t ky = 0; ky < K; ++ky)
                                            for (std::int64_t yi = 0; yi < H; ++yi) {
                                                const std::int64_t yn = yi + P - ky;
                                                if (yn < 0 || yn % S != 0) continue;
                                                const std::int64_t yo = yn / S;
                                                if (yo >= Ho) continue;
                                                for (std::int64_t xi = 0; xi < W; ++xi)
                                                    for (std::int64_t kx = 0; kx < K; ++kx) {
                                                        const std::int64_t xn = xi + P - kx;
                                                        if (xn < 0 || xn % S != 0) continue;
                                                        const std::int64_t xo = xn / S;
                                                        if (xo >= Wo) continue;
                                                        gplane[yi * W + xi] +=
                                                            pk->data[co * wt_co + ci * wt_ci +
                                                                     (kz * K + ky) * K + kx] *
                                                            g[(n * Co + co) * out_c + zo * out_z +
                                                              yo * Wo + xo];
                                                    }
                                            }
                                    }
                                }
                        }
                }
            }
            if (pk->requires_grad) {
                pk->ensure_grad();
                T* gw = pk->grad.data();
                const T* in2 = pi->data.data();
                const std::int64_t nk = Co * Ci * K * K * K;
#pragma omp parallel for schedule(static)
                for (std::int64_t flat = 0; flat < nk; ++flat) {
                    const std::int64_t co = flat / wt_co;
                    const std::int64_t r0 = flat % wt_co;
                    const std::int64_t ci = r0 / wt_ci;
                    const std::int64_t r1 = r0 % wt_ci;
                    const std::int64_t kz = r1 / (K * K);
                    const std::int64_t ky = (r1 / K) % K;
                    const std::int64_t kx = r1 % K;
                    T acc = T(0);
                    for (std::int64_t n = 0; n < N; ++n)
                        for (std::int64_t zo = 0; zo < Do; ++zo) {
                            const std::int64_t zi = zo * S + kz - P;
                            if (zi < 0 || zi >= D) continue;
                            for (std::int64_t yo = 0; yo < Ho; ++yo) {
                                const std::int64_t yi = yo * S + ky - P;
                                if (yi < 0 || yi >= H) continue;
                                const T* grow = g + (n * Co + co) * out_c + zo * out_z + yo * Wo;
                                const T* irow = in2 + (n * Ci + ci) * in_c + zi * in_z + yi * W;
                                if (S == 1) {
                                    const std::int64_t x0 = std::max<std::int64_t>(0, P - kx);
                                    const std::int64_t x1 = std::min<std::int64_t>(Wo, W + P - kx);
                                    const T* ip = irow + x0 + kx - P;
                                    for (std::int64_t x = x0; x < x1; ++x)
                                        acc += grow[x] * ip[x - x0];
                                } else {
                                    for (std::int64_t xo = 0; xo < Wo; ++xo) {
                                        const std::int64_t xi = xo * S + kx - P;
                                        if (xi < 0 || xi >= W) continue;
                                        acc += grow[xo] * irow[xi];
                                    }
                                }
                            }
                        }
                    gw[flat] += acc;
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t co = 0; co < Co; ++co) {
                    T acc = T(0);
                    for (std::int64_t n = 0; n < N; ++n) {
                        const T* gp = g + (n * Co + co) * out_c;
                        for (std::int64_t j = 0; j < out_c; ++j) acc += gp[j];
                    }
                    pb->grad[co] += acc;
                }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// pooling

template <class T>
TensorT<T> pool3d(const TensorT<T>& input, PoolKind kind, int window, int stride) {
    detail::check_rank5("pool3d", input);
    if (window < 1 || stride < 1) throw shape_error("pool3d: window/stride must be >= 1");
    const std::int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3),
                       W = input.dim(4);
    if ((D - window) % stride || (H - window) % stride || (W - window) % stride)
        throw shape_error("pool3d: spatial dims not divisible by stride for window " +
                          std::to_string(window));
    const std::int64_t Do = (D - window) / stride + 1, Ho = (H - window) / stride + 1,
                       Wo = (W - window) / stride + 1;
    auto out = detail::make_op<T>("pool3d", {(std::size_t)N, (std::size_t)C, (std::size_t)Do,
                                             (std::size_t)Ho, (std::size_t)Wo},
                                  {input.node()});
    const T* in = input.node()->data.data();
    const std::int64_t in_z = H * W, out_z = Ho * Wo;
    const T inv = T(1) / static_cast<T>(window * window * window);

    auto argmax = std::make_shared<std::vector<std::int64_t>>();
    if (kind == PoolKind::max) argmax->resize(out->data.size());

    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* ip = in + nc * D * in_z;
        T* op = out->data.data() + nc * Do * out_z;
        for (std::int64_t zo = 0; zo < Do; ++zo)
            for (std::int64_t yo = 0; yo < Ho; ++yo)
                for (std::int64_t xo = 0; xo < Wo; ++xo) {
                    const std::int64_t z0 = zo * stride, y0 = yo * stride, x0 = xo * stride;
                    if (kind == PoolKind::average) {
                        T acc = T(0);
                        for (std::int64_t dz = 0; dz < window; ++dz)
                            for (std::int64_t dy = 0; dy < window; ++dy)
                                for (std::int64_t dx = 0; dx < window; ++dx)
                                    acc += ip[(z0 + dz) * in_z + (y0 + dy) * W + x0 + dx];
                        op[zo * out_z + yo * Wo + xo] = acc * inv;
                    } else {
                        T best = ip[z0 * in_z + y0 * W + x0];
                        std::int64_t bi = z0 * in_z + y0 * W + x0;
                        for (std::int64_t dz = 0; dz < window; ++dz)
                            for (std::int64_t dy = 0; dy < window; ++dy)
                                for (std::int64_t dx = 0; dx < window; ++dx) {
                                    const std::int64_t idx =
                                        (z0 + dz) * in_z + (y0 + dy) * W + x0 + dx;
                                    if (ip[idx] > best) {
                                        best = ip[idx];
                                        bi = idx;
                                    }
                                }
                        op[zo * out_z + yo * Wo + xo] = best;
                        (*argmax)[nc * Do * out_z + zo * out_z + yo * Wo + xo] = nc * D * in_z + bi;
                    }
                }
    }

    if (out->requires_grad) {
        auto *pi = input.node().get(), *po = out.get();
        const std::int64_t w3 = window;
        out->backward_fn = [pi, po, kind, argmax, N, C, Do, Ho, Wo, in_z, out_z, W, w3, inv,
                            stride]() {
            pi->ensure_grad();
            if (kind == PoolKind::max) {
                for (std::size_t i = 0; i < po->grad.size(); ++i)
                    pi->grad[(*argmax)[i]] += po->grad[i];
            } else {
                const std::int64_t D = pi->shape[2];
                for (std::int64_t nc = 0; nc < N * C; ++nc)
                    for (std::int64_t zo = 0; zo < Do; ++zo)
                        for (std::int64_t yo = 0; yo < Ho; ++yo)
                            for (std::int64_t xo = 0; xo < Wo; ++xo) {
                                const T gsp =
                                    po->grad[nc * Do * out_z + zo * out_z + yo * Wo + xo] * inv;
                                for (std::int64_t dz = 0; dz < w3; ++dz)
                                    for (std::int64_t dy = 0; dy < w3; ++dy)
                                        for (std::int64_t dx = 0; dx < w3; ++dx)
                                            pi->grad[nc * D * in_z + (zo * stride + dz) * in_z +
                                                     (yo * stride + dy) * W + xo * stride + dx] +=
                                                gsp;
                            }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// global spatial reduction to [N,C,1,1,1]
template <class T>
TensorT<T> adaptive_pool3d(const TensorT<T>& input, PoolKind kind) {
    detail::check_rank5("adaptive_pool3d", input);
    const std::size_t N = input.dim(0), C = input.dim(1);
    const std::size_t sp = input.dim(2) * input.dim(3) * input.dim(4);
    auto out = detail::make_op<T>("adaptive_pool3d", {N, C, 1, 1, 1}, {input.node()});
    const T* in = input.node()->data.data();
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    if (kind == PoolKind::max) argmax->resize(N * C);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* p = in + nc * sp;
        if (kind == PoolKind::average) {
            T acc = T(0);
            for (std::size_t j = 0; j < sp; ++j) acc += p[j];
            out->data[nc] = acc / static_cast<T>(sp);
        } else {
            T best = p[0];
            std::size_t bi = 0;
            for (std::size_t j = 1; j < sp; ++j)
                if (p[j] > best) {
                    best = p[j];
                    bi = j;
                }
            out->data[nc] = best;
            (*argmax)[nc] = nc * sp + bi;
        }
    }
    if (out->requires_grad) {
        auto *pi = input.node().get(), *po = out.get();
        out->backward_fn = [pi, po, kind, argmax, sp]() {
            pi->ensure_grad();
            if (kind == PoolKind::max) {
                for (std::size_t nc = 0; nc < po->grad.size(); ++nc)
                    pi->grad[(*argmax)[nc]] += po->grad[nc];
            } else {
                const T inv = T(1) / static_cast<T>(sp);
                for (std::size_t nc = 0; nc < po->grad.size(); ++nc) {
                    const T g = po->grad[nc] * inv;
                    for (std::size_t j = 0; j < sp; ++j) pi->grad[nc * sp + j] += g;
                }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// per-voxel reduction across channels to [N,1,D,H,W]
template <class T>
TensorT<T> channel_reduce(const TensorT<T>& input, PoolKind kind) {
    detail::check_rank5("channel_reduce", input);
    const std::size_t N = input.dim(0), C = input.dim(1);
    const std::size_t sp = input.dim(2) * input.dim(3) * input.dim(4);
    Shape os = input.shape();
    os[1] = 1;
    auto out = detail::make_op<T>("channel_reduce", os, {input.node()});
    const T* in = input.node()->data.data();
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    if (kind == PoolKind::max) argmax->resize(N * sp);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < sp; ++j) {
            if (kind == PoolKind::average) {
                T acc = T(0);
                for (std::size_t c = 0; c < C; ++c) acc += in[(n * C + c) * sp + j];
                out->data[n * sp + j] = acc / static_cast<T>(C);
            } else {
                T best = in[n * C * sp + j];
                std::size_t bc = 0;
                for (std::size_t c = 1; c < C; ++c)
                    if (in[(n * C + c) * sp + j] > best) {
                        best = in[(n * C + c) * sp + j];
                        bc = c;
                    }
                out->data[n * sp + j] = best;
                (*argmax)[n * sp + j] = (n * C + bc) * sp + j;
            }
        }
    if (out->requires_grad) {
        auto *pi = input.node().get(), *po = out.get();
        out->backward_fn = [pi, po, kind, argmax, N, C, sp]() {
            pi->ensure_grad();
            if (kind == PoolKind::max) {
                for (std::size_t i = 0; i < po->grad.size(); ++i)
                    pi->grad[(*argmax)[i]] += po->grad[i];
            } else {
                const T inv = T(1) / static_cast<T>(C);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t j = 0; j < sp; ++j) {
                        const T g = po->grad[n * sp + j] * inv;
                        for (std::size_t c = 0; c < C; ++c) pi->grad[(n * C + c) * sp + j] += g;
                    }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// x[N,C,D,H,W] * m[N,1,D,H,W], broadcasting the map across channels
template <class T>
TensorT<T> mul_map(const TensorT<T>& x, const TensorT<T>& m) {
    detail::check_rank5("mul_map", x);
    detail::check_rank5("mul_map", m);
    if (m.dim(1) != 1 || m.dim(0) != x.dim(0) || m.dim(2) != x.dim(2) || m.dim(3) != x.dim(3) ||
        m.dim(4) != x.dim(4))
        throw shape_error("mul_map: map must be [N,1,spatial] matching x");
    const std::size_t N = x.dim(0), C = x.dim(1), sp = x.dim(2) * x.dim(3) * x.dim(4);
    auto out = detail::make_op<T>("mul_map", x.shape(), {x.node(), m.node()});
    const T* xv = x.node()->data.data();
    const T* mv = m.node()->data.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t j = 0; j < sp; ++j)
                out->data[(n * C + c) * sp + j] = xv[(n * C + c) * sp + j] * mv[n * sp + j];
    if (out->requires_grad) {
        auto *px = x.node().get(), *pm = m.node().get(), *po = out.get();
        out->backward_fn = [px, pm, po, N, C, sp]() {
            const auto& g = po->grad;
            if (px->requires_grad) {
                px->ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t j = 0; j < sp; ++j)
                            px->grad[(n * C + c) * sp + j] +=
                                g[(n * C + c) * sp + j] * pm->data[n * sp + j];
            }
            if (pm->requires_grad) {
                pm->ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t j = 0; j < sp; ++j) {
                        T acc = T(0);
                        for (std::size_t c = 0; c < C; ++c)
                            acc += g[(n * C + c) * sp + j] * px->data[(n * C + c) * sp + j];
                        pm->grad[n * sp + j] += acc;
                    }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// trilinear resize (align-corners-false, border clamped): scale 2.0 or 0.5

template <class T>
TensorT<T> trilinear_resize(const TensorT<T>& input, double scale) {
    detail::check_rank5("trilinear_resize", input);
    if (scale != 2.0 && scale != 0.5) throw shape_error("trilinear_resize: scale must be 0.5 or 2.0");
    const std::int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3),
                       W = input.dim(4);
    if (scale == 0.5 && (D % 2 || H % 2 || W % 2))
        throw shape_error("trilinear_resize: dims must be even for scale 0.5");
    const std::int64_t Do = (std::int64_t)std::llround(D * scale),
                       Ho = (std::int64_t)std::llround(H * scale),
                       Wo = (std::int64_t)std::llround(W * scale);
    auto out = detail::make_op<T>("trilinear_resize",
                                  {(std::size_t)N, (std::size_t)C, (std::size_t)Do, (std::size_t)Ho,
                                   (std::size_t)Wo},
                                  {input.node()});

    // src = (dst + 0.5)/scale - 0.5, clamped to [0, S-1]
    auto axis_coords = [scale](std::int64_t So, std::int64_t S) {
        std::vector<std::pair<std::int64_t, T>> c(So);  // (i0, frac)
        for (std::int64_t i = 0; i < So; ++i) {
            double s = (i + 0.5) / scale - 0.5;
            s = std::min(std::max(s, 0.0), double(S - 1));
            std::int64_t i0 = (std::int64_t)std::floor(s);
            if (i0 > S - 2) i0 = std::max<std::int64_t>(0, S - 2);
            double f = s - i0;
            if (S == 1) {
                i0 = 0;
                f = 0.0;
            }
            c[i] = {i0, (T)f};
        }
        return c;
    };
    const auto cz = axis_coords(Do, D), cy = axis_coords(Ho, H), cx = axis_coords(Wo, W);

    const T* in = input.node()->data.data();
    const std::int64_t in_z = H * W, out_z = Ho * Wo;
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* ip = in + nc * D * in_z;
        T* op = out->data.data() + nc * Do * out_z;
        for (std::int64_t z = 0; z < Do; ++z) {
            const auto [z0, fz] = cz[z];
            const std::int64_t z1 = std::min(z0 + 1, D - 1);
            for (std::int64_t y = 0; y < Ho; ++y) {
                const auto [y0, fy] = cy[y];
                const std::int64_t y1 = std::min(y0 + 1, H - 1);
                for (std::int64_t x = 0; x < Wo; ++x) {
                    const auto [x0, fx] = cx[x];
                    const std::int64_t x1 = std::min(x0 + 1, W - 1);
                    const T v000 = ip[z0 * in_z + y0 * W + x0], v001 = ip[z0 * in_z + y0 * W + x1];
                    const T v010 = ip[z0 * in_z + y1 * W + x0], v011 = ip[z0 * in_z + y1 * W + x1];
                    const T v100 = ip[z1 * in_z + y0 * W + x0], v101 = ip[z1 * in_z + y0 * W + x1];
                    const T v110 = ip[z1 * in_z + y1 * W + x0], v111 = ip[z1 * in_z + y1 * W + x1];
                    const T c00 = v000 * (T(1) - fx) + v001 * fx;
                    const T c01 = v010 * (T(1) - fx) + v011 * fx;
                    const T c10 = v100 * (T(1) - fx) + v101 * fx;
                    const T c11 = v110 * (T(1) - fx) + v111 * fx;
                    const T c0 = c00 * (T(1) - fy) + c01 * fy;
                    const T c1 = c10 * (T(1) - fy) + c11 * fy;
                    op[z * out_z + y * Wo + x] = c0 * (T(1) - fz) + c1 * fz;
                }
            }
        }
    }

    if (out->requires_grad) {
        auto *pi = input.node().get(), *po = out.get();
        out->backward_fn = [pi, po, cz, cy, cx, N, C, D, H, W, Do, Ho, Wo, in_z, out_z]() {
            pi->ensure_grad();
            for (std::int64_t nc = 0; nc < N * C; ++nc) {
                T* gp = pi->grad.data() + nc * D * in_z;
                const T* go = po->grad.data() + nc * Do * out_z;
                for (std::int64_t z = 0; z < Do; ++z) {
                    const auto [z0, fz] = cz[z];
                    const std::int64_t z1 = std::min(z0 + 1, D - 1);
                    for (std::int64_t y = 0; y < Ho; ++y) {
                        const auto [y0, fy] = cy[y];
                        const std::int64_t y1 = std::min(y0 + 1, H - 1);
                        for (std::int64_t x = 0; x < Wo; ++x) {
                            const auto [x0, fx] = cx[x];
                            const std::int64_t x1 = std::min(x0 + 1, W - 1);
                            const T g = go[z * out_z + y * Wo + x];
                            gp[z0 * in_z + y0 * W + x0] += g * (T(1) - fz) * (T(1) - fy) * (T(1) - fx);
                            gp[z0 * in_z + y0 * W + x1] += g * (T(1) - fz) * (T(1) - fy) * fx;
                            gp[z0 * in_z + y1 * W + x0] += g * (T(1) - fz) * fy * (T(1) - fx);
                            gp[z0 * in_z + y1 * W + x1] += g * (T(1) - fz) * fy * fx;
                            gp[z1 * in_z + y0 * W + x0] += g * fz * (T(1) - fy) * (T(1) - fx);
                            gp[z1 * in_z + y0 * W + x1] += g * fz * (T(1) - fy) * fx;
                            gp[z1 * in_z + y1 * W + x0] += g * fz * fy * (T(1) - fx);
                            gp[z1 * in_z + y1 * W + x1] += g * fz * fy * fx;
                        }
                    }
                }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// separable Gaussian filter, reflect padding, kernel normalized to sum 1

template <class T>
std::vector<T> gaussian_kernel1d(double sigma, int ksize) {
    if (ksize < 1 || ksize % 2 == 0) throw shape_error("gaussian_filter3d: ksize must be odd");
    if (sigma <= 0) throw shape_error("gaussian_filter3d: sigma must be > 0");
    std::vector<double> k(ksize);
    const int r = ksize / 2;
    double sum = 0;
    for (int i = 0; i < ksize; ++i) {
        k[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
        sum += k[i];
    }
    std::vector<T> out(ksize);
    for (int i = 0; i < ksize; ++i) out[i] = (T)(k[i] / sum);
    return out;
}

namespace detail {

// One separable pass along `axis` (2=D,3=H,4=W). adjoint=true applies the
// transpose (scatter), used by the backward pass.
template <class T>
void filter_axis(const Shape& s, const T* in, T* out, const std::vector<T>& k, int axis,
                 bool adjoint, bool zero_pad, bool accumulate) {
    const std::int64_t N = s[0] * s[1], D = s[2], H = s[3], W = s[4];
    const int r = (int)k.size() / 2;
    const std::int64_t len = axis == 2 ? D : (axis == 3 ? H : W);
    // iterate over all lines along `axis`
    std::int64_t stride, nlines_a, nlines_b, stride_a, stride_b;
    if (axis == 2) {
        stride = H * W;
        nlines_a = H;
        nlines_b = W;
        stride_a = W;
        stride_b = 1;
    } else if (axis == 3) {
        stride = W;
        nlines_a = D;
        nlines_b = W;
        stride_a = H * W;
        stride_b = 1;
    } else {
        stride = 1;
        nlines_a = D;
        nlines_b = H;
        stride_a = H * W;
        stride_b = W;
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t nc = 0; nc < N; ++nc)
        for (std::int64_t a = 0; a < nlines_a; ++a)
            for (std::int64_t b = 0; b < nlines_b; ++b) {
                const std::int64_t base = nc * D * H * W + a * stride_a + b * stride_b;
                if (!adjoint) {
                    for (std::int64_t i = 0; i < len; ++i) {
                        T acc = T(0);
                        for (int t = 0; t < (int)k.size(); ++t) {
                            std::int64_t j = i + t - r;
                            if (zero_pad) {
                                if (j < 0 || j >= len) continue;
                            } else {
                                j = reflect_index(j, len);
                            }
                            acc += k[t] * in[base + j * stride];
                        }
                        if (accumulate)
                            out[base + i * stride] += acc;
                        else
                            out[base + i * stride] = acc;
                    }
                } else {
                    if (!accumulate)
                        for (std::int64_t i = 0; i < len; ++i) out[base + i * stride] = T(0);
                    for (std::int64_t i = 0; i < len; ++i) {
                        const T g = in[base + i * stride];
                        for (int t = 0; t < (int)k.size(); ++t) {
                            std::int64_t j = i + t - r;
                            if (zero_pad) {
                                if (j < 0 || j >= len) continue;
                            } else {
                                j = reflect_index(j, len);
                            }
                            out[base + j * stride] += k[t] * g;
                        }
                    }
                }
            }
}

}  // namespace detail

template <class T>
TensorT<T> gaussian_filter3d(const TensorT<T>& input, double sigma, int ksize) {
    detail::check_rank5("gaussian_filter3d", input);
    const auto k = gaussian_kernel1d<T>(sigma, ksize);
    auto out = detail::make_op<T>("gaussian_filter3d", input.shape(), {input.node()});
    std::vector<T> tmp(input.numel());
    detail::filter_axis<T>(input.shape(), input.node()->data.data(), tmp.data(), k, 2, false, false,
                           false);
    std::vector<T> tmp2(input.numel());
    detail::filter_axis<T>(input.shape(), tmp.data(), tmp2.data(), k, 3, false, false, false);
    detail::filter_axis<T>(input.shape(), tmp2.data(), out->data.data(), k, 4, false, false, false);
    if (out->requires_grad) {
        auto *pi = input.node().get(), *po = out.get();
        out->backward_fn = [pi, po, k]() {
            pi->ensure_grad();
            const Shape& s = po->shape;
            std::vector<T> t1(po->grad.size()), t2(po->grad.size()), t3(po->grad.size());
            detail::filter_axis<T>(s, po->grad.data(), t1.data(), k, 4, true, false, false);
            detail::filter_axis<T>(s, t1.data(), t2.data(), k, 3, true, false, false);
            detail::filter_axis<T>(s, t2.data(), t3.data(), k, 2, true, false, false);
            for (std::size_t i = 0; i < t3.size(); ++i) pi->grad[i] += t3[i];
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// moving-window sum over an n^3 box, zero padding (self-adjoint)
template <class T>
TensorT<T> box_sum3d(const TensorT<T>& input, int window) {
    detail::check_rank5("box_sum3d", input);
    if (window < 1 || window % 2 == 0) throw shape_error("box_sum3d: window must be odd");
    std::vector<T> ones(window, T(1));
    auto out = detail::make_op<T>("box_sum3d", input.shape(), {input.node()});
    std::vector<T> tmp(input.numel()), tmp2(input.numel());
    detail::filter_axis<T>(input.shape(), input.node()->data.data(), tmp.data(), ones, 2, false,
                           true, false);
    detail::filter_axis<T>(input.shape(), tmp.data(), tmp2.data(), ones, 3, false, true, false);
    detail::filter_axis<T>(input.shape(), tmp2.data(), out->data.data(), ones, 4, false, true,
                           false);
    if (out->requires_grad) {
        auto *pi = input.node().get(), *po = out.get();
        out->backward_fn = [pi, po, ones]() {
            pi->ensure_grad();
            const Shape& s = po->shape;
            std::vector<T> t1(po->grad.size()), t2(po->grad.size()), t3(po->grad.size());
            detail::filter_axis<T>(s, po->grad.data(), t1.data(), ones, 2, false, true, false);
            detail::filter_axis<T>(s, t1.data(), t2.data(), ones, 3, false, true, false);
            detail::filter_axis<T>(s, t2.data(), t3.data(), ones, 4, false, true, false);
            for (std::size_t i = 0; i < t3.size(); ++i) pi->grad[i] += t3[i];
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// finite differences along a spatial axis (2=D,3=H,4=W)

// out[i] = x[i+1] - x[i]; output shrinks by one along the axis.
template <class T>
TensorT<T> forward_diff_valid(const TensorT<T>& x, int axis) {
    detail::check_rank5("forward_diff_valid", x);
    if (axis < 2 || axis > 4) throw shape_error("forward_diff_valid: axis must be 2..4");
    if (x.dim(axis) < 2) throw shape_error("forward_diff_valid: axis too short");
    Shape os = x.shape();
    os[axis] -= 1;
    auto out = detail::make_op<T>("forward_diff_valid", os, {x.node()});
    const auto& s = x.shape();
    const std::int64_t D = s[2], H = s[3], W = s[4], NC = s[0] * s[1];
    const std::int64_t step = axis == 2 ? H * W : (axis == 3 ? W : 1);
    const std::int64_t Do = os[2], Ho = os[3], Wo = os[4];
    const T* in = x.node()->data.data();
    for (std::int64_t nc = 0; nc < NC; ++nc)
        for (std::int64_t z = 0; z < Do; ++z)
            for (std::int64_t y = 0; y < Ho; ++y)
                for (std::int64_t xx = 0; xx < Wo; ++xx) {
                    const std::int64_t src = nc * D * H * W + z * H * W + y * W + xx;
                    out->data[nc * Do * Ho * Wo + z * Ho * Wo + y * Wo + xx] =
                        in[src + step] - in[src];
                }
    if (out->requires_grad) {
        auto *pi = x.node().get(), *po = out.get();
        out->backward_fn = [pi, po, NC, D, H, W, Do, Ho, Wo, step]() {
            pi->ensure_grad();
            for (std::int64_t nc = 0; nc < NC; ++nc)
                for (std::int64_t z = 0; z < Do; ++z)
                    for (std::int64_t y = 0; y < Ho; ++y)
                        for (std::int64_t xx = 0; xx < Wo; ++xx) {
                            const T g =
                                po->grad[nc * Do * Ho * Wo + z * Ho * Wo + y * Wo + xx];
                            const std::int64_t src = nc * D * H * W + z * H * W + y * W + xx;
                            pi->grad[src + step] += g;
                            pi->grad[src] -= g;
                        }
        };
    }
    return TensorT<T>(out);
}

// Same-size forward difference; the far border reuses the last interior
// difference (one-sided).
template <class T>
TensorT<T> forward_diff_onesided(const TensorT<T>& x, int axis) {
    detail::check_rank5("forward_diff_onesided", x);
    if (axis < 2 || axis > 4) throw shape_error("forward_diff_onesided: axis must be 2..4");
    if (x.dim(axis) < 2) throw shape_error("forward_diff_onesided: axis too short");
    auto out = detail::make_op<T>("forward_diff_onesided", x.shape(), {x.node()});
    const auto& s = x.shape();
    const std::int64_t D = s[2], H = s[3], W = s[4], NC = s[0] * s[1];
    const std::int64_t step = axis == 2 ? H * W : (axis == 3 ? W : 1);
    const std::int64_t len = s[axis];
    const T* in = x.node()->data.data();
    for (std::int64_t nc = 0; nc < NC; ++nc)
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t xx = 0; xx < W; ++xx) {
                    const std::int64_t pos = axis == 2 ? z : (axis == 3 ? y : xx);
                    const std::int64_t idx = nc * D * H * W + z * H * W + y * W + xx;
                    out->data[idx] = pos + 1 < len ? in[idx + step] - in[idx]
                                                   : in[idx] - in[idx - step];
                }
    if (out->requires_grad) {
        auto *pi = x.node().get(), *po = out.get();
        out->backward_fn = [pi, po, NC, D, H, W, step, len, axis]() {
            pi->ensure_grad();
            for (std::int64_t nc = 0; nc < NC; ++nc)
                for (std::int64_t z = 0; z < D; ++z)
                    for (std::int64_t y = 0; y < H; ++y)
                        for (std::int64_t xx = 0; xx < W; ++xx) {
                            const std::int64_t pos = axis == 2 ? z : (axis == 3 ? y : xx);
                            const std::int64_t idx = nc * D * H * W + z * H * W + y * W + xx;
                            const T g = po->grad[idx];
                            if (pos + 1 < len) {
                                pi->grad[idx + step] += g;
                                pi->grad[idx] -= g;
                            } else {
                                pi->grad[idx] += g;
                                pi->grad[idx - step] -= g;
                            }
                        }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// warp: out(p) = src(p + u(p)), displacement in voxels, border clamped.
// disp is [N,3,D,H,W] with channels (d,h,w). Trilinear is differentiable in
// both arguments; nearest is sampling-only (no gradients).

template <class T>
TensorT<T> warp3d(const TensorT<T>& src, const TensorT<T>& disp, Interp interp) {
    detail::check_rank5("warp3d", src);
    detail::check_rank5("warp3d", disp);
    if (disp.dim(1) != 3) throw shape_error("warp3d: displacement must have 3 channels");
    if (src.dim(0) != disp.dim(0) || src.dim(2) != disp.dim(2) || src.dim(3) != disp.dim(3) ||
        src.dim(4) != disp.dim(4))
        throw shape_error("warp3d: source/field dims mismatch " + shape_str(src.shape()) + " vs " +
                          shape_str(disp.shape()));

    const std::int64_t N = src.dim(0), C = src.dim(1), D = src.dim(2), H = src.dim(3),
                       W = src.dim(4);
    const std::int64_t sp = D * H * W, in_z = H * W;

    std::vector<std::shared_ptr<detail::Node<T>>> parents;
    if (interp == Interp::trilinear) parents = {src.node(), disp.node()};
    auto out = detail::make_op<T>("warp3d", src.shape(), parents);

    const T* sv = src.node()->data.data();
    const T* dv = disp.node()->data.data();
    T* ov = out->data.data();

    for (std::int64_t n = 0; n < N; ++n) {
        const T* ud = dv + (n * 3 + 0) * sp;
        const T* uh = dv + (n * 3 + 1) * sp;
        const T* uw = dv + (n * 3 + 2) * sp;
#pragma omp parallel for schedule(static)
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    const std::int64_t j = z * in_z + y * W + x;
                    T cz = (T)z + ud[j], cy = (T)y + uh[j], cx = (T)x + uw[j];
                    cz = std::min(std::max(cz, T(0)), T(D - 1));
                    cy = std::min(std::max(cy, T(0)), T(H - 1));
                    cx = std::min(std::max(cx, T(0)), T(W - 1));
                    if (interp == Interp::nearest) {
                        const std::int64_t zi = (std::int64_t)std::llround((double)cz);
                        const std::int64_t yi = (std::int64_t)std::llround((double)cy);
                        const std::int64_t xi = (std::int64_t)std::llround((double)cx);
                        for (std::int64_t c = 0; c < C; ++c)
                            ov[(n * C + c) * sp + j] =
                                sv[(n * C + c) * sp + zi * in_z + yi * W + xi];
                    } else {
                        const std::int64_t z0 = std::min((std::int64_t)std::floor((double)cz), D - 1);
                        const std::int64_t y0 = std::min((std::int64_t)std::floor((double)cy), H - 1);
                        const std::int64_t x0 = std::min((std::int64_t)std::floor((double)cx), W - 1);
                        const std::int64_t z1 = std::min(z0 + 1, D - 1);
                        const std::int64_t y1 = std::min(y0 + 1, H - 1);
                        const std::int64_t x1 = std::min(x0 + 1, W - 1);
                        const T fz = cz - (T)z0, fy = cy - (T)y0, fx = cx - (T)x0;
                        for (std::int64_t c = 0; c < C; ++c) {
                            const T* s = sv + (n * C + c) * sp;
                            const T v000 = s[z0 * in_z + y0 * W + x0];
                            const T v001 = s[z0 * in_z + y0 * W + x1];
                            const T v010 = s[z0 * in_z + y1 * W + x0];
                            const T v011 = s[z0 * in_z + y1 * W + x1];
                            const T v100 = s[z1 * in_z + y0 * W + x0];
                            const T v101 = s[z1 * in_z + y0 * W + x1];
                            const T v110 = s[z1 * in_z + y1 * W + x0];
                            const T v111 = s[z1 * in_z + y1 * W + x1];
                            const T c00 = v000 * (T(1) - fx) + v001 * fx;
                            const T c01 = v010 * (T(1) - fx) + v011 * fx;
                            const T c10 = v100 * (T(1) - fx) + v101 * fx;
                            const T c11 = v110 * (T(1) - fx) + v111 * fx;
                            const T c0 = c00 * (T(1) - fy) + c01 * fy;
                            const T c1 = c10 * (T(1) - fy) + c11 * fy;
                            ov[(n * C + c) * sp + j] = c0 * (T(1) - fz) + c1 * fz;
                        }
                    }
                }
    }

    if (out->requires_grad && interp == Interp::trilinear) {
        auto *ps = src.node().get(), *pd = disp.node().get(), *po = out.get();
        out->backward_fn = [ps, pd, po, N, C, D, H, W, sp, in_z]() {
            const T* sv2 = ps->data.data();
            const T* dv2 = pd->data.data();
            const T* g = po->grad.data();
            if (ps->requires_grad) ps->ensure_grad();
            if (pd->requires_grad) pd->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n) {
                const T* ud = dv2 + (n * 3 + 0) * sp;
                const T* uh = dv2 + (n * 3 + 1) * sp;
                const T* uw = dv2 + (n * 3 + 2) * sp;
                // source gradient: sequential scatter (deterministic)
                for (std::int64_t z = 0; z < D; ++z)
                    for (std::int64_t y = 0; y < H; ++y)
                        for (std::int64_t x = 0; x < W; ++x) {
                            const std::int64_t j = z * in_z + y * W + x;
                            T cz = (T)z + ud[j], cy = (T)y + uh[j], cx = (T)x + uw[j];
                            const bool in_z_rng = cz > T(0) && cz < T(D - 1);
                            const bool in_y_rng = cy > T(0) && cy < T(H - 1);
                            const bool in_x_rng = cx > T(0) && cx < T(W - 1);
                            cz = std::min(std::max(cz, T(0)), T(D - 1));
                            cy = std::min(std::max(cy, T(0)), T(H - 1));
                            cx = std::min(std::max(cx, T(0)), T(W - 1));
                            const std::int64_t z0 =
                                std::min((std::int64_t)std::floor((double)cz), D - 1);
                            const std::int64_t y0 =
                                std::min((std::int64_t)std::floor((double)cy), H - 1);
                            const std::int64_t x0 =
                                std::min((std::int64_t)std::floor((double)cx), W - 1);
                            const std::int64_t z1 = std::min(z0 + 1, D - 1);
                            const std::int64_t y1 = std::min(y0 + 1, H - 1);
                            const std::int64_t x1 = std::min(x0 + 1, W - 1);
                            const T fz = cz - (T)z0, fy = cy - (T)y0, fx = cx - (T)x0;
                            T gd = T(0), gh = T(0), gw = T(0);
                            for (std::int64_t c = 0; c < C; ++c) {
                                const T go = g[(n * C + c) * sp + j];
                                if (go == T(0) && !pd->requires_grad) continue;
                                const T* s = sv2 + (n * C + c) * sp;
                                const T v000 = s[z0 * in_z + y0 * W + x0];
                                const T v001 = s[z0 * in_z + y0 * W + x1];
                                const T v010 = s[z0 * in_z + y1 * W + x0];
                                const T v011 = s[z0 * in_z + y1 * W + x1];
                                const T v100 = s[z1 * in_z + y0 * W + x0];
                                const T v101 = s[z1 * in_z + y0 * W + x1];
                                const T v110 = s[z1 * in_z + y1 * W + x0];
                                const T v111 = s[z1 * in_z + y1 * W + x1];
                                if (ps->requires_grad) {
                                    T* gs = ps->grad.data() + (n * C + c) * sp;
                                    gs[z0 * in_z + y0 * W + x0] += go * (T(1) - fz) * (T(1) - fy) * (T(1) - fx);
                                    gs[z0 * in_z + y0 * W + x1] += go * (T(1) - fz) * (T(1) - fy) * fx;
                                    gs[z0 * in_z + y1 * W + x0] += go * (T(1) - fz) * fy * (T(1) - fx);
                                    gs[z0 * in_z + y1 * W + x1] += go * (T(1) - fz) * fy * fx;
                                    gs[z1 * in_z + y0 * W + x0] += go * fz * (T(1) - fy) * (T(1) - fx);
                                    gs[z1 * in_z + y0 * W + x1] += go * fz * (T(1) - fy) * fx;
                                    gs[z1 * in_z + y1 * W + x0] += go * fz * fy * (T(1) - fx);
                                    gs[z1 * in_z + y1 * W + x1] += go * fz * fy * fx;
                                }
                                if (pd->requires_grad) {
                                    // d(value)/d(coordinate) per axis
                                    const T dz = ((v100 * (T(1) - fx) + v101 * fx) -
                                                  (v000 * (T(1) - fx) + v001 * fx)) * (T(1) - fy) +
                                                 ((v110 * (T(1) - fx) + v111 * fx) -
                                                  (v010 * (T(1) - fx) + v011 * fx)) * fy;
                                    const T dy = ((v010 * (T(1) - fx) + v011 * fx) -
                                                  (v000 * (T(1) - fx) + v001 * fx)) * (T(1) - fz) +
                                                 ((v110 * (T(1) - fx) + v111 * fx) -
                                                  (v100 * (T(1) - fx) + v101 * fx)) * fz;
                                    const T dx = ((v001 - v000) * (T(1) - fy) + (v011 - v010) * fy) *
                                                     (T(1) - fz) +
                                                 ((v101 - v100) * (T(1) - fy) + (v111 - v110) * fy) * fz;
                                    gd += go * dz;
                                    gh += go * dy;
                                    gw += go * dx;
                                }
                            }
                            if (pd->requires_grad) {
                                T* gdisp = pd->grad.data();
                                if (in_z_rng) gdisp[(n * 3 + 0) * sp + j] += gd;
                                if (in_y_rng) gdisp[(n * 3 + 1) * sp + j] += gh;
                                if (in_x_rng) gdisp[(n * 3 + 2) * sp + j] += gw;
                            }
                        }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// instance normalization (composite; gradients come from the primitives)

template <class T>
TensorT<T> instance_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                         T eps = T(1e-5)) {
    detail::check_rank5("instance_norm", x);
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(1) ||
        beta.dim(0) != x.dim(1))
        throw shape_error("instance_norm: gamma/beta must be [C]");
    auto mu = spatial_mean(x);
    auto xc = sub(x, broadcast_spatial(mu, x.shape()));
    auto var = spatial_mean(mul(xc, xc));
    auto denom = sqrt_op(add_scalar(var, eps));
    auto xhat = div(xc, broadcast_spatial(denom, x.shape()));
    return add(mul(xhat, broadcast_channel(gamma, x.shape())),
               broadcast_channel(beta, x.shape()));
}

}  // namespace daffnet
