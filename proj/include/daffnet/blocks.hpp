#pragma once

// Reusable network blocks: the two-stage conv block, the flow estimator
// block, global/local attention, and the dual-attention frequency fusion
// module that merges segmentation and registration features per scale.

#include "daffnet/fieldops.hpp"
#include "daffnet/params.hpp"

namespace daffnet {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kGaussSigma = 1.0;
inline constexpr int kGaussKsize = 5;

// plain convolution layer (shape-preserving, odd kernel)
template <class T>
struct ConvLayerT {
    TensorT<T> w, b;
    int pad = 1;
    TensorT<T> forward(const TensorT<T>& x) const { return conv3d(x, w, b, 1, pad); }
};

template <class T>
ConvLayerT<T> make_conv_layer(ParamSetT<T>& ps, const std::string& prefix, int cin, int cout,
                              int k, Rng& rng, bool zero_weights = false, double bias_value = 0.0) {
    ConvLayerT<T> layer;
    Shape ws{(std::size_t)cout, (std::size_t)cin, (std::size_t)k, (std::size_t)k, (std::size_t)k};
    layer.w = ps.add(prefix + ".w",
                     zero_weights ? TensorT<T>::zeros(ws) : normal_init<T>(ws, rng));
    layer.b = ps.add(prefix + ".b", TensorT<T>::full({(std::size_t)cout}, (T)bias_value));
    layer.pad = k / 2;
    return layer;
}

// conv sub-block: 3x3x3 conv -> LeakyReLU(0.2) -> instance norm
template <class T>
struct ConvSubBlockT {
    ConvLayerT<T> conv;
    TensorT<T> gamma, beta;
    TensorT<T> forward(const TensorT<T>& x) const {
        return instance_norm(leaky_relu(conv.forward(x), (T)kLeakySlope), gamma, beta);
    }
};

template <class T>
ConvSubBlockT<T> make_conv_sub_block(ParamSetT<T>& ps, const std::string& prefix, int cin,
                                     int cout, Rng& rng) {
    ConvSubBlockT<T> b;
    b.conv = make_conv_layer(ps, prefix + ".conv", cin, cout, 3, rng);
    b.gamma = ps.add(prefix + ".gamma", TensorT<T>::full({(std::size_t)cout}, T(1)));
    b.beta = ps.add(prefix + ".beta", TensorT<T>::zeros({(std::size_t)cout}));
    return b;
}

// ConvB: two conv sub-blocks, spatial dims preserved
template <class T>
struct ConvBlockT {
    ConvSubBlockT<T> sub1, sub2;
    TensorT<T> forward(const TensorT<T>& x) const { return sub2.forward(sub1.forward(x)); }
};

template <class T>
ConvBlockT<T> make_conv_block(ParamSetT<T>& ps, const std::string& prefix, int cin, int cout,
                              Rng& rng) {
    ConvBlockT<T> b;
    b.sub1 = make_conv_sub_block(ps, prefix + ".sub1", cin, cout, rng);
    b.sub2 = make_conv_sub_block(ps, prefix + ".sub2", cout, cout, rng);
    return b;
}

// concatenate-and-convolve: channel concat -> 3x3x3 conv -> LeakyReLU(0.2)
template <class T>
struct CConvT {
    ConvLayerT<T> conv;
    TensorT<T> forward(const std::vector<TensorT<T>>& xs) const {
        return leaky_relu(conv.forward(concat_channels(xs)), (T)kLeakySlope);
    }
};

template <class T>
CConvT<T> make_cconv(ParamSetT<T>& ps, const std::string& prefix, int cin_total, int cout,
                     Rng& rng) {
    return CConvT<T>{make_conv_layer(ps, prefix, cin_total, cout, 3, rng)};
}

// ---------------------------------------------------------------------------
// flow estimator block: conv sub-block -> parallel mean / log-variance heads
// -> velocity sampling -> scaling-and-squaring integration

template <class T>
struct FEBT {
    ConvSubBlockT<T> sub;
    ConvLayerT<T> mean_head;     // zero-initialized: training starts at identity
    ConvLayerT<T> log_var_head;  // bias -10: near-deterministic velocities early on

    struct Output {
        FieldT<T> mean, log_var, field;
    };

    Output forward(const TensorT<T>& f_fuse, Mode mode, Rng& rng, int integration_steps,
                   int level) const {
        auto h = sub.forward(f_fuse);
        FieldT<T> mu{mean_head.forward(h), level};
        FieldT<T> lv{log_var_head.forward(h), level};
        auto velocity = sample_velocity(mu, lv, mode, rng);
        return {mu, lv, integrate_velocity(velocity, integration_steps)};
    }
};

template <class T>
FEBT<T> make_feb(ParamSetT<T>& ps, const std::string& prefix, int cin, Rng& rng) {
    FEBT<T> f;
    f.sub = make_conv_sub_block(ps, prefix + ".sub", cin, cin, rng);
    f.mean_head = make_conv_layer(ps, prefix + ".mean", cin, 3, 3, rng, /*zero*/ true, 0.0);
    f.log_var_head = make_conv_layer(ps, prefix + ".log_var", cin, 3, 3, rng, false, -10.0);
    return f;
}

// ---------------------------------------------------------------------------
// global attention: pooled descriptors -> MLP -> softmax over the 3 sources

template <class T>
struct GlobalAttentionT {
    TensorT<T> w1, b1, w2, b2;

    struct Output {
        TensorT<T> seg, coupled, prior;  // the three inputs scaled by their weights
        TensorT<T> weights;              // [N,3], sums to 1
    };

    Output forward(const TensorT<T>& seg, const TensorT<T>& coupled,
                   const TensorT<T>& prior) const {
        auto desc_of = [](const TensorT<T>& x) {
            auto avg = adaptive_pool3d(x, PoolKind::average);
            auto mx = adaptive_pool3d(x, PoolKind::max);
            const Shape flat{x.dim(0), x.dim(1)};
            return std::vector<TensorT<T>>{reshape(avg, flat), reshape(mx, flat)};
        };
        std::vector<TensorT<T>> parts;
        for (const auto& x : {seg, coupled, prior})
            for (auto& d : desc_of(x)) parts.push_back(d);
        auto desc = concat_channels(parts);  // [N, 2*(Cs+Cc+Cp)]
        auto hidden = leaky_relu(linear(desc, w1, b1), (T)kLeakySlope);
        auto weights = softmax(linear(hidden, w2, b2), 1);  // [N,3]
        Output o;
        o.seg = scale_by(seg, slice_channels(weights, 0, 1));
        o.coupled = scale_by(coupled, slice_channels(weights, 1, 2));
        o.prior = scale_by(prior, slice_channels(weights, 2, 3));
        o.weights = weights;
        return o;
    }
};

template <class T>
GlobalAttentionT<T> make_global_attention(ParamSetT<T>& ps, const std::string& prefix,
                                          int c_seg, int c_coupled, int c_prior, Rng& rng) {
    const int desc_len = 2 * (c_seg + c_coupled + c_prior);
    const int hidden = desc_len / 2;
    GlobalAttentionT<T> g;
    g.w1 = ps.add(prefix + ".w1",
                  normal_init<T>({(std::size_t)hidden, (std::size_t)desc_len}, rng));
    g.b1 = ps.add(prefix + ".b1", TensorT<T>::zeros({(std::size_t)hidden}));
    g.w2 = ps.add(prefix + ".w2", normal_init<T>({3, (std::size_t)hidden}, rng));
    g.b2 = ps.add(prefix + ".b2", TensorT<T>::zeros({3}));
    return g;
}

// ---------------------------------------------------------------------------
// local attention: channel avg/max maps -> multi-scale convs (k=3,5,7) ->
// 7^3 conv + sigmoid -> spatial importance map applied to the input

template <class T>
struct LocalAttentionT {
    ConvLayerT<T> k3, k5, k7;  // each over the 2-channel pooled map
    ConvLayerT<T> merge7;      // 3 -> 1, sigmoid on top

    TensorT<T> forward(const TensorT<T>& g) const {
        auto pooled = concat_channels<T>(
            {channel_reduce(g, PoolKind::average), channel_reduce(g, PoolKind::max)});
        auto multi = concat_channels<T>(
            {k3.forward(pooled), k5.forward(pooled), k7.forward(pooled)});
        auto map = sigmoid(merge7.forward(multi));  // [N,1,D,H,W] in (0,1)
        return mul_map(g, map);
    }
};

template <class T>
LocalAttentionT<T> make_local_attention(ParamSetT<T>& ps, const std::string& prefix, Rng& rng) {
    LocalAttentionT<T> l;
    l.k3 = make_conv_layer(ps, prefix + ".k3", 2, 1, 3, rng);
    l.k5 = make_conv_layer(ps, prefix + ".k5", 2, 1, 5, rng);
    l.k7 = make_conv_layer(ps, prefix + ".k7", 2, 1, 7, rng);
    l.merge7 = make_conv_layer(ps, prefix + ".merge", 3, 1, 7, rng);
    return l;
}

// ---------------------------------------------------------------------------
// DAFF: dual-attention frequency fusion of segmentation features, coupled
// encoder features and the previous scale's fused features

template <class T>
struct DAFFT {
    CConvT<T> seg_merge;      // (S_m, S_f) -> fusion channels
    CConvT<T> coupled_merge;  // (F_w, F_f) -> fusion channels
    GlobalAttentionT<T> global_att;
    CConvT<T> post_merge;  // weighted (S, F, F_hat) -> fusion channels
    LocalAttentionT<T> local_low, local_high;
    CConvT<T> out_merge;  // (low, high) -> fusion channels

    struct Trace {
        TensorT<T> fused, low, high;
    };

    TensorT<T> forward(const TensorT<T>& f_warped, const TensorT<T>& f_fixed,
                       const TensorT<T>& f_prior, const TensorT<T>& s_moving,
                       const TensorT<T>& s_fixed, Trace* trace = nullptr) const {
        auto seg = seg_merge.forward({s_moving, s_fixed});
        auto coupled = coupled_merge.forward({f_warped, f_fixed});
        auto ga = global_att.forward(seg, coupled, f_prior);
        auto fused = post_merge.forward({ga.seg, ga.coupled, ga.prior});
        auto low = gaussian_filter3d(fused, kGaussSigma, kGaussKsize);
        auto high = sub(fused, low);  // exact split: low + high == fused
        if (trace) *trace = Trace{fused, low, high};
        return out_merge.forward({local_low.forward(low), local_high.forward(high)});
    }
};

template <class T>
DAFFT<T> make_daff(ParamSetT<T>& ps, const std::string& prefix, int c_enc, int c_seg,
                   int c_prior, int c_fusion, Rng& rng) {
    DAFFT<T> d;
    d.seg_merge = make_cconv(ps, prefix + ".seg_merge", 2 * c_seg, c_fusion, rng);
    d.coupled_merge = make_cconv(ps, prefix + ".coupled_merge", 2 * c_enc, c_fusion, rng);
    d.global_att = make_global_attention(ps, prefix + ".global", c_fusion, c_fusion, c_prior, rng);
    d.post_merge = make_cconv(ps, prefix + ".post_merge", 2 * c_fusion + c_prior, c_fusion, rng);
    d.local_low = make_local_attention(ps, prefix + ".local_low", rng);
    d.local_high = make_local_attention(ps, prefix + ".local_high", rng);
    d.out_merge = make_cconv(ps, prefix + ".out_merge", 2 * c_fusion, c_fusion, rng);
    return d;
}

}  // namespace daffnet
