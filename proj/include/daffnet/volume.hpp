#pragma once

// Domain value types passed between modules: scalar volumes, integer label
// maps and displacement fields.

#include <array>
#include <cstdint>

#include "daffnet/tensor.hpp"

namespace daffnet {

// 3D scalar grid, intensities in [0,1], stored as a [1,1,D,H,W] tensor.
struct Volume {
    Tensor vox;  // [1,1,D,H,W]
    std::array<float, 3> spacing{1.f, 1.f, 1.f};  // mm per voxel (d,h,w)

    std::size_t d() const { return vox.dim(2); }
    std::size_t h() const { return vox.dim(3); }
    std::size_t w() const { return vox.dim(4); }
};

// 3D integer class grid; 0 = background, 1..num_classes = foreground tissue.
struct LabelMap {
    std::array<std::size_t, 3> dims{0, 0, 0};  // (d,h,w)
    std::vector<std::int32_t> classes;
    int num_classes = 0;  // foreground class count K
    std::array<float, 3> spacing{1.f, 1.f, 1.f};

    std::size_t numel() const { return dims[0] * dims[1] * dims[2]; }
    std::int32_t at(std::size_t z, std::size_t y, std::size_t x) const {
        return classes[(z * dims[1] + y) * dims[2] + x];
    }
};

// Per-voxel displacement grid in voxel units; channel order is axis order
// (d,h,w). `level` is the pyramid level the displacements are expressed in.
template <class T>
struct FieldT {
    TensorT<T> disp;  // [N,3,D,H,W]
    int level = 1;
};

using Field = FieldT<float>;

template <class T>
FieldT<T> zero_field(std::size_t d, std::size_t h, std::size_t w, int level = 1) {
    return FieldT<T>{TensorT<T>::zeros({1, 3, d, h, w}), level};
}

// one-hot encoding of a label map over channels 0..K (background + K classes)
template <class T>
TensorT<T> one_hot(const LabelMap& labels) {
    const std::size_t sp = labels.numel();
    const std::size_t c = (std::size_t)labels.num_classes + 1;
    std::vector<T> data(c * sp, T(0));
    for (std::size_t i = 0; i < sp; ++i) {
        const auto k = labels.classes[i];
        if (k < 0 || (std::size_t)k >= c)
            throw shape_error("one_hot: class id " + std::to_string(k) + " out of range");
        data[(std::size_t)k * sp + i] = T(1);
    }
    return TensorT<T>::from({1, c, labels.dims[0], labels.dims[1], labels.dims[2]},
                            std::move(data));
}

template <class T>
TensorT<T> to_tensor(const Volume& v) {
    if constexpr (std::is_same_v<T, float>) return v.vox;
    std::vector<T> data(v.vox.values().begin(), v.vox.values().end());
    return TensorT<T>::from(v.vox.shape(), std::move(data));
}

}  // namespace daffnet
