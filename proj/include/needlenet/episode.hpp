#pragma once

#include "needlenet/tensor.hpp"

#include <cstdint>
#include <vector>

namespace needlenet {

// One labelled object in a haystack scene. The mask is a filled disc of the
// dataset's fixed radius centered on the pickup point, so every object is
// represented by the same number of pixels.
template <typename S>
struct ObjectInstanceT {
    int class_id = 0;
    Tensor<S> mask;  // [1,H,W], values in {0,1}
    double pickup_x = 0.0;
    double pickup_y = 0.0;
};

// A needle/haystack training or evaluation pair.
template <typename S>
struct EpisodeT {
    std::int64_t id = 0;
    std::uint64_t seed = 0;
    Tensor<S> needle_image;   // [C,H,W]
    Tensor<S> needle_mask;    // [1,H,W]
    int needle_class = 0;
    double needle_pickup_x = 0.0;
    double needle_pickup_y = 0.0;
    Tensor<S> haystack_image;  // [C,H,W]
    std::vector<ObjectInstanceT<S>> objects;

    // Mask of the needle-class object within the haystack.
    const Tensor<S>& haystack_needle_mask() const {
        for (const auto& o : objects)
            if (o.class_id == needle_class) return o.mask;
        throw std::logic_error("episode " + std::to_string(id) + ": needle class " +
                               std::to_string(needle_class) + " missing from haystack");
    }
};

using ObjectInstance = ObjectInstanceT<float>;
using Episode = EpisodeT<float>;

}  // namespace needlenet
