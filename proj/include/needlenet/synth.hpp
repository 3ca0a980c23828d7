#pragma once

#include "needlenet/episode.hpp"
#include "needlenet/png_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

namespace needlenet {

// The 13 procedural object families. Silhouettes live in unit coordinates
// (roughly radius 1) and are scaled/rotated per instance.
enum class ShapeFamily {
    kDisc,
    kSquare,
    kTriangle,
    kRing,
    kCross,
    kBar,
    kStar,
    kLPiece,
    kTPiece,
    kHexagon,
    kDiamond,
    kCrescent,
    kChevron,
};

struct ObjectClass {
    int id = 0;
    ShapeFamily family = ShapeFamily::kDisc;
    std::string name;
    double hue = 0.0;         // base hue in [0,1)
    double hue_jitter = 0.015;
    double sat_min = 0.75, sat_max = 0.95;
    double val_min = 0.7, val_max = 0.9;
    double depth = 0.45;  // normalized height on the synthetic depth channel
};

inline const std::vector<ObjectClass>& class_table() {
    static const std::vector<ObjectClass> table = [] {
        const char* names[13] = {"disc", "square", "triangle", "ring",    "cross",    "bar",    "star",
                                 "l_piece", "t_piece", "hexagon", "diamond", "crescent", "chevron"};
        std::vector<ObjectClass> t;
        for (int i = 0; i < 13; ++i) {
            ObjectClass c;
            c.id = i;
            c.family = static_cast<ShapeFamily>(i);
            c.name = names[i];
            c.hue = static_cast<double>(i) / 13.0;
            // the ring mirrors the thin object that vanishes on depth data
            c.depth = (c.family == ShapeFamily::kRing) ? 0.02 : 0.35 + 0.04 * (i % 5);
            t.push_back(c);
        }
        return t;
    }();
    return table;
}

// Point-in-silhouette test in unit coordinates. Every family fits inside the
// unit disc so placement can reason with a single bounding radius.
inline bool silhouette_contains(ShapeFamily f, double x, double y) {
    const double r2 = x * x + y * y;
    switch (f) {
        case ShapeFamily::kDisc:
            return r2 <= 1.0;
        case ShapeFamily::kSquare:
            return std::abs(x) <= 0.7 && std::abs(y) <= 0.7;
        case ShapeFamily::kTriangle: {
            // vertices (0,-1), (0.82,0.57), (-0.82,0.57)
            if (y > 0.57 || y < -1.0) return false;
            double half = 0.82 * (y + 1.0) / 1.57;
            return std::abs(x) <= half;
        }
        case ShapeFamily::kRing:
            return r2 <= 1.0 && r2 >= 0.55 * 0.55;
        case ShapeFamily::kCross:
            return (std::abs(x) <= 0.3 && std::abs(y) <= 0.95) || (std::abs(y) <= 0.3 && std::abs(x) <= 0.95);
        case ShapeFamily::kBar:
            return std::abs(x) <= 0.95 && std::abs(y) <= 0.3;
        case ShapeFamily::kStar: {
            double phi = std::atan2(y, x);
            double spike = 0.5 + 0.5 * std::cos(5.0 * phi);
            double rmax = 0.4 + 0.6 * spike;
            return r2 <= rmax * rmax;
        }
        case ShapeFamily::kLPiece:
            return (x >= -0.6 && x <= -0.1 && std::abs(y) <= 0.75) ||
                   (x >= -0.6 && x <= 0.65 && y >= 0.25 && y <= 0.75);
        case ShapeFamily::kTPiece:
            return (std::abs(x) <= 0.65 && y >= -0.75 && y <= -0.31) || (std::abs(x) <= 0.22 && std::abs(y) <= 0.75);
        case ShapeFamily::kHexagon: {
            double q = std::abs(x) * 0.8660254 + std::abs(y) * 0.5;
            return std::max(q, std::abs(y)) <= 0.8660254;
        }
        case ShapeFamily::kDiamond:
            return std::abs(x) + std::abs(y) <= 1.0;
        case ShapeFamily::kCrescent: {
            if (r2 > 1.0) return false;
            double dx = x - 0.55;
            return dx * dx + y * y > 0.85 * 0.85;
        }
        case ShapeFamily::kChevron:
            return std::abs(x) <= 0.8 && std::abs(y - (std::abs(x) * 0.9 - 0.45)) <= 0.28;
    }
    return false;
}

// Generation parameters for one dataset.
struct GenParams {
    int width = 64;
    int height = 64;
    int channels = 3;           // 4 adds the synthetic depth channel
    int objects_min = 2;
    int objects_max = 6;
    double mask_radius_frac = 0.07;  // of image height
    double scale_min_frac = 0.08;    // silhouette radius, of min(h,w)
    double scale_max_frac = 0.11;
    int max_place_retries = 120;
    std::set<int> force_include;  // classes that must appear in the haystack

    double mask_radius_px() const { return mask_radius_frac * height; }

    void validate() const {
        if (width < 16 || height < 16) throw std::invalid_argument("gen: canvas too small");
        if (channels != 1 && channels != 3 && channels != 4)
            throw std::invalid_argument("gen: channels must be 1, 3 or 4, got " + std::to_string(channels));
        if (objects_min < 2) throw std::invalid_argument("gen: haystack needs at least 2 objects");
        if (objects_max < objects_min) throw std::invalid_argument("gen: objects_max < objects_min");
        if (!(mask_radius_frac > 0 && mask_radius_frac < 0.5))
            throw std::invalid_argument("gen: mask_radius_frac out of range");
        if (!(scale_min_frac > 0 && scale_max_frac >= scale_min_frac && scale_max_frac < 0.5))
            throw std::invalid_argument("gen: silhouette scale range invalid");
    }
};

namespace synth_detail {

struct Placed {
    int class_id;
    double cx, cy, scale, rot;
    std::array<std::uint8_t, 3> rgb;
    std::uint8_t depth;
};

inline std::array<std::uint8_t, 3> hsv_to_rgb_u8(double h, double s, double v) {
    h = h - std::floor(h);
    double r = 0, g = 0, b = 0;
    int i = static_cast<int>(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (i % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        case 5: r = v; g = p; b = q; break;
    }
    auto q8 = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
    return {q8(r), q8(g), q8(b)};
}

// Smooth value-noise background with a global brightness jitter, standing in
// for the workbench surface.
inline ImageU8 render_background(const GenParams& p, RandomState& rng) {
    const int grid = 5;
    std::vector<double> knots(static_cast<std::size_t>((grid + 1) * (grid + 1)));
    for (auto& k : knots) k = rng.uniform();
    const double brightness = rng.uniform(0.85, 1.15);

    ImageU8 img;
    img.width = p.width;
    img.height = p.height;
    img.channels = p.channels;
    img.pixels.assign(static_cast<std::size_t>(p.width) * p.height * p.channels, 0);
    const std::uint8_t bg_depth = 25;
    for (int y = 0; y < p.height; ++y) {
        for (int x = 0; x < p.width; ++x) {
            double gx = static_cast<double>(x) / p.width * grid;
            double gy = static_cast<double>(y) / p.height * grid;
            int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
            double fx = gx - ix, fy = gy - iy;
            auto knot = [&](int a, int b) { return knots[static_cast<std::size_t>(b * (grid + 1) + a)]; };
            double v = knot(ix, iy) * (1 - fx) * (1 - fy) + knot(ix + 1, iy) * fx * (1 - fy) +
                       knot(ix, iy + 1) * (1 - fx) * fy + knot(ix + 1, iy + 1) * fx * fy;
            double shade = std::clamp((0.38 + 0.14 * v) * brightness, 0.0, 1.0);
            auto g8 = static_cast<std::uint8_t>(std::lround(shade * 255.0));
            if (p.channels == 1) {
                img.at(y, x, 0) = g8;
            } else {
                img.at(y, x, 0) = g8;
                img.at(y, x, 1) = g8;
                img.at(y, x, 2) = g8;
                if (p.channels == 4) img.at(y, x, 3) = bg_depth;
            }
        }
    }
    return img;
}

inline void render_object(ImageU8& img, const Placed& o) {
    const double c = std::cos(o.rot), s = std::sin(o.rot);
    const int x0 = std::max(0, static_cast<int>(o.cx - o.scale - 1));
    const int x1 = std::min(img.width - 1, static_cast<int>(o.cx + o.scale + 1));
    const int y0 = std::max(0, static_cast<int>(o.cy - o.scale - 1));
    const int y1 = std::min(img.height - 1, static_cast<int>(o.cy + o.scale + 1));
    const ShapeFamily family = class_table()[static_cast<std::size_t>(o.class_id)].family;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double dx = (x - o.cx) / o.scale, dy = (y - o.cy) / o.scale;
            double lx = c * dx + s * dy, ly = -s * dx + c * dy;
            if (!silhouette_contains(family, lx, ly)) continue;
            if (img.channels == 1) {
                img.at(y, x, 0) = o.rgb[0];
            } else {
                img.at(y, x, 0) = o.rgb[0];
                img.at(y, x, 1) = o.rgb[1];
                img.at(y, x, 2) = o.rgb[2];
                if (img.channels == 4) img.at(y, x, 3) = o.depth;
            }
        }
    }
}

template <typename S>
Tensor<S> image_to_tensor(const ImageU8& img) {
    Tensor<S> t(Shape{img.channels, img.height, img.width});
    for (Index ch = 0; ch < img.channels; ++ch)
        for (Index y = 0; y < img.height; ++y)
            for (Index x = 0; x < img.width; ++x)
                t.at(ch, y, x) = static_cast<S>(img.at(static_cast<int>(y), static_cast<int>(x),
                                                       static_cast<int>(ch))) /
                                 S(255);
    return t;
}

template <typename S>
Tensor<S> disc_mask(int h, int w, double cx, double cy, double radius) {
    Tensor<S> m(Shape{1, h, w});
    const double r2 = radius * radius;
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            if (dx * dx + dy * dy <= r2) m.at(0, y, x) = S(1);
        }
    return m;
}

inline Placed place_one(int class_id, const GenParams& p, const std::vector<Placed>& existing, RandomState& rng) {
    const ObjectClass& cls = class_table()[static_cast<std::size_t>(class_id)];
    const double smin = p.scale_min_frac * std::min(p.width, p.height);
    const double smax = p.scale_max_frac * std::min(p.width, p.height);
    const double mask_r = p.mask_radius_px();
    for (int attempt = 0; attempt < p.max_place_retries; ++attempt) {
        Placed o;
        o.class_id = class_id;
        o.scale = rng.uniform(smin, smax);
        o.rot = rng.uniform(0.0, 2.0 * M_PI);
        const double margin = std::max(1.05 * o.scale, mask_r) + 1.0;
        o.cx = rng.uniform(margin, p.width - margin);
        o.cy = rng.uniform(margin, p.height - margin);
        bool ok = true;
        for (const auto& e : existing) {
            double dx = o.cx - e.cx, dy = o.cy - e.cy;
            double need = std::max(2.0 * mask_r, 1.05 * (o.scale + e.scale)) + 1.0;
            if (dx * dx + dy * dy < need * need) { ok = false; break; }
        }
        if (!ok) continue;
        o.rgb = hsv_to_rgb_u8(cls.hue + rng.uniform(-cls.hue_jitter, cls.hue_jitter),
                              rng.uniform(cls.sat_min, cls.sat_max), rng.uniform(cls.val_min, cls.val_max));
        o.depth = static_cast<std::uint8_t>(std::lround(std::clamp(
            25.0 / 255.0 + cls.depth + rng.uniform(-0.02, 0.02) * (cls.depth > 0.1 ? 1.0 : 0.1), 0.0, 1.0) * 255.0));
        return o;
    }
    throw std::runtime_error("generate_episode: could not place an object of class " + std::to_string(class_id) +
                             " after " + std::to_string(p.max_place_retries) + " attempts");
}

}  // namespace synth_detail

// All C(num_classes, holdout) held-out combinations in lexicographic order.
inline std::vector<std::vector<int>> enumerate_holdout_splits(int num_classes, int holdout) {
    if (!(holdout > 0 && holdout < num_classes))
        throw std::invalid_argument("enumerate_holdout_splits: need 0 < holdout < num_classes, got " +
                                    std::to_string(holdout) + " of " + std::to_string(num_classes));
    std::vector<std::vector<int>> out;
    std::vector<int> pick(static_cast<std::size_t>(holdout));
    for (int i = 0; i < holdout; ++i) pick[static_cast<std::size_t>(i)] = i;
    while (true) {
        out.push_back(pick);
        int i = holdout - 1;
        while (i >= 0 && pick[static_cast<std::size_t>(i)] == num_classes - holdout + i) --i;
        if (i < 0) break;
        ++pick[static_cast<std::size_t>(i)];
        for (int j = i + 1; j < holdout; ++j)
            pick[static_cast<std::size_t>(j)] = pick[static_cast<std::size_t>(j - 1)] + 1;
    }
    return out;
}

// Renders one needle/haystack pair. The needle class is drawn uniformly from
// `needle_classes`; haystack distractors come from `distractor_classes`
// (minus the needle class, so the needle object is unique), with
// params.force_include always present.
template <typename S>
EpisodeT<S> generate_episode(const std::set<int>& needle_classes, const std::set<int>& distractor_classes,
                             const GenParams& params, RandomState& rng) {
    params.validate();
    if (needle_classes.empty()) throw std::invalid_argument("generate_episode: empty needle class set");
    if (distractor_classes.empty()) throw std::invalid_argument("generate_episode: empty distractor class set");
    const int table_size = static_cast<int>(class_table().size());
    for (int c : needle_classes)
        if (c < 0 || c >= table_size)
            throw std::invalid_argument("generate_episode: unknown class id " + std::to_string(c));
    for (int c : distractor_classes)
        if (c < 0 || c >= table_size)
            throw std::invalid_argument("generate_episode: unknown class id " + std::to_string(c));

    EpisodeT<S> ep;

    // needle class and scene composition
    std::vector<int> needle_pool(needle_classes.begin(), needle_classes.end());
    ep.needle_class = needle_pool[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(needle_pool.size()) - 1))];

    std::vector<int> scene_classes{ep.needle_class};
    for (int c : params.force_include)
        if (c != ep.needle_class) scene_classes.push_back(c);

    std::vector<int> distractor_pool;
    for (int c : distractor_classes)
        if (c != ep.needle_class) distractor_pool.push_back(c);

    int count = static_cast<int>(rng.uniform_int(params.objects_min, params.objects_max));
    count = std::max(count, static_cast<int>(scene_classes.size()));
    while (static_cast<int>(scene_classes.size()) < count) {
        if (distractor_pool.empty()) break;
        scene_classes.push_back(distractor_pool[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(distractor_pool.size()) - 1))]);
    }
    if (static_cast<int>(scene_classes.size()) < 2)
        throw std::invalid_argument("generate_episode: class sets cannot fill a 2-object haystack");

    // haystack scene
    std::vector<synth_detail::Placed> placed;
    for (int cls : scene_classes) placed.push_back(synth_detail::place_one(cls, params, placed, rng));
    ImageU8 haystack = synth_detail::render_background(params, rng);
    for (const auto& o : placed) synth_detail::render_object(haystack, o);
    ep.haystack_image = synth_detail::image_to_tensor<S>(haystack);
    const double mask_r = params.mask_radius_px();
    for (const auto& o : placed) {
        ObjectInstanceT<S> inst;
        inst.class_id = o.class_id;
        inst.pickup_x = o.cx;
        inst.pickup_y = o.cy;
        inst.mask = synth_detail::disc_mask<S>(params.height, params.width, o.cx, o.cy, mask_r);
        ep.objects.push_back(std::move(inst));
    }

    // needle image: a single instance of the needle class on its own scene
    std::vector<synth_detail::Placed> needle_only;
    needle_only.push_back(synth_detail::place_one(ep.needle_class, params, {}, rng));
    ImageU8 needle_img = synth_detail::render_background(params, rng);
    synth_detail::render_object(needle_img, needle_only[0]);
    ep.needle_image = synth_detail::image_to_tensor<S>(needle_img);
    ep.needle_pickup_x = needle_only[0].cx;
    ep.needle_pickup_y = needle_only[0].cy;
    ep.needle_mask = synth_detail::disc_mask<S>(params.height, params.width, needle_only[0].cx,
                                                needle_only[0].cy, mask_r);
    return ep;
}

// Union of all object masks; the ungated pass trains against this.
template <typename S>
Tensor<S> all_objects_mask(const EpisodeT<S>& ep) {
    if (ep.objects.empty()) throw std::invalid_argument("episode has no objects");
    Tensor<S> m(ep.objects.front().mask.shape());
    for (const auto& o : ep.objects)
        for (Index i = 0; i < m.numel(); ++i)
            if (o.mask.value()[i] != S(0)) m.value()[i] = S(1);
    return m;
}

}  // namespace needlenet
