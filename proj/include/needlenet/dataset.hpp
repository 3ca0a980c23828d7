#pragma once

#include "needlenet/synth.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace needlenet {

namespace fs = std::filesystem;

// Dataset-level metadata stored next to the episodes.
struct DatasetMeta {
    GenParams params;
    std::set<int> needle_classes;
    std::set<int> distractor_classes;
    std::uint64_t seed = 0;
    std::int64_t num_episodes = 0;
};

namespace dataset_detail {

inline ImageU8 tensor_to_image(const Tensor<float>& t) {
    ImageU8 img;
    img.channels = static_cast<int>(t.dim(0));
    img.height = static_cast<int>(t.dim(1));
    img.width = static_cast<int>(t.dim(2));
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(t.at(c, y, x) * 255.0f));
    return img;
}

inline Tensor<float> image_to_tensor(const ImageU8& img) {
    Tensor<float> t(Shape{img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at(c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
    return t;
}

inline ImageU8 mask_to_image(const Tensor<float>& m) {
    ImageU8 img;
    img.channels = 1;
    img.height = static_cast<int>(m.dim(1));
    img.width = static_cast<int>(m.dim(2));
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) img.at(y, x, 0) = m.at(0, y, x) != 0.0f ? 255 : 0;
    return img;
}

inline Tensor<float> image_to_mask(const ImageU8& img, const std::string& context) {
    if (img.channels != 1) throw std::runtime_error(context + ": mask file is not grayscale");
    Tensor<float> m(Shape{1, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            std::uint8_t v = img.at(y, x, 0);
            if (v != 0 && v != 255) throw std::runtime_error(context + ": mask pixel value " + std::to_string(v));
            m.at(0, y, x) = v == 255 ? 1.0f : 0.0f;
        }
    return m;
}

}  // namespace dataset_detail

// Layout: <dir>/dataset.json plus episodes/<id>/{needle,haystack,needle_mask,mask_<k>}.png
// and a manifest.json per episode. Round trips are bit-exact because the
// generator quantizes all image data to 8 bits.
inline void write_dataset(const std::vector<Episode>& episodes, const std::string& directory,
                          const DatasetMeta& meta) {
    fs::create_directories(fs::path(directory) / "episodes");
    nlohmann::json root;
    root["version"] = 1;
    root["num_episodes"] = episodes.size();
    root["seed"] = meta.seed;
    root["width"] = meta.params.width;
    root["height"] = meta.params.height;
    root["channels"] = meta.params.channels;
    root["objects_min"] = meta.params.objects_min;
    root["objects_max"] = meta.params.objects_max;
    root["mask_radius_frac"] = meta.params.mask_radius_frac;
    root["scale_min_frac"] = meta.params.scale_min_frac;
    root["scale_max_frac"] = meta.params.scale_max_frac;
    root["needle_classes"] = meta.needle_classes;
    root["distractor_classes"] = meta.distractor_classes;
    root["force_include"] = meta.params.force_include;
    {
        std::ofstream out(fs::path(directory) / "dataset.json");
        if (!out) throw std::runtime_error("write_dataset: cannot write to " + directory);
        out << root.dump(2) << "\n";
    }

    for (const auto& ep : episodes) {
        fs::path dir = fs::path(directory) / "episodes" / std::to_string(ep.id);
        fs::create_directories(dir);
        write_png((dir / "needle.png").string(), dataset_detail::tensor_to_image(ep.needle_image));
        write_png((dir / "haystack.png").string(), dataset_detail::tensor_to_image(ep.haystack_image));
        write_png((dir / "needle_mask.png").string(), dataset_detail::mask_to_image(ep.needle_mask));
        nlohmann::json man;
        man["id"] = ep.id;
        man["seed"] = ep.seed;
        man["needle_class"] = ep.needle_class;
        man["needle_pickup"] = {ep.needle_pickup_x, ep.needle_pickup_y};
        nlohmann::json objs = nlohmann::json::array();
        for (std::size_t k = 0; k < ep.objects.size(); ++k) {
            const auto& o = ep.objects[k];
            std::string mask_name = "mask_" + std::to_string(k) + ".png";
            write_png((dir / mask_name).string(), dataset_detail::mask_to_image(o.mask));
            objs.push_back({{"class_id", o.class_id}, {"pickup", {o.pickup_x, o.pickup_y}}, {"mask", mask_name}});
        }
        man["objects"] = objs;
        std::ofstream out(dir / "manifest.json");
        if (!out) throw std::runtime_error("write_dataset: cannot write manifest for episode " + std::to_string(ep.id));
        out << man.dump(2) << "\n";
    }
}

inline DatasetMeta read_dataset_meta(const std::string& directory) {
    std::ifstream in(fs::path(directory) / "dataset.json");
    if (!in) throw std::runtime_error("load_dataset: missing dataset.json in " + directory);
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_dataset: malformed dataset.json in " + directory + ": " + e.what());
    }
    DatasetMeta meta;
    meta.params.width = root.at("width").get<int>();
    meta.params.height = root.at("height").get<int>();
    meta.params.channels = root.at("channels").get<int>();
    meta.params.objects_min = root.at("objects_min").get<int>();
    meta.params.objects_max = root.at("objects_max").get<int>();
    meta.params.mask_radius_frac = root.at("mask_radius_frac").get<double>();
    meta.params.scale_min_frac = root.at("scale_min_frac").get<double>();
    meta.params.scale_max_frac = root.at("scale_max_frac").get<double>();
    meta.params.force_include = root.at("force_include").get<std::set<int>>();
    meta.needle_classes = root.at("needle_classes").get<std::set<int>>();
    meta.distractor_classes = root.at("distractor_classes").get<std::set<int>>();
    meta.seed = root.at("seed").get<std::uint64_t>();
    meta.num_episodes = root.at("num_episodes").get<std::int64_t>();
    return meta;
}

inline Episode load_episode(const std::string& directory, std::int64_t id) {
    fs::path dir = fs::path(directory) / "episodes" / std::to_string(id);
    const std::string ctx = "episode " + std::to_string(id);
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("load_dataset: " + ctx + ": missing manifest.json");
    nlohmann::json man;
    try {
        in >> man;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_dataset: " + ctx + ": malformed manifest: " + e.what());
    }
    Episode ep;
    try {
        ep.id = man.at("id").get<std::int64_t>();
        ep.seed = man.at("seed").get<std::uint64_t>();
        ep.needle_class = man.at("needle_class").get<int>();
        ep.needle_pickup_x = man.at("needle_pickup").at(0).get<double>();
        ep.needle_pickup_y = man.at("needle_pickup").at(1).get<double>();
        ep.needle_image = dataset_detail::image_to_tensor(read_png((dir / "needle.png").string()));
        ep.haystack_image = dataset_detail::image_to_tensor(read_png((dir / "haystack.png").string()));
        ep.needle_mask = dataset_detail::image_to_mask(read_png((dir / "needle_mask.png").string()), ctx);
        for (const auto& jo : man.at("objects")) {
            ObjectInstance o;
            o.class_id = jo.at("class_id").get<int>();
            o.pickup_x = jo.at("pickup").at(0).get<double>();
            o.pickup_y = jo.at("pickup").at(1).get<double>();
            o.mask = dataset_detail::image_to_mask(read_png((dir / jo.at("mask").get<std::string>()).string()), ctx);
            ep.objects.push_back(std::move(o));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_dataset: " + ctx + ": manifest field error: " + e.what());
    } catch (const std::runtime_error& e) {
        throw std::runtime_error("load_dataset: " + ctx + ": " + e.what());
    }
    if (ep.id != id) throw std::runtime_error("load_dataset: " + ctx + ": manifest id says " + std::to_string(ep.id));
    if (ep.objects.empty()) throw std::runtime_error("load_dataset: " + ctx + ": no objects listed");
    return ep;
}

inline std::vector<Episode> load_dataset(const std::string& directory) {
    DatasetMeta meta = read_dataset_meta(directory);
    std::vector<Episode> eps;
    eps.reserve(static_cast<std::size_t>(meta.num_episodes));
    for (std::int64_t id = 0; id < meta.num_episodes; ++id) eps.push_back(load_episode(directory, id));
    return eps;
}

// Renders a full dataset; episode seeds are derived from the dataset seed so
// generation is deterministic and parallelizable per episode.
inline std::vector<Episode> generate_dataset(const std::set<int>& needle_classes,
                                             const std::set<int>& distractor_classes, const GenParams& params,
                                             std::uint64_t seed, std::int64_t count) {
    std::vector<Episode> eps;
    eps.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        const std::uint64_t ep_seed = RandomState::mix({seed, static_cast<std::uint64_t>(i)});
        RandomState rng(ep_seed);
        Episode ep = generate_episode<float>(needle_classes, distractor_classes, params, rng);
        ep.id = i;
        ep.seed = ep_seed;
        eps.push_back(std::move(ep));
    }
    return eps;
}

}  // namespace needlenet
