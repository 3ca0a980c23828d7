#pragma once

#include "needlenet/net.hpp"
#include "needlenet/synth.hpp"

#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

namespace needlenet {

enum class TaskSet { kOnlyIoU, kTasks13, kTasks14 };

inline std::string task_set_name(TaskSet t) {
    switch (t) {
        case TaskSet::kOnlyIoU: return "Only IoU";
        case TaskSet::kTasks13: return "Tasks 1-3";
        case TaskSet::kTasks14: return "Tasks 1-4";
    }
    return "?";
}

inline std::array<bool, 4> task_mask(TaskSet t) {
    switch (t) {
        case TaskSet::kOnlyIoU: return {true, false, false, false};
        case TaskSet::kTasks13: return {true, true, true, false};
        case TaskSet::kTasks14: return {true, true, true, true};
    }
    return {true, false, false, false};
}

// Everything one run needs: data layout, network shape, training protocol.
// Parsed from canonical key=value text; unknown keys are rejected.
struct RunConfig {
    // paths
    std::string dataset_dir = "data/train";
    std::string eval_dataset_dir = "data/eval";
    std::string out_dir = "runs/default";

    // network
    int in_channels = 3;
    int input_h = 64;
    int input_w = 64;
    std::vector<int> stack_filters{8, 16, 16, 24};
    std::vector<int> convs_per_stack{2, 2, 2, 2};
    std::vector<int> decoder_filters;  // empty: mirror the encoder
    double dropout_rate = 0.15;
    double leaky_alpha = 0.02;

    // training protocol
    std::uint64_t seed = 1;
    int batch_size = 6;
    std::uint64_t iterations = 10000;
    std::uint64_t eval_interval = 500;
    double lr = 1e-3;  // desk-scale default; the paper-scale protocol uses 1e-5
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double grad_clip = 0.0;  // 0 disables clipping
    TaskSet tasks = TaskSet::kTasks14;
    bool aux = true;
    bool fixed_batch = false;  // repeat the first batch every iteration
    int threads = 0;           // 0: pick from hardware

    // data generation
    int num_classes = 13;
    std::set<int> holdout{11, 12};
    std::int64_t train_episodes = 600;
    std::int64_t eval_episodes = 200;
    int objects_min = 2;
    int objects_max = 6;
    int eval_objects_min = 4;
    int eval_objects_max = 6;
    double mask_radius_frac = 0.07;
    double scale_min_frac = 0.08;
    double scale_max_frac = 0.11;
    double pickup_threshold = 0.0;  // 0: use the mask radius

    NetworkConfig network_config() const {
        NetworkConfig n;
        n.in_channels = in_channels;
        n.input_h = input_h;
        n.input_w = input_w;
        n.stack_filters = stack_filters;
        n.convs_per_stack = convs_per_stack;
        n.kernel_sizes.assign(stack_filters.size(), 3);
        n.kernel_sizes.back() = 1;
        n.decoder_filters = decoder_filters.empty() ? NetworkConfig::mirrored_decoder(stack_filters) : decoder_filters;
        n.dropout_rate = dropout_rate;
        n.leaky_alpha = leaky_alpha;
        n.seed = seed;
        return n;
    }

    GenParams gen_params(bool eval_set) const {
        GenParams p;
        p.width = input_w;
        p.height = input_h;
        p.channels = in_channels;
        p.objects_min = eval_set ? eval_objects_min : objects_min;
        p.objects_max = eval_set ? eval_objects_max : objects_max;
        p.mask_radius_frac = mask_radius_frac;
        p.scale_min_frac = scale_min_frac;
        p.scale_max_frac = scale_max_frac;
        if (eval_set) p.force_include = holdout;
        return p;
    }

    std::set<int> trained_classes() const {
        std::set<int> s;
        for (int c = 0; c < num_classes; ++c)
            if (!holdout.count(c)) s.insert(c);
        return s;
    }

    std::set<int> all_classes() const {
        std::set<int> s;
        for (int c = 0; c < num_classes; ++c) s.insert(c);
        return s;
    }

    double pickup_threshold_px() const {
        return pickup_threshold > 0.0 ? pickup_threshold : mask_radius_frac * input_h;
    }

    void validate() const {
        network_config().validate();
        if (batch_size < 1) throw std::invalid_argument("config: batch_size must be positive");
        if (eval_interval < 1) throw std::invalid_argument("config: eval_interval must be positive");
        if (iterations % eval_interval != 0)
            throw std::invalid_argument("config: iterations (" + std::to_string(iterations) +
                                        ") must be a multiple of eval_interval (" + std::to_string(eval_interval) + ")");
        if (num_classes < 2 || num_classes > static_cast<int>(class_table().size()))
            throw std::invalid_argument("config: num_classes must be in [2," +
                                        std::to_string(class_table().size()) + "]");
        for (int c : holdout)
            if (c < 0 || c >= num_classes)
                throw std::invalid_argument("config: holdout class " + std::to_string(c) + " outside [0," +
                                            std::to_string(num_classes) + ")");
        if (static_cast<int>(holdout.size()) >= num_classes)
            throw std::invalid_argument("config: holdout covers every class");
        if (train_episodes < 1 || eval_episodes < 1)
            throw std::invalid_argument("config: episode counts must be positive");
        if (!(lr > 0)) throw std::invalid_argument("config: lr must be positive");
        if (grad_clip < 0) throw std::invalid_argument("config: grad_clip must be >= 0");
        if (threads < 0) throw std::invalid_argument("config: threads must be >= 0");
        gen_params(false).validate();
        gen_params(true).validate();
    }
};

namespace config_detail {

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::string join_set(const std::set<int>& v) {
    std::string s;
    for (auto it = v.begin(); it != v.end(); ++it) s += (it == v.begin() ? "" : ",") + std::to_string(*it);
    return s;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stoi(item));
        } catch (...) {
            throw std::invalid_argument("config: bad integer '" + item + "' in " + key);
        }
    }
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace config_detail

inline std::string serialize_config(const RunConfig& c) {
    std::ostringstream out;
    char buf[48];
    auto g17 = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    out << "dataset_dir = " << c.dataset_dir << "\n";
    out << "eval_dataset_dir = " << c.eval_dataset_dir << "\n";
    out << "out_dir = " << c.out_dir << "\n";
    out << "in_channels = " << c.in_channels << "\n";
    out << "input_h = " << c.input_h << "\n";
    out << "input_w = " << c.input_w << "\n";
    out << "stack_filters = " << config_detail::join_ints(c.stack_filters) << "\n";
    out << "convs_per_stack = " << config_detail::join_ints(c.convs_per_stack) << "\n";
    out << "decoder_filters = " << config_detail::join_ints(c.decoder_filters) << "\n";
    out << "dropout_rate = " << g17(c.dropout_rate) << "\n";
    out << "leaky_alpha = " << g17(c.leaky_alpha) << "\n";
    out << "seed = " << c.seed << "\n";
    out << "batch_size = " << c.batch_size << "\n";
    out << "iterations = " << c.iterations << "\n";
    out << "eval_interval = " << c.eval_interval << "\n";
    out << "lr = " << g17(c.lr) << "\n";
    out << "beta1 = " << g17(c.beta1) << "\n";
    out << "beta2 = " << g17(c.beta2) << "\n";
    out << "epsilon = " << g17(c.epsilon) << "\n";
    out << "grad_clip = " << g17(c.grad_clip) << "\n";
    out << "tasks = " << (c.tasks == TaskSet::kOnlyIoU ? "1" : c.tasks == TaskSet::kTasks13 ? "1-3" : "1-4") << "\n";
    out << "aux = " << (c.aux ? "true" : "false") << "\n";
    out << "fixed_batch = " << (c.fixed_batch ? "true" : "false") << "\n";
    out << "threads = " << c.threads << "\n";
    out << "num_classes = " << c.num_classes << "\n";
    out << "holdout = " << config_detail::join_set(c.holdout) << "\n";
    out << "train_episodes = " << c.train_episodes << "\n";
    out << "eval_episodes = " << c.eval_episodes << "\n";
    out << "objects_min = " << c.objects_min << "\n";
    out << "objects_max = " << c.objects_max << "\n";
    out << "eval_objects_min = " << c.eval_objects_min << "\n";
    out << "eval_objects_max = " << c.eval_objects_max << "\n";
    out << "mask_radius_frac = " << g17(c.mask_radius_frac) << "\n";
    out << "scale_min_frac = " << g17(c.scale_min_frac) << "\n";
    out << "scale_max_frac = " << g17(c.scale_max_frac) << "\n";
    out << "pickup_threshold = " << g17(c.pickup_threshold) << "\n";
    return out.str();
}

inline void apply_config_entry(RunConfig& c, const std::string& key, const std::string& value) {
    using config_detail::parse_int_list;
    auto as_bool = [&](const std::string& v) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument("config: bad boolean '" + v + "' for " + key);
    };
    auto as_ll = [&](const std::string& v) {
        try {
            return std::stoll(v);
        } catch (...) {
            throw std::invalid_argument("config: bad integer '" + v + "' for " + key);
        }
    };
    auto as_double = [&](const std::string& v) {
        try {
            return std::stod(v);
        } catch (...) {
            throw std::invalid_argument("config: bad number '" + v + "' for " + key);
        }
    };

    if (key == "dataset_dir") c.dataset_dir = value;
    else if (key == "eval_dataset_dir") c.eval_dataset_dir = value;
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "in_channels") c.in_channels = static_cast<int>(as_ll(value));
    else if (key == "input_h") c.input_h = static_cast<int>(as_ll(value));
    else if (key == "input_w") c.input_w = static_cast<int>(as_ll(value));
    else if (key == "stack_filters") c.stack_filters = parse_int_list(value, key);
    else if (key == "convs_per_stack") c.convs_per_stack = parse_int_list(value, key);
    else if (key == "decoder_filters") c.decoder_filters = parse_int_list(value, key);
    else if (key == "dropout_rate") c.dropout_rate = as_double(value);
    else if (key == "leaky_alpha") c.leaky_alpha = as_double(value);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(as_ll(value));
    else if (key == "batch_size") c.batch_size = static_cast<int>(as_ll(value));
    else if (key == "iterations") c.iterations = static_cast<std::uint64_t>(as_ll(value));
    else if (key == "eval_interval") c.eval_interval = static_cast<std::uint64_t>(as_ll(value));
    else if (key == "lr") c.lr = as_double(value);
    else if (key == "beta1") c.beta1 = as_double(value);
    else if (key == "beta2") c.beta2 = as_double(value);
    else if (key == "epsilon") c.epsilon = as_double(value);
    else if (key == "grad_clip") c.grad_clip = as_double(value);
    else if (key == "tasks") {
        if (value == "1") c.tasks = TaskSet::kOnlyIoU;
        else if (value == "1-3") c.tasks = TaskSet::kTasks13;
        else if (value == "1-4") c.tasks = TaskSet::kTasks14;
        else throw std::invalid_argument("config: tasks must be one of 1, 1-3, 1-4; got '" + value + "'");
    } else if (key == "aux") c.aux = as_bool(value);
    else if (key == "fixed_batch") c.fixed_batch = as_bool(value);
    else if (key == "threads") c.threads = static_cast<int>(as_ll(value));
    else if (key == "num_classes") c.num_classes = static_cast<int>(as_ll(value));
    else if (key == "holdout") {
        c.holdout.clear();
        for (int v : parse_int_list(value, key)) c.holdout.insert(v);
    } else if (key == "train_episodes") c.train_episodes = as_ll(value);
    else if (key == "eval_episodes") c.eval_episodes = as_ll(value);
    else if (key == "objects_min") c.objects_min = static_cast<int>(as_ll(value));
    else if (key == "objects_max") c.objects_max = static_cast<int>(as_ll(value));
    else if (key == "eval_objects_min") c.eval_objects_min = static_cast<int>(as_ll(value));
    else if (key == "eval_objects_max") c.eval_objects_max = static_cast<int>(as_ll(value));
    else if (key == "mask_radius_frac") c.mask_radius_frac = as_double(value);
    else if (key == "scale_min_frac") c.scale_min_frac = as_double(value);
    else if (key == "scale_max_frac") c.scale_max_frac = as_double(value);
    else if (key == "pickup_threshold") c.pickup_threshold = as_double(value);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = config_detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not 'key = value'");
        std::string key = config_detail::trim(t.substr(0, eq));
        std::string value = config_detail::trim(t.substr(eq + 1));
        apply_config_entry(base, key, value);
    }
    return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), std::move(base));
}

}  // namespace needlenet
