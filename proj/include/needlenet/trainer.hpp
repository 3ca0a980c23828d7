#pragma once

#include "needlenet/aux_weighter.hpp"
#include "needlenet/dataset.hpp"
#include "needlenet/eval.hpp"
#include "needlenet/run_config.hpp"

#include <bit>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <thread>

namespace needlenet {

struct TrainSettings {
    int batch_size = 6;
    std::array<bool, 4> tasks{true, true, true, true};
    bool aux_enabled = true;
    std::optional<std::array<double, 4>> fixed_weights;  // overrides the aux net
    double grad_clip = 0.0;
    int threads = 1;
    std::uint64_t seed = 1;

    static TrainSettings from(const RunConfig& cfg) {
        TrainSettings s;
        s.batch_size = cfg.batch_size;
        s.tasks = task_mask(cfg.tasks);
        s.aux_enabled = cfg.aux;
        s.grad_clip = cfg.grad_clip;
        s.threads = cfg.threads > 0 ? cfg.threads
                                    : std::max(1, std::min<int>(cfg.batch_size,
                                                                static_cast<int>(std::thread::hardware_concurrency())));
        s.seed = cfg.seed;
        return s;
    }
};

struct TrainState {
    SegNet<float> net;
    AuxNet<float> aux;
    AdamState<float> opt_net;
    AdamState<float> opt_aux;
    LossStats stats;
    std::uint64_t iteration = 0;
    std::vector<Tensor<float>> params;  // net parameter handles, declaration order

    static TrainState fresh(const RunConfig& cfg) {
        TrainState st;
        st.net = init_network<float>(cfg.network_config(), RandomState(cfg.seed));
        st.aux = init_aux<float>(RandomState(RandomState::mix({cfg.seed, 0xA0AULL})));
        st.params = st.net.parameters();
        AdamParams hp{cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon};
        st.opt_net = AdamState<float>(st.params, hp);
        auto aux_params = st.aux.parameters();
        st.opt_aux = AdamState<float>(aux_params, hp);  // same optimizer settings as the main net
        return st;
    }
};

inline std::array<double, 4> uniform_weights(const std::array<bool, 4>& tasks) {
    int enabled = 0;
    for (bool t : tasks) enabled += t;
    if (enabled == 0) throw std::invalid_argument("task mask selects an empty loss set");
    std::array<double, 4> w{};
    for (int i = 0; i < 4; ++i)
        if (tasks[static_cast<std::size_t>(i)]) w[static_cast<std::size_t>(i)] = 1.0 / enabled;
    return w;
}

// One full training iteration over a batch: per-episode forward passes and
// task losses, batch loss statistics, weighting, a seeded backward pass, one
// Adam step on the main network, then one on the auxiliary weighter.
//
// Episodes run on independent tapes against cloned parameter handles, so the
// forward and backward phases parallelize across the batch; gradients are
// reduced in episode order, which keeps every result independent of the
// thread count.
inline LossBundle train_iteration(TrainState& state, const std::vector<const Episode*>& batch,
                                  const TrainSettings& settings) {
    if (static_cast<int>(batch.size()) != settings.batch_size)
        throw std::invalid_argument("train_iteration: batch has " + std::to_string(batch.size()) +
                                    " episodes, configured size is " + std::to_string(settings.batch_size));
    const std::size_t b = batch.size();
    const auto& tasks = settings.tasks;

    struct EpisodeWork {
        SegNet<float> replica;
        Tape<float> tape;
        EpisodeForwardResult<float> fwd;
        Tensor<float> l1, l2, l3;
    };
    std::vector<EpisodeWork> work(b);

    auto run_span = [&](auto fn) {
        const int n_threads = std::max(1, std::min<int>(settings.threads, static_cast<int>(b)));
        if (n_threads == 1) {
            for (std::size_t i = 0; i < b; ++i) fn(i);
        } else {
            std::vector<std::thread> pool;
            for (int t = 0; t < n_threads; ++t)
                pool.emplace_back([&, t]() {
                    for (std::size_t i = static_cast<std::size_t>(t); i < b; i += static_cast<std::size_t>(n_threads))
                        fn(i);
                });
            for (auto& th : pool) th.join();
        }
    };

    // forward phase
    run_span([&](std::size_t i) {
        EpisodeWork& wk = work[i];
        const Episode& ep = *batch[i];
        wk.replica = state.net.clone();
        RandomState ep_rng(RandomState::mix({settings.seed, 0xF02ULL, state.iteration, static_cast<std::uint64_t>(i)}));
        EpisodeForwardOptions opts;
        opts.run_task2 = tasks[1];
        opts.run_task3 = tasks[2];
        wk.fwd = wk.replica.episode_forward(&wk.tape, ep, true, ep_rng, opts);
        wk.l1 = losses::soft_iou_loss(&wk.tape, wk.fwd.belief_task1, ep.haystack_needle_mask());
        if (tasks[1]) wk.l2 = losses::soft_iou_loss(&wk.tape, wk.fwd.belief_task2, all_objects_mask(ep));
        if (tasks[2]) wk.l3 = losses::soft_iou_loss(&wk.tape, wk.fwd.belief_task3, ep.needle_mask);
    });

    // batch losses; the spread couples episodes through leaf copies of the
    // needle features so its gradient can be seeded back per episode
    std::array<double, 4> observed{};
    for (std::size_t i = 0; i < b; ++i) {
        observed[0] += work[i].l1.item() / static_cast<double>(b);
        if (tasks[1]) observed[1] += work[i].l2.item() / static_cast<double>(b);
        if (tasks[2]) observed[2] += work[i].l3.item() / static_cast<double>(b);
    }
    Tape<float> spread_tape;
    std::vector<Tensor<float>> feat_leaves;
    Tensor<float> spread_loss;
    if (tasks[3]) {
        std::vector<int> classes;
        for (std::size_t i = 0; i < b; ++i) {
            Tensor<float> leaf(work[i].fwd.needle_features.shape());
            leaf.value() = work[i].fwd.needle_features.value();
            leaf.set_requires_grad(true);
            feat_leaves.push_back(leaf);
            classes.push_back(batch[i]->needle_class);
        }
        spread_loss = losses::vector_spread_loss(&spread_tape, feat_leaves, classes);
        observed[3] = spread_loss.item();
    }

    state.stats = update_stats(state.stats, observed);
    std::array<double, 4> weights;
    if (settings.fixed_weights) weights = *settings.fixed_weights;
    else if (settings.aux_enabled) weights = compute_weights(state.aux, state.stats, tasks);
    else weights = uniform_weights(tasks);

    LossBundle bundle;
    bundle.losses = observed;
    bundle.weights = weights;
    bundle.total = 0.0;
    for (int i = 0; i < 4; ++i)
        bundle.total += weights[static_cast<std::size_t>(i)] * observed[static_cast<std::size_t>(i)];

    // backward phase: seed the weighted loss gradients and replay the tapes
    if (tasks[3]) {
        spread_loss.grad()[0] = static_cast<float>(weights[3]);
        spread_tape.backward_seeded();
    }
    run_span([&](std::size_t i) {
        EpisodeWork& wk = work[i];
        const float inv_b = 1.0f / static_cast<float>(b);
        wk.l1.grad()[0] += static_cast<float>(weights[0]) * inv_b;
        if (tasks[1]) wk.l2.grad()[0] += static_cast<float>(weights[1]) * inv_b;
        if (tasks[2]) wk.l3.grad()[0] += static_cast<float>(weights[2]) * inv_b;
        if (tasks[3] && feat_leaves[i].has_grad()) wk.fwd.needle_features.grad() += feat_leaves[i].grad_view();
        wk.tape.backward_seeded();
    });

    // reduce replica gradients into the master parameters in episode order
    for (auto& p : state.params) p.zero_grad();
    for (std::size_t i = 0; i < b; ++i) {
        auto rep_params = work[i].replica.parameters();
        for (std::size_t k = 0; k < state.params.size(); ++k)
            if (rep_params[k].has_grad()) state.params[k].grad() += rep_params[k].grad_view();
    }
    if (settings.grad_clip > 0.0) clip_gradients(state.params, settings.grad_clip);
    auto res = adam_step(state.params, state.opt_net);
    if (!res.applied) std::fprintf(stderr, "[train] iteration %llu: %s\n",
                                   static_cast<unsigned long long>(state.iteration), res.diagnostic.c_str());

    if (settings.aux_enabled && !settings.fixed_weights) aux_train_step(state.aux, state.stats, bundle, state.opt_aux, tasks);
    ++state.iteration;
    return bundle;
}

// --- checkpoints -------------------------------------------------------------

namespace ckpt_detail {

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

inline void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

inline void write_tensor(std::ostream& out, const Tensor<float>& t) {
    write_u64(out, static_cast<std::uint64_t>(t.rank()));
    for (Index d : t.shape()) write_u64(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
}

inline Tensor<float> read_tensor(std::istream& in) {
    std::uint64_t rank = read_u64(in);
    if (!in || rank > 8) throw std::runtime_error("checkpoint: corrupt tensor header");
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(read_u64(in)));
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor payload");
    return t;
}

inline void write_array(std::ostream& out, const Array<float>& a) {
    write_u64(out, static_cast<std::uint64_t>(a.size()));
    out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * 4));
}

inline Array<float> read_array(std::istream& in) {
    std::uint64_t n = read_u64(in);
    Array<float> a(static_cast<Index>(n));
    in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * 4));
    if (!in) throw std::runtime_error("checkpoint: truncated moment payload");
    return a;
}

inline std::string network_config_text(const NetworkConfig& c) {
    std::ostringstream out;
    out << "in_channels=" << c.in_channels << "\n";
    out << "input_h=" << c.input_h << "\n";
    out << "input_w=" << c.input_w << "\n";
    out << "stack_filters=" << config_detail::join_ints(c.stack_filters) << "\n";
    out << "convs_per_stack=" << config_detail::join_ints(c.convs_per_stack) << "\n";
    out << "kernel_sizes=" << config_detail::join_ints(c.kernel_sizes) << "\n";
    out << "decoder_filters=" << config_detail::join_ints(c.decoder_filters) << "\n";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", c.dropout_rate);
    out << "dropout_rate=" << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", c.leaky_alpha);
    out << "leaky_alpha=" << buf << "\n";
    return out.str();
}

}  // namespace ckpt_detail

constexpr char kCheckpointMagic[8] = {'N', 'N', 'E', 'T', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const std::string& path, const TrainState& state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    out.write(kCheckpointMagic, 8);
    std::string cfg = ckpt_detail::network_config_text(state.net.config);
    ckpt_detail::write_u64(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    ckpt_detail::write_u64(out, state.iteration);

    auto params = state.net.parameters();
    ckpt_detail::write_u64(out, params.size());
    for (const auto& p : params) ckpt_detail::write_tensor(out, p);
    ckpt_detail::write_u64(out, state.opt_net.step_count());
    for (const auto& m : state.opt_net.moments1()) ckpt_detail::write_array(out, m);
    for (const auto& v : state.opt_net.moments2()) ckpt_detail::write_array(out, v);

    auto aux_params = state.aux.parameters();
    for (const auto& p : aux_params) ckpt_detail::write_tensor(out, p);
    ckpt_detail::write_u64(out, state.opt_aux.step_count());
    for (const auto& m : state.opt_aux.moments1()) ckpt_detail::write_array(out, m);
    for (const auto& v : state.opt_aux.moments2()) ckpt_detail::write_array(out, v);

    for (double v : state.stats.current) out.write(reinterpret_cast<const char*>(&v), 8);
    for (double v : state.stats.ema) out.write(reinterpret_cast<const char*>(&v), 8);
    for (double v : state.stats.variance) out.write(reinterpret_cast<const char*>(&v), 8);
    out.write(reinterpret_cast<const char*>(&state.stats.decay), 8);
    char init = state.stats.initialized ? 1 : 0;
    out.write(&init, 1);
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

// Loads a checkpoint against an expected configuration; any differing network
// field is named in the error.
inline TrainState load_checkpoint(const std::string& path, const RunConfig& cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint (bad magic)");
    std::uint64_t cfg_len = ckpt_detail::read_u64(in);
    std::string stored_cfg(cfg_len, '\0');
    in.read(stored_cfg.data(), static_cast<std::streamsize>(cfg_len));
    std::string expected_cfg = ckpt_detail::network_config_text(cfg.network_config());
    if (stored_cfg != expected_cfg) {
        // name the mismatched fields
        std::map<std::string, std::string> a, b;
        auto split = [](const std::string& text, std::map<std::string, std::string>& into) {
            std::istringstream ss(text);
            std::string line;
            while (std::getline(ss, line)) {
                auto eq = line.find('=');
                if (eq != std::string::npos) into[line.substr(0, eq)] = line.substr(eq + 1);
            }
        };
        split(stored_cfg, a);
        split(expected_cfg, b);
        std::string fields;
        for (const auto& [k, v] : b) {
            auto it = a.find(k);
            if (it == a.end() || it->second != v) fields += (fields.empty() ? "" : ", ") + k;
        }
        throw std::runtime_error("load_checkpoint: configuration mismatch in fields: " +
                                 (fields.empty() ? std::string("<extra fields>") : fields));
    }

    TrainState state = TrainState::fresh(cfg);
    state.iteration = ckpt_detail::read_u64(in);
    std::uint64_t n_params = ckpt_detail::read_u64(in);
    if (n_params != state.params.size()) throw std::runtime_error("load_checkpoint: parameter count mismatch");
    for (auto& p : state.params) {
        Tensor<float> t = ckpt_detail::read_tensor(in);
        if (t.shape() != p.shape()) throw std::runtime_error("load_checkpoint: parameter shape mismatch");
        p.value() = t.value();
    }
    state.opt_net.set_step_count(ckpt_detail::read_u64(in));
    for (auto& m : state.opt_net.moments1()) m = ckpt_detail::read_array(in);
    for (auto& v : state.opt_net.moments2()) v = ckpt_detail::read_array(in);

    for (auto& p : state.aux.parameters()) {
        Tensor<float> t = ckpt_detail::read_tensor(in);
        if (t.shape() != p.shape()) throw std::runtime_error("load_checkpoint: aux parameter shape mismatch");
        p.value() = t.value();
    }
    state.opt_aux.set_step_count(ckpt_detail::read_u64(in));
    for (auto& m : state.opt_aux.moments1()) m = ckpt_detail::read_array(in);
    for (auto& v : state.opt_aux.moments2()) v = ckpt_detail::read_array(in);

    for (double& v : state.stats.current) in.read(reinterpret_cast<char*>(&v), 8);
    for (double& v : state.stats.ema) in.read(reinterpret_cast<char*>(&v), 8);
    for (double& v : state.stats.variance) in.read(reinterpret_cast<char*>(&v), 8);
    in.read(reinterpret_cast<char*>(&state.stats.decay), 8);
    char init = 0;
    in.read(&init, 1);
    state.stats.initialized = init != 0;
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return state;
}

// --- the training loop -------------------------------------------------------

struct TrainingArtifacts {
    std::vector<CurveRow> curve;
    std::string final_checkpoint;
    LossBundle last_bundle;
    std::vector<LossBundle> bundles;  // one per iteration, in order
};

inline std::vector<const Episode*> sample_batch(const std::vector<Episode>& train_eps, std::uint64_t seed,
                                                std::uint64_t iteration, int batch_size, bool fixed_batch) {
    std::vector<const Episode*> batch;
    if (fixed_batch) {
        for (int i = 0; i < batch_size; ++i)
            batch.push_back(&train_eps[static_cast<std::size_t>(i) % train_eps.size()]);
        return batch;
    }
    RandomState rng(RandomState::mix({seed, 0xBA7C4ULL, iteration}));
    for (int i = 0; i < batch_size; ++i)
        batch.push_back(&train_eps[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(train_eps.size()) - 1))]);
    return batch;
}

// Runs (or resumes) the full protocol: evaluate at iteration 0 and every
// eval_interval iterations, stream per-iteration metrics, and write one
// checkpoint per evaluation point.
template <typename IterationHook = std::nullptr_t>
TrainingArtifacts run_training(const RunConfig& cfg, const std::vector<Episode>& train_eps,
                               const std::vector<Episode>& eval_eps, bool resume = false,
                               IterationHook&& hook = nullptr) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (train_eps.empty()) throw std::invalid_argument("run_training: empty training set");
    fs::create_directories(cfg.out_dir);
    {
        std::ofstream cfg_out(fs::path(cfg.out_dir) / "run_config.txt");
        cfg_out << serialize_config(cfg);
    }

    TrainSettings settings = TrainSettings::from(cfg);
    TrainState state;
    TrainingArtifacts art;
    const fs::path curve_path = fs::path(cfg.out_dir) / "curve.csv";
    const fs::path metrics_path = fs::path(cfg.out_dir) / "metrics.csv";

    std::uint64_t start_iteration = 0;
    if (resume) {
        std::uint64_t best = 0;
        std::string best_path;
        if (fs::exists(cfg.out_dir))
            for (const auto& e : fs::directory_iterator(cfg.out_dir)) {
                auto name = e.path().filename().string();
                if (name.rfind("ckpt_", 0) == 0 && name.size() > 10) {
                    std::uint64_t it = std::strtoull(name.substr(5).c_str(), nullptr, 10);
                    if (best_path.empty() || it > best) {
                        best = it;
                        best_path = e.path().string();
                    }
                }
            }
        if (best_path.empty()) throw std::runtime_error("run_training: --resume set but no checkpoint in " + cfg.out_dir);
        state = load_checkpoint(best_path, cfg);
        start_iteration = state.iteration;
        if (fs::exists(curve_path)) {
            for (const auto& row : read_learning_curve(curve_path.string()))
                if (row.iteration <= start_iteration) art.curve.push_back(row);
        }
    } else {
        state = TrainState::fresh(cfg);
    }

    std::ofstream metrics;
    if (resume && fs::exists(metrics_path)) {
        // drop any rows past the checkpoint, then continue appending
        std::ifstream in(metrics_path);
        std::vector<std::string> keep;
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
            if (header) {
                keep.push_back(line);
                header = false;
                continue;
            }
            std::uint64_t it = std::strtoull(line.c_str(), nullptr, 10);
            if (it <= start_iteration && it > 0) keep.push_back(line);
        }
        in.close();
        std::ofstream rewrite(metrics_path, std::ios::trunc);
        for (const auto& l : keep) rewrite << l << "\n";
        rewrite.close();
        metrics.open(metrics_path, std::ios::app);
    } else {
        metrics.open(metrics_path, std::ios::trunc);
        metrics << "iteration,loss_task1,loss_task2,loss_task3,loss_spread,w1,w2,w3,w4,total\n";
    }
    if (!metrics) throw std::runtime_error("run_training: cannot write " + metrics_path.string());

    const int num_classes = cfg.num_classes;
    auto run_eval = [&](const LossBundle& bundle) {
        CurveRow row;
        row.iteration = state.iteration;
        row.losses = bundle.losses;
        row.weights = bundle.weights;
        if (!eval_eps.empty()) {
            EvalReport rep = evaluate(state.net, eval_eps, state.iteration, num_classes, cfg.pickup_threshold_px(),
                                      settings.threads);
            rep.check_consistency();
            row.accuracy = rep.accuracy;
            row.mean_iou = rep.mean_iou;
            row.pickup_rate = rep.pickup_success_rate;
        }
        art.curve.push_back(row);
        write_learning_curve(art.curve, curve_path.string());
        std::string ckpt = (fs::path(cfg.out_dir) / ("ckpt_" + std::to_string(state.iteration) + ".ckpt")).string();
        save_checkpoint(ckpt, state);
        art.final_checkpoint = ckpt;
        return row;
    };

    LossBundle bundle;
    bundle.weights = settings.fixed_weights ? *settings.fixed_weights : uniform_weights(settings.tasks);
    if (start_iteration == 0) run_eval(bundle);

    for (std::uint64_t it = start_iteration; it < cfg.iterations; ++it) {
        auto batch = sample_batch(train_eps, cfg.seed, it, settings.batch_size, cfg.fixed_batch);
        bundle = train_iteration(state, batch, settings);
        art.last_bundle = bundle;
        art.bundles.push_back(bundle);
        metrics << state.iteration;
        for (double l : bundle.losses) metrics << "," << format_g17(l);
        for (double w : bundle.weights) metrics << "," << format_g17(w);
        metrics << "," << format_g17(bundle.total) << "\n";
        if constexpr (!std::is_same_v<std::decay_t<IterationHook>, std::nullptr_t>) hook(state, bundle);
        if (state.iteration % cfg.eval_interval == 0) {
            CurveRow row = run_eval(bundle);
            std::fprintf(stderr, "[train] iter %6llu  total %.4f  acc %.3f  iou %.3f\n",
                         static_cast<unsigned long long>(state.iteration), bundle.total, row.accuracy, row.mean_iou);
        }
    }
    metrics.close();
    return art;
}

}  // namespace needlenet
