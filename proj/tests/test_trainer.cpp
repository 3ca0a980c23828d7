#include <doctest.h>

#include "needlenet/trainer.hpp"

#include <filesystem>

using namespace needlenet;

namespace {

RunConfig small_run(const char* tag) {
    RunConfig cfg;
    cfg.input_h = 32;
    cfg.input_w = 32;
    cfg.stack_filters = {4, 8, 12};
    cfg.convs_per_stack = {1, 1, 1};
    cfg.decoder_filters = {};
    cfg.num_classes = 5;
    cfg.holdout = {4};
    cfg.batch_size = 3;
    cfg.train_episodes = 12;
    cfg.eval_episodes = 6;
    cfg.objects_min = 2;
    cfg.objects_max = 3;
    cfg.eval_objects_min = 2;
    cfg.eval_objects_max = 3;
    cfg.iterations = 10;
    cfg.eval_interval = 5;
    cfg.seed = 404;
    cfg.threads = 1;
    cfg.out_dir = (std::filesystem::temp_directory_path() / (std::string("needlenet_run_") + tag)).string();
    std::filesystem::remove_all(cfg.out_dir);
    return cfg;
}

std::vector<Episode> make_eps(const RunConfig& cfg, bool eval_set, std::int64_t n) {
    auto needles = eval_set ? cfg.holdout : cfg.trained_classes();
    auto distractors = eval_set ? cfg.all_classes() : cfg.trained_classes();
    return generate_dataset(needles, distractors, cfg.gen_params(eval_set), cfg.seed + (eval_set ? 1 : 0), n);
}

std::vector<const Episode*> first_batch(const std::vector<Episode>& eps, int n) {
    std::vector<const Episode*> b;
    for (int i = 0; i < n; ++i) b.push_back(&eps[static_cast<std::size_t>(i)]);
    return b;
}

}  // namespace

TEST_CASE("identical seeds give identical loss bundle sequences") {
    RunConfig cfg = small_run("det");
    auto train = make_eps(cfg, false, cfg.train_episodes);
    auto run = [&]() {
        TrainState st = TrainState::fresh(cfg);
        TrainSettings settings = TrainSettings::from(cfg);
        std::vector<double> totals;
        for (int it = 0; it < 6; ++it) {
            auto batch = sample_batch(train, cfg.seed, static_cast<std::uint64_t>(it), cfg.batch_size, false);
            totals.push_back(train_iteration(st, batch, settings).total);
        }
        return totals;
    };
    auto a = run(), b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("results are independent of the worker thread count") {
    RunConfig cfg = small_run("threads");
    auto train = make_eps(cfg, false, cfg.train_episodes);
    auto run = [&](int threads) {
        TrainState st = TrainState::fresh(cfg);
        TrainSettings settings = TrainSettings::from(cfg);
        settings.threads = threads;
        LossBundle last;
        for (int it = 0; it < 4; ++it) {
            auto batch = sample_batch(train, cfg.seed, static_cast<std::uint64_t>(it), cfg.batch_size, false);
            last = train_iteration(st, batch, settings);
        }
        std::vector<float> flat;
        for (const auto& p : st.params)
            for (Index i = 0; i < p.numel(); ++i) flat.push_back(p.value()[i]);
        return std::make_pair(last.total, flat);
    };
    auto [t1, p1] = run(1);
    auto [t3, p3] = run(3);
    CHECK(t1 == t3);
    REQUIRE(p1.size() == p3.size());
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p3[i]);
}

TEST_CASE("fixed weights (1,0,0,0) reduce to a task-1-only trainer") {
    RunConfig cfg = small_run("reduction");
    auto train = make_eps(cfg, false, cfg.train_episodes);

    TrainState full = TrainState::fresh(cfg);
    TrainSettings full_settings = TrainSettings::from(cfg);
    full_settings.aux_enabled = false;
    full_settings.fixed_weights = std::array<double, 4>{1, 0, 0, 0};  // all passes run; only task 1 counts

    TrainState only = TrainState::fresh(cfg);
    TrainSettings only_settings = TrainSettings::from(cfg);
    only_settings.aux_enabled = false;
    only_settings.tasks = {true, false, false, false};

    for (int it = 0; it < 4; ++it) {
        auto batch = sample_batch(train, cfg.seed, static_cast<std::uint64_t>(it), cfg.batch_size, false);
        auto bf = train_iteration(full, batch, full_settings);
        auto bo = train_iteration(only, batch, only_settings);
        CHECK(bf.losses[0] == bo.losses[0]);
    }
    for (std::size_t k = 0; k < full.params.size(); ++k)
        for (Index i = 0; i < full.params[k].numel(); ++i)
            CHECK(full.params[k].value()[i] == only.params[k].value()[i]);
}

TEST_CASE("training loop writes metrics, curve rows and checkpoints") {
    RunConfig cfg = small_run("loop");
    auto train = make_eps(cfg, false, cfg.train_episodes);
    auto eval = make_eps(cfg, true, cfg.eval_episodes);
    auto art = run_training(cfg, train, eval);

    // evaluations at 0, 5, 10
    CHECK(art.curve.size() == 3);
    CHECK(art.curve[0].iteration == 0);
    CHECK(art.curve[2].iteration == 10);
    CHECK(std::filesystem::exists(std::filesystem::path(cfg.out_dir) / "ckpt_10.ckpt"));
    CHECK(std::filesystem::exists(std::filesystem::path(cfg.out_dir) / "metrics.csv"));

    auto rows = read_learning_curve((std::filesystem::path(cfg.out_dir) / "curve.csv").string());
    REQUIRE(rows.size() == art.curve.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].iteration == art.curve[i].iteration);
        CHECK(rows[i].accuracy == art.curve[i].accuracy);   // exact round trip
        CHECK(rows[i].losses[0] == art.curve[i].losses[0]);
    }
}

TEST_CASE("zero-iteration run still writes a checkpoint and one curve row") {
    RunConfig cfg = small_run("zero");
    cfg.iterations = 0;
    auto train = make_eps(cfg, false, 4);
    auto eval = make_eps(cfg, true, 3);
    auto art = run_training(cfg, train, eval);
    CHECK(art.curve.size() == 1);
    CHECK(art.curve[0].iteration == 0);
    CHECK(std::filesystem::exists(std::filesystem::path(cfg.out_dir) / "ckpt_0.ckpt"));
}

TEST_CASE("checkpoint round trip preserves the full training state") {
    RunConfig cfg = small_run("ckpt");
    auto train = make_eps(cfg, false, cfg.train_episodes);
    TrainState st = TrainState::fresh(cfg);
    TrainSettings settings = TrainSettings::from(cfg);
    for (int it = 0; it < 3; ++it)
        train_iteration(st, sample_batch(train, cfg.seed, static_cast<std::uint64_t>(it), cfg.batch_size, false),
                        settings);

    auto path = (std::filesystem::path(cfg.out_dir) / "state.ckpt").string();
    std::filesystem::create_directories(cfg.out_dir);
    save_checkpoint(path, st);
    TrainState back = load_checkpoint(path, cfg);
    CHECK(back.iteration == st.iteration);
    CHECK(back.opt_net.step_count() == st.opt_net.step_count());
    CHECK(back.stats.initialized == st.stats.initialized);
    CHECK(back.stats.ema[0] == st.stats.ema[0]);
    REQUIRE(back.params.size() == st.params.size());
    for (std::size_t k = 0; k < st.params.size(); ++k)
        CHECK((back.params[k].value() == st.params[k].value()).all());
    for (std::size_t k = 0; k < st.opt_net.moments1().size(); ++k)
        CHECK((back.opt_net.moments1()[k] == st.opt_net.moments1()[k]).all());

    RunConfig other = cfg;
    other.stack_filters = {4, 8, 16};
    CHECK_THROWS_WITH_AS(load_checkpoint(path, other), doctest::Contains("stack_filters"), std::runtime_error);
}

TEST_CASE("resumed runs reproduce the uninterrupted metrics tail") {
    RunConfig cfg = small_run("resume_a");
    auto train = make_eps(cfg, false, cfg.train_episodes);
    auto eval = make_eps(cfg, true, cfg.eval_episodes);

    auto full = run_training(cfg, train, eval);

    // second run stopped at iteration 5, then resumed to completion
    RunConfig half = cfg;
    half.out_dir = small_run("resume_b").out_dir;
    half.iterations = 5;
    run_training(half, train, eval);
    RunConfig cont = half;
    cont.iterations = cfg.iterations;
    auto resumed = run_training(cont, train, eval, /*resume=*/true);

    REQUIRE(full.curve.size() == resumed.curve.size());
    for (std::size_t i = 0; i < full.curve.size(); ++i) {
        CHECK(full.curve[i].iteration == resumed.curve[i].iteration);
        CHECK(full.curve[i].losses == resumed.curve[i].losses);
        CHECK(full.curve[i].accuracy == resumed.curve[i].accuracy);
        CHECK(full.curve[i].mean_iou == resumed.curve[i].mean_iou);
    }

    TrainState a = load_checkpoint(full.final_checkpoint, cfg);
    TrainState b = load_checkpoint(resumed.final_checkpoint, cont);
    for (std::size_t k = 0; k < a.params.size(); ++k)
        CHECK((a.params[k].value() == b.params[k].value()).all());
}

TEST_CASE("training total trends downward on a repeated batch") {
    RunConfig cfg = small_run("trend");
    cfg.dropout_rate = 0.0;
    cfg.fixed_batch = true;
    auto train = make_eps(cfg, false, cfg.batch_size);
    TrainState st = TrainState::fresh(cfg);
    TrainSettings settings = TrainSettings::from(cfg);
    settings.aux_enabled = false;

    auto batch = first_batch(train, cfg.batch_size);
    std::vector<double> first, last;
    for (int it = 0; it < 120; ++it) {
        double total = train_iteration(st, batch, settings).total;
        if (it < 20) first.push_back(total);
        if (it >= 100) last.push_back(total);
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    CHECK(median(last) < median(first));
}
