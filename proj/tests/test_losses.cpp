#include <doctest.h>

#include "needlenet/losses.hpp"
#include "support/oracles.hpp"

using namespace needlenet;

namespace {

Tensor<double> random_binary_mask(Index h, Index w, RandomState& rng, double fill = 0.3) {
    Tensor<double> m(Shape{1, h, w});
    for (Index i = 0; i < m.numel(); ++i) m.value()[i] = rng.uniform() < fill ? 1.0 : 0.0;
    return m;
}

}  // namespace

TEST_CASE("soft IoU on perfect, disjoint and half-covering beliefs") {
    Tensor<double> target(Shape{1, 2, 2}, {1, 1, 0, 0});
    CHECK(losses::soft_iou_loss<double>(nullptr, target, target).item() == doctest::Approx(0.0));

    Tensor<double> disjoint(Shape{1, 2, 2}, {0, 0, 1, 1});
    CHECK(losses::soft_iou_loss<double>(nullptr, disjoint, target).item() == doctest::Approx(1.0));

    Tensor<double> half(Shape{1, 2, 2}, {1, 0, 0, 0});
    CHECK(losses::soft_iou_loss<double>(nullptr, half, target).item() == doctest::Approx(0.5));
}

TEST_CASE("soft IoU of empty belief and empty target is zero") {
    Tensor<double> zero(Shape{1, 3, 3});
    CHECK(losses::soft_iou_loss<double>(nullptr, zero, zero).item() == 0.0);
    Tensor<double> some(Shape{1, 3, 3});
    some.value()[4] = 0.7;
    CHECK(losses::soft_iou_loss<double>(nullptr, some, zero).item() == doctest::Approx(1.0));
}

TEST_CASE("soft IoU rejects non-binary targets") {
    Tensor<double> belief(Shape{1, 2, 2}, {0.5, 0.5, 0.5, 0.5});
    Tensor<double> bad(Shape{1, 2, 2}, {0, 1, 0.5, 0});
    CHECK_THROWS_WITH_AS(losses::soft_iou_loss<double>(nullptr, belief, bad), doctest::Contains("binary"),
                         std::invalid_argument);
}

TEST_CASE("soft IoU equals 1 - discrete IoU on binary masks") {
    RandomState rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor<double> a = random_binary_mask(8, 8, rng, 0.2 + 0.6 * rng.uniform());
        Tensor<double> b = random_binary_mask(8, 8, rng, 0.2 + 0.6 * rng.uniform());
        double soft = losses::soft_iou_loss<double>(nullptr, a, b).item();
        double discrete = losses::discrete_iou(a, b);
        CHECK(std::abs(soft - (1.0 - discrete)) < 1e-10);
    }
}

TEST_CASE("soft IoU decreases as belief mass moves into the target") {
    Tensor<double> target(Shape{1, 4, 4});
    target.value()[5] = 1.0;
    target.value()[6] = 1.0;
    double prev = 2.0;
    // progressively move a fixed mass 0.8 from a wrong pixel onto a target pixel
    for (int step = 0; step <= 10; ++step) {
        double into = 0.08 * step;
        Tensor<double> belief(Shape{1, 4, 4});
        belief.value() = 1e-6;
        belief.value()[5] = into;
        belief.value()[9] = 0.8 - into;
        double loss = losses::soft_iou_loss<double>(nullptr, belief, target).item();
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("soft IoU gradient matches finite differences") {
    RandomState rng(78);
    Tensor<double> target = random_binary_mask(5, 5, rng);
    Tensor<double> belief(Shape{1, 5, 5});
    for (Index i = 0; i < belief.numel(); ++i) belief.value()[i] = 0.05 + 0.9 * rng.uniform();
    belief.set_requires_grad(true);

    Tape<double> tape;
    Tensor<double> loss = losses::soft_iou_loss(&tape, belief, target);
    tape.backward(loss);
    auto numeric = oracles::finite_diff<double>(
        [&](const Tensor<double>& p) { return losses::soft_iou_loss<double>(nullptr, p, target).item(); }, belief);
    CHECK(oracles::grads_close(numeric, belief.grad_view().data(), static_cast<std::size_t>(belief.numel())));
}

TEST_CASE("cosine distance endpoints: parallel, orthogonal, antiparallel") {
    Tensor<double> x(Shape{3}, {0.3, -1.2, 2.0});
    CHECK(losses::cosine_distance<double>(nullptr, x, x).item() == doctest::Approx(0.0).epsilon(1e-12));

    Tensor<double> ex(Shape{2}, {1, 0});
    Tensor<double> ey(Shape{2}, {0, 1});
    CHECK(losses::cosine_distance<double>(nullptr, ex, ey).item() == doctest::Approx(0.5).epsilon(1e-12));

    Tensor<double> nx(Shape{3}, {-0.3, 1.2, -2.0});
    CHECK(losses::cosine_distance<double>(nullptr, x, nx).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cosine distance flags zero-norm inputs instead of failing") {
    Tensor<double> z(Shape{3});
    Tensor<double> x(Shape{3}, {1, 2, 3});
    bool degenerate = false;
    double d = losses::cosine_distance<double>(nullptr, z, x, &degenerate).item();
    CHECK(degenerate);
    CHECK(d == doctest::Approx(0.5));  // zero dot -> orthogonal by convention
}

TEST_CASE("cosine distance symmetry and scale invariance") {
    RandomState rng(79);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<double> a(Shape{6}), b(Shape{6});
        for (Index i = 0; i < 6; ++i) {
            a.value()[i] = rng.normal();
            b.value()[i] = rng.normal();
        }
        double dab = losses::cosine_distance<double>(nullptr, a, b).item();
        double dba = losses::cosine_distance<double>(nullptr, b, a).item();
        CHECK(dab == doctest::Approx(dba).epsilon(1e-12));

        Tensor<double> a_scaled = a.clone();
        a_scaled.value() *= 37.5;
        double dscaled = losses::cosine_distance<double>(nullptr, a_scaled, b).item();
        CHECK(dab == doctest::Approx(dscaled).epsilon(1e-9));
    }
}

TEST_CASE("cosine distance gradient matches finite differences") {
    RandomState rng(80);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> a(Shape{5}), b(Shape{5});
        for (Index i = 0; i < 5; ++i) {
            a.value()[i] = rng.normal();
            b.value()[i] = rng.normal();
        }
        a.set_requires_grad(true);
        Tape<double> tape;
        Tensor<double> d = losses::cosine_distance(&tape, a, b);
        tape.backward(d);
        auto numeric = oracles::finite_diff<double>(
            [&](const Tensor<double>& p) { return losses::cosine_distance<double>(nullptr, p, b).item(); }, a);
        CHECK(oracles::grads_close(numeric, a.grad_view().data(), 5));
    }
}

TEST_CASE("vector spread on the stated two-element batches") {
    Tensor<double> ex(Shape{2}, {1, 0});
    Tensor<double> ey(Shape{2}, {0, 1});
    std::vector<Tensor<double>> feats{ex, ey};

    // different classes, orthogonal: (0 + 0.5 + 0.5 + 0)/4
    CHECK(losses::vector_spread_loss<double>(nullptr, feats, {0, 1}).item() == doctest::Approx(0.25));
    // same class, orthogonal: diagonal zeros, cross terms 0.5
    CHECK(losses::vector_spread_loss<double>(nullptr, feats, {2, 2}).item() == doctest::Approx(0.25));

    std::vector<Tensor<double>> same{ex, ex, ex};
    CHECK(losses::vector_spread_loss<double>(nullptr, same, {1, 1, 1}).item() == doctest::Approx(0.0));
}

TEST_CASE("vector spread matches the direct enumeration oracle") {
    RandomState rng(81);
    for (int trial = 0; trial < 1000; ++trial) {
        const int b = static_cast<int>(rng.uniform_int(1, 4));
        const int dim = static_cast<int>(rng.uniform_int(1, 5));
        std::vector<Tensor<double>> feats;
        std::vector<std::vector<double>> raw;
        std::vector<int> cls;
        for (int i = 0; i < b; ++i) {
            Tensor<double> f(Shape{dim});
            std::vector<double> row(static_cast<std::size_t>(dim));
            for (Index k = 0; k < dim; ++k) {
                f.value()[k] = rng.normal();
                row[static_cast<std::size_t>(k)] = f.value()[k];
            }
            feats.push_back(f);
            raw.push_back(row);
            cls.push_back(static_cast<int>(rng.uniform_int(0, 2)));
        }
        double got = losses::vector_spread_loss<double>(nullptr, feats, cls).item();
        double want = oracles::vector_spread_ref(raw, cls);
        CHECK(std::abs(got - want) < 1e-10);
    }
}

TEST_CASE("vector spread is permutation and scale invariant") {
    RandomState rng(82);
    std::vector<Tensor<double>> feats;
    std::vector<int> cls{0, 1, 1, 2};
    for (int i = 0; i < 4; ++i) {
        Tensor<double> f(Shape{6});
        for (Index k = 0; k < 6; ++k) f.value()[k] = rng.normal();
        feats.push_back(f);
    }
    double base = losses::vector_spread_loss<double>(nullptr, feats, cls).item();

    std::vector<Tensor<double>> perm{feats[2], feats[0], feats[3], feats[1]};
    std::vector<int> pcls{cls[2], cls[0], cls[3], cls[1]};
    CHECK(losses::vector_spread_loss<double>(nullptr, perm, pcls).item() == doctest::Approx(base).epsilon(1e-12));

    std::vector<Tensor<double>> scaled;
    for (auto& f : feats) {
        Tensor<double> g = f.clone();
        g.value() *= 12.25;
        scaled.push_back(g);
    }
    CHECK(losses::vector_spread_loss<double>(nullptr, scaled, cls).item() == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("vector spread gradient flows through the features") {
    RandomState rng(83);
    std::vector<Tensor<double>> feats;
    std::vector<int> cls{0, 1, 0};
    for (int i = 0; i < 3; ++i) {
        Tensor<double> f(Shape{4});
        for (Index k = 0; k < 4; ++k) f.value()[k] = rng.normal();
        f.set_requires_grad(true);
        feats.push_back(f);
    }
    Tape<double> tape;
    Tensor<double> loss = losses::vector_spread_loss(&tape, feats, cls);
    tape.backward(loss);
    for (std::size_t i = 0; i < feats.size(); ++i) {
        auto numeric = oracles::finite_diff<double>(
            [&](const Tensor<double>& p) {
                std::vector<Tensor<double>> probe = feats;
                probe[i] = p.clone();
                return losses::vector_spread_loss<double>(nullptr, probe, cls).item();
            },
            feats[i]);
        CHECK(oracles::grads_close(numeric, feats[i].grad_view().data(), 4));
    }
}

TEST_CASE("assemble_total weighting rules") {
    auto s = [](double v) { return Tensor<double>::scalar(v); };
    std::array<Tensor<double>, 4> ls{s(0.2), s(0.4), s(0.6), s(0.8)};

    LossBundle b1;
    CHECK(losses::assemble_total<double>(nullptr, ls, {1, 0, 0, 0}, &b1).item() == doctest::Approx(0.2));

    std::array<Tensor<double>, 4> equal{s(0.37), s(0.37), s(0.37), s(0.37)};
    CHECK(losses::assemble_total<double>(nullptr, equal, {0.1, 0.2, 0.3, 0.4}).item() == doctest::Approx(0.37));

    LossBundle b3;
    CHECK(losses::assemble_total<double>(nullptr, ls, {0.25, 0.25, 0.25, 0.25}, &b3).item() == doctest::Approx(0.5));
    CHECK(b3.total == doctest::Approx(0.5));
    CHECK(b3.losses[2] == doctest::Approx(0.6));

    CHECK_THROWS_WITH_AS(losses::assemble_total<double>(nullptr, ls, {0.5, 0.5, 0.5, 0.5}),
                         doctest::Contains("sum"), std::invalid_argument);
    CHECK_THROWS_AS(losses::assemble_total<double>(nullptr, ls, {-0.5, 0.5, 0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("assemble_total sends gradient into losses, not weights") {
    Tape<double> tape;
    Tensor<double> l1 = Tensor<double>::scalar(0.3);
    l1.set_requires_grad(true);
    std::array<Tensor<double>, 4> ls{l1, Tensor<double>::scalar(0.1), Tensor<double>::scalar(0.1),
                                     Tensor<double>::scalar(0.1)};
    Tensor<double> total = losses::assemble_total(&tape, ls, {0.4, 0.2, 0.2, 0.2});
    tape.backward(total);
    CHECK(l1.grad_view()[0] == doctest::Approx(0.4));
}
