#pragma once

// Random composite-graph builder shared by the gradient unit tests and the
// acceptance suite. Builds a depth-bounded chain of primitives over small
// tensors; every leaf requires a gradient.

#include "needlenet/ops.hpp"

#include <vector>

namespace graph_gen {

using namespace needlenet;

template <typename S>
struct BuiltGraph {
    std::vector<Tensor<S>> leaves;
    Tensor<S> loss;
};

// Leaf factory; rng draws always happen so the graph structure is a pure
// function of the seed, but values can be overridden (finite-difference
// probes rebuild the same graph with one leaf perturbed).
template <typename S>
struct LeafSource {
    const std::vector<Array<S>>* overrides = nullptr;
    std::vector<Tensor<S>> made;

    Tensor<S> next(Shape shape, RandomState& rng, double scale) {
        Tensor<S> t(std::move(shape));
        for (Index i = 0; i < t.numel(); ++i) t.value()[i] = static_cast<S>(rng.normal() * scale);
        if (overrides && made.size() < overrides->size()) t.value() = (*overrides)[made.size()];
        t.set_requires_grad(true);
        made.push_back(t);
        return t;
    }
};

// Applies `depth` randomly chosen ops starting from a [C,H,W] leaf, then
// reduces with sum(x * x) so every path ends in a nonlinear head.
template <typename S>
BuiltGraph<S> random_graph(Tape<S>* tape, RandomState rng, int depth = 8,
                           const std::vector<Array<S>>* leaf_overrides = nullptr) {
    LeafSource<S> leaves;
    leaves.overrides = leaf_overrides;
    Index c = rng.uniform_int(1, 3);
    Index h = 4, w = 4;
    Tensor<S> x = leaves.next(Shape{c, h, w}, rng, 1.0);
    for (int d = 0; d < depth; ++d) {
        switch (rng.uniform_int(0, 8)) {
            case 0: {  // 3x3 same conv
                Index co = rng.uniform_int(1, 3);
                Tensor<S> k = leaves.next(Shape{co, c, 3, 3}, rng, 0.5);
                x = ops::conv2d(tape, x, k, 1, 1);
                c = co;
                break;
            }
            case 1: {  // 1x1 conv
                Index co = rng.uniform_int(1, 4);
                Tensor<S> k = leaves.next(Shape{co, c, 1, 1}, rng, 0.5);
                x = ops::conv2d(tape, x, k, 1, 0);
                c = co;
                break;
            }
            case 2: {  // stride-2 transposed conv
                if (h >= 8) break;  // keep sizes small
                Index co = rng.uniform_int(1, 3);
                Tensor<S> k = leaves.next(Shape{c, co, 2, 2}, rng, 0.5);
                x = ops::conv2d_transpose(tape, x, k, 2);
                c = co;
                h *= 2;
                w *= 2;
                break;
            }
            case 3:
                if (h % 2 == 0 && w % 2 == 0 && h > 1 && w > 1) {
                    x = ops::maxpool2x2(tape, x);
                    h /= 2;
                    w /= 2;
                }
                break;
            case 4:
                x = ops::leaky_relu(tape, x, S(0.02));
                break;
            case 5:
                x = ops::sigmoid(tape, x);
                break;
            case 6: {
                Tensor<S> wts = leaves.next(Shape{c}, rng, 1.0);
                x = ops::channel_scale(tape, x, wts);
                break;
            }
            case 7: {
                Tensor<S> b = leaves.next(Shape{c}, rng, 1.0);
                x = ops::add_channel_bias(tape, x, b);
                break;
            }
            case 8: {
                Tensor<S> other = leaves.next(Shape{c, h, w}, rng, 0.5);
                x = (rng.uniform() < 0.5) ? ops::add(tape, x, other) : ops::mul(tape, x, other);
                break;
            }
        }
    }
    BuiltGraph<S> g;
    g.leaves = std::move(leaves.made);
    g.loss = ops::sum(tape, ops::mul(tape, x, x));
    return g;
}

// Finite-difference check of every leaf gradient of the seeded graph.
// Returns the largest relative error observed.
template <typename S>
double max_fd_error(std::uint64_t seed, int depth = 8, double h = 1e-4) {
    Tape<S> tape;
    auto g = random_graph<S>(&tape, RandomState(seed), depth);
    tape.backward(g.loss);

    std::vector<Array<S>> values;
    for (const auto& lf : g.leaves) values.push_back(lf.value());

    double worst = 0.0;
    for (std::size_t li = 0; li < g.leaves.size(); ++li) {
        for (Index i = 0; i < g.leaves[li].numel(); ++i) {
            auto probe = values;
            probe[li][i] += static_cast<S>(h);
            double fp = random_graph<S>(nullptr, RandomState(seed), depth, &probe).loss.item();
            probe[li][i] -= static_cast<S>(2 * h);
            double fm = random_graph<S>(nullptr, RandomState(seed), depth, &probe).loss.item();
            double numeric = (fp - fm) / (2 * h);
            double analytic = g.leaves[li].has_grad() ? static_cast<double>(g.leaves[li].grad_view()[i]) : 0.0;
            double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-2});
            worst = std::max(worst, std::abs(numeric - analytic) / scale);
        }
    }
    return worst;
}

}  // namespace graph_gen
