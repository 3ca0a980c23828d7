#pragma once

#include "needlenet/ops.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace needlenet {

// The four task losses, the weights they were combined with, and the total.
struct LossBundle {
    std::array<double, 4> losses{};   // task1, task2, task3, vector spread
    std::array<double, 4> weights{};  // non-negative, sum to 1
    double total = 0.0;
};

namespace losses {

// Soft intersection-over-union loss: 1 - sum(p*g) / sum(p + g - p*g).
// Equals 1 - discrete IoU when the belief is binary. An empty target with an
// empty belief is defined as loss 0.
template <typename S>
Tensor<S> soft_iou_loss(Tape<S>* tape, const Tensor<S>& belief, const Tensor<S>& target) {
    if (belief.shape() != target.shape())
        throw std::invalid_argument("soft_iou_loss: belief " + shape_str(belief.shape()) +
                                    " vs target " + shape_str(target.shape()));
    const auto& p = belief.value();
    const auto& g = target.value();
    for (Index i = 0; i < target.numel(); ++i)
        if (g[i] != S(0) && g[i] != S(1))
            throw std::invalid_argument("soft_iou_loss: target must be binary, found " + std::to_string(g[i]));

    S inter = (p * g).sum();
    S uni = (p + g - p * g).sum();
    Tensor<S> out = Tensor<S>::scalar(uni > S(0) ? S(1) - inter / uni : S(0));
    if (should_record(tape, {belief.requires_grad()}) && uni > S(0)) {
        out.set_requires_grad(true);
        Tensor<S> pc = belief, gc = target, oc = out;
        tape->record([pc, gc, oc, inter, uni]() mutable {
            if (!oc.has_grad() || !pc.requires_grad()) return;
            S go = oc.grad_view()[0];
            // d/dp of -inter/uni: numerator g_i, denominator derivative (1 - g_i)
            pc.grad() += go * (gc.value() * (-uni) + inter * (S(1) - gc.value())) / (uni * uni);
        });
    }
    return out;
}

// Angular cosine distance: arccos(x.y / (|x||y|)) / pi, in [0,1].
// Norms are floored by 1e-12; the similarity is clamped to [-1,1] for the
// value and into the open interval for the gradient so it stays finite at
// exactly parallel or antiparallel inputs. `degenerate`, when given, is set
// if a zero-norm input hit the floor.
template <typename S>
Tensor<S> cosine_distance(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b, bool* degenerate = nullptr) {
    if (a.numel() != b.numel())
        throw std::invalid_argument("cosine_distance: length " + std::to_string(a.numel()) +
                                    " vs " + std::to_string(b.numel()));
    constexpr double kEpsSq = 1e-24;  // squared norm floor (eps = 1e-12)
    double dot = 0, nsq_a = 0, nsq_b = 0;
    for (Index i = 0; i < a.numel(); ++i) {
        const double av = static_cast<double>(a.value()[i]);
        const double bv = static_cast<double>(b.value()[i]);
        dot += av * bv;
        nsq_a += av * av;
        nsq_b += bv * bv;
    }
    if (degenerate && (nsq_a < kEpsSq || nsq_b < kEpsSq)) *degenerate = true;
    nsq_a = std::max(nsq_a, kEpsSq);
    nsq_b = std::max(nsq_b, kEpsSq);
    // sqrt of the product keeps identical inputs exactly at sim == 1
    const double denom = std::sqrt(nsq_a * nsq_b);
    const double sim = std::clamp(dot / denom, -1.0, 1.0);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(std::acos(sim) / M_PI));
    if (should_record(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        Tensor<S> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, denom, nsq_a, nsq_b, sim]() mutable {
            if (!oc.has_grad()) return;
            // exactly (anti)parallel inputs sit on a flat of the distance
            if (sim == 1.0 || sim == -1.0) return;
            const double go = static_cast<double>(oc.grad_view()[0]);
            const double sim_c = std::clamp(sim, -1.0 + 1e-7, 1.0 - 1e-7);
            const double dacos = -1.0 / (M_PI * std::sqrt(1.0 - sim_c * sim_c));
            if (ac.requires_grad()) {
                Array<double> ga = (go * dacos) * (bc.value().template cast<double>() / denom -
                                                   sim * ac.value().template cast<double>() / nsq_a);
                ac.grad() += ga.template cast<S>();
            }
            if (bc.requires_grad()) {
                Array<double> gb = (go * dacos) * (ac.value().template cast<double>() / denom -
                                                   sim * bc.value().template cast<double>() / nsq_b);
                bc.grad() += gb.template cast<S>();
            }
        });
    }
    return out;
}

// Batch-pairwise vector spread: mean over all b^2 ordered pairs of
// D_ij = cosine_distance(x_i, x_j) when classes match, else 1 - distance.
// Pulls same-class features together and pushes different classes apart.
template <typename S>
Tensor<S> vector_spread_loss(Tape<S>* tape, const std::vector<Tensor<S>>& features,
                             const std::vector<int>& classes) {
    if (features.empty()) throw std::invalid_argument("vector_spread_loss: empty batch");
    if (features.size() != classes.size())
        throw std::invalid_argument("vector_spread_loss: " + std::to_string(features.size()) +
                                    " features vs " + std::to_string(classes.size()) + " class ids");
    const std::size_t b = features.size();
    Tensor<S> total = Tensor<S>::scalar(S(0));
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            Tensor<S> d = cosine_distance(tape, features[i], features[j]);
            if (classes[i] != classes[j]) d = ops::add_const(tape, ops::scale(tape, d, S(-1)), S(1));
            total = ops::add(tape, total, d);
        }
    }
    return ops::scale(tape, total, S(1) / S(b * b));
}

// Weighted combination of the four task losses. Weights are treated as
// constants: gradient flows into the losses only.
template <typename S>
Tensor<S> assemble_total(Tape<S>* tape, const std::array<Tensor<S>, 4>& task_losses,
                         const std::array<S, 4>& weights, LossBundle* bundle = nullptr) {
    S wsum = S(0);
    for (S w : weights) {
        if (!(w >= S(0))) throw std::invalid_argument("assemble_total: negative weight " + std::to_string(w));
        wsum += w;
    }
    if (std::abs(wsum - S(1)) > S(1e-6))
        throw std::invalid_argument("assemble_total: weights sum to " + std::to_string(wsum) + ", expected 1");
    Tensor<S> total = Tensor<S>::scalar(S(0));
    for (int i = 0; i < 4; ++i)
        total = ops::add(tape, total, ops::scale(tape, task_losses[static_cast<std::size_t>(i)],
                                                 weights[static_cast<std::size_t>(i)]));
    if (bundle) {
        for (int i = 0; i < 4; ++i) {
            bundle->losses[static_cast<std::size_t>(i)] = static_cast<double>(task_losses[static_cast<std::size_t>(i)].item());
            bundle->weights[static_cast<std::size_t>(i)] = static_cast<double>(weights[static_cast<std::size_t>(i)]);
        }
        bundle->total = static_cast<double>(total.item());
    }
    return total;
}

// Discrete IoU of two binary masks; 0 when both are empty.
template <typename S>
double discrete_iou(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("discrete_iou: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Index inter = 0, uni = 0;
    for (Index i = 0; i < a.numel(); ++i) {
        bool va = a.value()[i] != S(0), vb = b.value()[i] != S(0);
        inter += (va && vb);
        uni += (va || vb);
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace losses
}  // namespace needlenet
