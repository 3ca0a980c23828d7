#pragma once

#include "needlenet/losses.hpp"
#include "needlenet/optim.hpp"

#include <array>
#include <cmath>

namespace needlenet {

// Running statistics over the four task losses: the latest observation, an
// exponential moving average and an EMA of the squared deviation.
struct LossStats {
    std::array<double, 4> current{};
    std::array<double, 4> ema{};
    std::array<double, 4> variance{};
    double decay = 0.99;
    bool initialized = false;
};

// Advances the statistics by one observation. The first observation seeds
// the averages directly; afterwards ema' = d*ema + (1-d)*x and
// var' = d*var + (1-d)*(x - ema')^2.
inline LossStats update_stats(LossStats stats, const std::array<double, 4>& observed) {
    if (!(stats.decay > 0.0 && stats.decay < 1.0))
        throw std::invalid_argument("update_stats: decay must be in (0,1), got " + std::to_string(stats.decay));
    for (double v : observed)
        if (!std::isfinite(v)) throw std::invalid_argument("update_stats: non-finite loss observation");
    if (!stats.initialized) {
        stats.current = observed;
        stats.ema = observed;
        stats.variance = {};
        stats.initialized = true;
        return stats;
    }
    const double d = stats.decay;
    for (std::size_t i = 0; i < 4; ++i) {
        stats.current[i] = observed[i];
        stats.ema[i] = d * stats.ema[i] + (1.0 - d) * observed[i];
        const double dev = observed[i] - stats.ema[i];
        stats.variance[i] = d * stats.variance[i] + (1.0 - d) * dev * dev;
    }
    return stats;
}

// The loss-weighting network: 12 inputs (current, EMA and variance of each
// task loss), two hidden layers of 64 leaky-ReLU units, 4 output logits.
template <typename S>
struct AuxNet {
    Tensor<S> w1, b1;  // [64,12], [64]
    Tensor<S> w2, b2;  // [64,64], [64]
    Tensor<S> w3, b3;  // [4,64], [4]
    S alpha = S(0.02);

    static constexpr Index kInputDim = 12;
    static constexpr Index kHidden = 64;
    static constexpr Index kOutputs = 4;

    std::vector<Tensor<S>> parameters() const { return {w1, b1, w2, b2, w3, b3}; }

    void zero_grad() {
        for (auto& p : parameters()) const_cast<Tensor<S>&>(p).zero_grad();
    }

    Tensor<S> stats_input(const LossStats& stats) const {
        Tensor<S> x(Shape{kInputDim});
        for (Index i = 0; i < 4; ++i) {
            x.value()[i] = static_cast<S>(stats.current[static_cast<std::size_t>(i)]);
            x.value()[4 + i] = static_cast<S>(stats.ema[static_cast<std::size_t>(i)]);
            x.value()[8 + i] = static_cast<S>(stats.variance[static_cast<std::size_t>(i)]);
        }
        return x;
    }

    Tensor<S> logits(Tape<S>* tape, const Tensor<S>& input) const {
        Tensor<S> h = ops::leaky_relu(tape, ops::dense(tape, w1, input, b1), alpha);
        h = ops::leaky_relu(tape, ops::dense(tape, w2, h, b2), alpha);
        return ops::dense(tape, w3, h, b3);
    }
};

// Hidden layers are He-initialized; the output layer starts at zero so the
// initial weighting is uniform.
template <typename S>
AuxNet<S> init_aux(RandomState rng) {
    AuxNet<S> aux;
    aux.w1 = detail::he_kernel<S>(Shape{AuxNet<S>::kHidden, AuxNet<S>::kInputDim}, AuxNet<S>::kInputDim, rng);
    aux.b1 = detail::zero_param<S>(Shape{AuxNet<S>::kHidden});
    aux.w2 = detail::he_kernel<S>(Shape{AuxNet<S>::kHidden, AuxNet<S>::kHidden}, AuxNet<S>::kHidden, rng);
    aux.b2 = detail::zero_param<S>(Shape{AuxNet<S>::kHidden});
    aux.w3 = detail::zero_param<S>(Shape{AuxNet<S>::kOutputs, AuxNet<S>::kHidden});
    aux.b3 = detail::zero_param<S>(Shape{AuxNet<S>::kOutputs});
    return aux;
}

namespace detail {

inline std::vector<Index> enabled_indices(const std::array<bool, 4>& enabled) {
    std::vector<Index> idx;
    for (Index i = 0; i < 4; ++i)
        if (enabled[static_cast<std::size_t>(i)]) idx.push_back(i);
    if (idx.empty()) throw std::invalid_argument("task mask selects an empty loss set");
    return idx;
}

}  // namespace detail

// Softmax weighting over the enabled tasks; disabled tasks get weight 0.
template <typename S>
std::array<double, 4> compute_weights(const AuxNet<S>& aux, const LossStats& stats,
                                      const std::array<bool, 4>& enabled = {true, true, true, true}) {
    for (double v : stats.current)
        if (!std::isfinite(v)) throw std::invalid_argument("compute_weights: non-finite loss statistics");
    const auto idx = detail::enabled_indices(enabled);
    Tensor<S> lg = aux.logits(nullptr, aux.stats_input(stats));
    Tensor<S> sub = ops::gather1d<S>(nullptr, lg, idx);
    Tensor<S> w = ops::softmax<S>(nullptr, sub);
    std::array<double, 4> out{};
    for (std::size_t k = 0; k < idx.size(); ++k)
        out[static_cast<std::size_t>(idx[k])] = static_cast<double>(w.value()[static_cast<Index>(k)]);
    return out;
}

// One optimizer step on the auxiliary network against the meta-objective
//   J = sum_i w_i * current_i / (ema_i + eps) + beta * sum_i w_i log w_i,
// where w = softmax(logits) over the enabled tasks. The normalized losses
// are constants here, so only auxiliary parameters move.
template <typename S>
AdamStepResult aux_train_step(AuxNet<S>& aux, const LossStats& stats, const LossBundle& bundle,
                              AdamState<S>& opt, const std::array<bool, 4>& enabled = {true, true, true, true}) {
    constexpr double kEps = 1e-12;
    constexpr double kEntropyBeta = 0.01;
    const auto idx = detail::enabled_indices(enabled);

    Tensor<S> normalized(Shape{static_cast<Index>(idx.size())});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(idx[k]);
        normalized.value()[static_cast<Index>(k)] = static_cast<S>(bundle.losses[i] / (stats.ema[i] + kEps));
    }

    Tape<S> tape;
    aux.zero_grad();
    Tensor<S> lg = aux.logits(&tape, aux.stats_input(stats));
    Tensor<S> w = ops::softmax(&tape, ops::gather1d(&tape, lg, idx));
    Tensor<S> j = ops::sum(&tape, ops::mul(&tape, w, normalized));
    Tensor<S> entropy_term = ops::scale(&tape, ops::sum(&tape, ops::xlogx(&tape, w)), S(kEntropyBeta));
    Tensor<S> objective = ops::add(&tape, j, entropy_term);
    tape.backward(objective);
    auto params = aux.parameters();
    return adam_step(params, opt);
}

}  // namespace needlenet
