#pragma once

#include "needlenet/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace needlenet {

struct AdamParams {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Per-parameter first/second moment buffers plus the step counter.
template <typename S>
class AdamState {
public:
    AdamState() = default;

    template <typename ParamList>
    AdamState(const ParamList& params, AdamParams hp) : hp_(hp) {
        for (const auto& p : params) {
            m_.push_back(Array<S>::Zero(p.numel()));
            v_.push_back(Array<S>::Zero(p.numel()));
        }
    }

    AdamParams& hyper() { return hp_; }
    const AdamParams& hyper() const { return hp_; }
    std::uint64_t step_count() const { return t_; }

    std::vector<Array<S>>& moments1() { return m_; }
    std::vector<Array<S>>& moments2() { return v_; }
    const std::vector<Array<S>>& moments1() const { return m_; }
    const std::vector<Array<S>>& moments2() const { return v_; }
    void set_step_count(std::uint64_t t) { t_ = t; }

private:
    AdamParams hp_;
    std::uint64_t t_ = 0;
    std::vector<Array<S>> m_, v_;
};

struct AdamStepResult {
    bool applied = true;
    std::string diagnostic;
};

// One bias-corrected Adam update, reading each parameter's accumulated
// gradient. A non-finite gradient skips the whole step and reports which
// parameter tripped it.
template <typename S>
AdamStepResult adam_step(std::vector<Tensor<S>>& params, AdamState<S>& state) {
    if (params.size() != state.moments1().size())
        throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " params vs " +
                                    std::to_string(state.moments1().size()) + " moment buffers");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].numel() != state.moments1()[i].size())
            throw std::invalid_argument("adam_step: param " + std::to_string(i) + " shape changed");
        if (params[i].has_grad() && !params[i].grad_view().isFinite().all())
            return {false, "adam_step: non-finite gradient in parameter " + std::to_string(i) + ", step skipped"};
    }
    state.set_step_count(state.step_count() + 1);
    const double t = static_cast<double>(state.step_count());
    const auto& hp = state.hyper();
    const S corr1 = static_cast<S>(1.0 - std::pow(hp.beta1, t));
    const S corr2 = static_cast<S>(1.0 - std::pow(hp.beta2, t));
    const S b1 = static_cast<S>(hp.beta1), b2 = static_cast<S>(hp.beta2);
    const S lr = static_cast<S>(hp.lr), eps = static_cast<S>(hp.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_grad()) continue;  // parameter untouched this step
        const auto& g = params[i].grad_view();
        auto& m = state.moments1()[i];
        auto& v = state.moments2()[i];
        m = b1 * m + (S(1) - b1) * g;
        v = b2 * v + (S(1) - b2) * g * g;
        params[i].value() -= lr * (m / corr1) / ((v / corr2).sqrt() + eps);
    }
    return {};
}

// Scales all gradients so their joint L2 norm does not exceed max_norm.
template <typename S>
void clip_gradients(std::vector<Tensor<S>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params)
        if (p.has_grad()) sq += static_cast<double>((p.grad_view() * p.grad_view()).sum());
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const S f = static_cast<S>(max_norm / norm);
    for (auto& p : params)
        if (p.has_grad()) p.grad() *= f;
}

}  // namespace needlenet
