#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace needlenet {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename S>
using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

inline Index numel_of(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Deterministic RNG. All sampling is hand-rolled on top of mt19937_64's
// standardized output so streams are reproducible across standard libraries.
class RandomState {
public:
    explicit RandomState(std::uint64_t seed) : engine_(seed), base_(seed) {}

    static std::uint64_t mix(std::initializer_list<std::uint64_t> parts) {
        // splitmix64 over the concatenated parts
        std::uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (std::uint64_t p : parts) {
            h ^= p + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
            std::uint64_t z = h;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            h = z ^ (z >> 31);
        }
        return h;
    }

    // Derives an independent stream keyed by (construction seed, tags...),
    // irrespective of how much this stream has been consumed.
    RandomState fork(std::initializer_list<std::uint64_t> tags) const {
        std::uint64_t h = base_;
        for (std::uint64_t t : tags) h = mix({h, t});
        return RandomState(h);
    }

    std::uint64_t u64() { return engine_(); }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % span;
        std::uint64_t v;
        do { v = u64(); } while (v >= limit);
        return lo + static_cast<std::int64_t>(v % span);
    }

    double normal() {
        // Box-Muller, cosine branch only
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t base_ = 0;
};

namespace detail {

template <typename S>
struct Storage {
    Shape shape;
    Array<S> value;
    Array<S> grad;  // size 0 until first accumulation
    bool requires_grad = false;
};

}  // namespace detail

// Dense row-major n-d tensor. Copies are shallow handles sharing storage;
// use clone() for an independent copy. A tensor and its gradient buffer are
// only safe to mutate from one thread at a time.
template <typename S>
class Tensor {
public:
    Tensor() : st_(std::make_shared<detail::Storage<S>>()) {}

    explicit Tensor(Shape shape) : st_(std::make_shared<detail::Storage<S>>()) {
        st_->shape = std::move(shape);
        st_->value = Array<S>::Zero(numel_of(st_->shape));
    }

    Tensor(Shape shape, std::initializer_list<S> vals) : Tensor(std::move(shape)) {
        if (static_cast<Index>(vals.size()) != numel())
            throw std::invalid_argument("tensor literal size does not match shape");
        Index i = 0;
        for (S v : vals) st_->value[i++] = v;
    }

    static Tensor scalar(S v) {
        Tensor t(Shape{1});
        t.st_->value[0] = v;
        return t;
    }

    static Tensor full(Shape shape, S v) {
        Tensor t(std::move(shape));
        t.st_->value.setConstant(v);
        return t;
    }

    const Shape& shape() const { return st_->shape; }
    Index rank() const { return static_cast<Index>(st_->shape.size()); }
    Index dim(Index i) const { return st_->shape[static_cast<std::size_t>(i)]; }
    Index numel() const { return st_->value.size(); }

    Array<S>& value() { return st_->value; }
    const Array<S>& value() const { return st_->value; }
    S* data() { return st_->value.data(); }
    const S* data() const { return st_->value.data(); }

    S item() const {
        if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
        return st_->value[0];
    }

    // 3-d accessors for [C,H,W] tensors
    S& at(Index c, Index y, Index x) { return st_->value[(c * dim(1) + y) * dim(2) + x]; }
    S at(Index c, Index y, Index x) const { return st_->value[(c * dim(1) + y) * dim(2) + x]; }

    bool requires_grad() const { return st_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        st_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return st_->grad.size() == numel() && numel() > 0; }

    Array<S>& grad() {
        if (!has_grad()) st_->grad = Array<S>::Zero(numel());
        return st_->grad;
    }
    const Array<S>& grad_view() const { return st_->grad; }

    void zero_grad() {
        if (st_->grad.size() > 0) st_->grad.setZero();
    }

    void drop_grad() { st_->grad.resize(0); }

    Tensor clone() const {
        Tensor t;
        t.st_->shape = st_->shape;
        t.st_->value = st_->value;
        t.st_->requires_grad = st_->requires_grad;
        return t;
    }

    bool all_finite() const { return st_->value.isFinite().all(); }

    bool same_storage(const Tensor& o) const { return st_ == o.st_; }

private:
    std::shared_ptr<detail::Storage<S>> st_;
};

// Reverse-mode tape. Ops append a backward closure while computing their
// forward result; backward() replays the closures in reverse. A tape and the
// tensors it touches are confined to one thread.
template <typename S>
class Tape {
public:
    void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

    std::size_t size() const { return records_.size(); }

    void clear() { records_.clear(); }

    // Standard entry point: seed d(loss)/d(loss) = 1 and replay.
    void backward(Tensor<S>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        loss.grad()[0] += S(1);
        backward_seeded();
    }

    // Replays with whatever gradients the caller already planted on outputs.
    void backward_seeded() {
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> records_;
};

template <typename S>
inline bool should_record(const Tape<S>* tape, std::initializer_list<bool> needs) {
    if (!tape) return false;
    for (bool b : needs)
        if (b) return true;
    return false;
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace needlenet
