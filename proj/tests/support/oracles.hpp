#pragma once

// Reference implementations used as independent oracles by the test suites.
// Everything here is deliberately naive (nested loops, direct recurrences)
// and shares no code with the library paths it checks.

#include "needlenet/tensor.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

using needlenet::Index;
using needlenet::Tensor;

// Direct cross-correlation, nested loops.
template <typename S>
Tensor<S> conv2d_ref(const Tensor<S>& x, const Tensor<S>& k, int stride, int pad) {
    const Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index cout = k.dim(0), ks = k.dim(2);
    const Index ho = (h + 2 * pad - ks) / stride + 1;
    const Index wo = (w + 2 * pad - ks) / stride + 1;
    Tensor<S> y(needlenet::Shape{cout, ho, wo});
    for (Index co = 0; co < cout; ++co)
        for (Index oy = 0; oy < ho; ++oy)
            for (Index ox = 0; ox < wo; ++ox) {
                S acc = 0;
                for (Index ci = 0; ci < cin; ++ci)
                    for (Index ky = 0; ky < ks; ++ky)
                        for (Index kx = 0; kx < ks; ++kx) {
                            Index iy = oy * stride + ky - pad;
                            Index ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += x.at(ci, iy, ix) * k.value()[((co * cin + ci) * ks + ky) * ks + kx];
                        }
                y.at(co, oy, ox) = acc;
            }
    return y;
}

// Adjoint of conv2d_ref: fractionally strided convolution built by scattering
// each input cell through the kernel, with implied padding (k - stride)/2.
template <typename S>
Tensor<S> conv2d_transpose_ref(const Tensor<S>& x, const Tensor<S>& k, int stride) {
    const Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index cout = k.dim(1), ks = k.dim(2);
    const int pad = static_cast<int>(ks - stride) / 2;
    Tensor<S> y(needlenet::Shape{cout, h * stride, w * stride});
    for (Index ci = 0; ci < cin; ++ci)
        for (Index iy = 0; iy < h; ++iy)
            for (Index ix = 0; ix < w; ++ix) {
                S v = x.at(ci, iy, ix);
                for (Index co = 0; co < cout; ++co)
                    for (Index ky = 0; ky < ks; ++ky)
                        for (Index kx = 0; kx < ks; ++kx) {
                            Index oy = iy * stride + ky - pad;
                            Index ox = ix * stride + kx - pad;
                            if (oy < 0 || oy >= h * stride || ox < 0 || ox >= w * stride) continue;
                            y.at(co, oy, ox) += v * k.value()[((ci * cout + co) * ks + ky) * ks + kx];
                        }
            }
    return y;
}

template <typename S>
Tensor<S> maxpool_ref(const Tensor<S>& x) {
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<S> y(needlenet::Shape{c, h / 2, w / 2});
    for (Index ch = 0; ch < c; ++ch)
        for (Index oy = 0; oy < h / 2; ++oy)
            for (Index ox = 0; ox < w / 2; ++ox) {
                S m = x.at(ch, 2 * oy, 2 * ox);
                m = std::max(m, x.at(ch, 2 * oy, 2 * ox + 1));
                m = std::max(m, x.at(ch, 2 * oy + 1, 2 * ox));
                m = std::max(m, x.at(ch, 2 * oy + 1, 2 * ox + 1));
                y.at(ch, oy, ox) = m;
            }
    return y;
}

template <typename S>
Tensor<S> channel_scale_ref(const Tensor<S>& x, const Tensor<S>& w) {
    Tensor<S> y(x.shape());
    for (Index c = 0; c < x.dim(0); ++c)
        for (Index i = 0; i < x.dim(1); ++i)
            for (Index j = 0; j < x.dim(2); ++j) y.at(c, i, j) = x.at(c, i, j) * w.value()[c];
    return y;
}

template <typename S>
Tensor<S> matvec_ref(const Tensor<S>& w, const Tensor<S>& x, const Tensor<S>& b) {
    const Index m = w.dim(0), n = w.dim(1);
    Tensor<S> y(needlenet::Shape{m});
    for (Index i = 0; i < m; ++i) {
        S acc = b.value()[i];
        for (Index j = 0; j < n; ++j) acc += w.value()[i * n + j] * x.value()[j];
        y.value()[i] = acc;
    }
    return y;
}

// Central finite differences of a scalar-valued function at x.
template <typename S>
std::vector<double> finite_diff(const std::function<double(const Tensor<S>&)>& f, const Tensor<S>& x,
                                double h = 1e-4) {
    std::vector<double> g(static_cast<std::size_t>(x.numel()));
    Tensor<S> probe = x.clone();
    for (Index i = 0; i < x.numel(); ++i) {
        S keep = probe.value()[i];
        probe.value()[i] = keep + static_cast<S>(h);
        double fp = f(probe);
        probe.value()[i] = keep - static_cast<S>(h);
        double fm = f(probe);
        probe.value()[i] = keep;
        g[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline bool grads_close(const std::vector<double>& numeric, const double* analytic, std::size_t n,
                        double rel = 1e-4, double abs_floor = 1e-6) {
    for (std::size_t i = 0; i < n; ++i) {
        double diff = std::abs(numeric[i] - analytic[i]);
        double scale = std::max({std::abs(numeric[i]), std::abs(analytic[i]), abs_floor / rel});
        if (diff > rel * scale) return false;
    }
    return true;
}

// Direct enumeration of the batch-pairwise spread metric over feature rows.
inline double vector_spread_ref(const std::vector<std::vector<double>>& feats, const std::vector<int>& cls) {
    const std::size_t b = feats.size();
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            double dot = 0, ni = 0, nj = 0;
            for (std::size_t k = 0; k < feats[i].size(); ++k) {
                dot += feats[i][k] * feats[j][k];
                ni += feats[i][k] * feats[i][k];
                nj += feats[j][k] * feats[j][k];
            }
            double denom = std::sqrt(std::max(ni, 1e-24) * std::max(nj, 1e-24));
            double sim = std::min(1.0, std::max(-1.0, dot / denom));
            double d = std::acos(sim) / M_PI;
            total += (cls[i] == cls[j]) ? d : 1.0 - d;
        }
    return total / static_cast<double>(b * b);
}

// Reference EMA/variance recurrence.
struct StatsRef {
    std::array<double, 4> ema{}, var{};
    bool init = false;
    void push(const std::array<double, 4>& x, double d) {
        if (!init) {
            ema = x;
            var = {};
            init = true;
            return;
        }
        for (int i = 0; i < 4; ++i) {
            ema[i] = d * ema[i] + (1 - d) * x[i];
            double dev = x[i] - ema[i];
            var[i] = d * var[i] + (1 - d) * dev * dev;
        }
    }
};

// Reference Adam recurrence on a scalar parameter.
struct AdamRef {
    double m = 0, v = 0;
    long t = 0;
    double step(double theta, double g, double lr, double b1, double b2, double eps) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mh = m / (1 - std::pow(b1, t));
        double vh = v / (1 - std::pow(b2, t));
        return theta - lr * mh / (std::sqrt(vh) + eps);
    }
};

}  // namespace oracles
