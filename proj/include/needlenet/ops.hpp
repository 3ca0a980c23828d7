#pragma once

#include "needlenet/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace needlenet {
namespace ops {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

namespace detail {

// Gathers conv patches: result is (C*k*k) x (Ho*Wo), one column per output
// pixel, zero-filled where the window leaves the image.
template <typename S>
MatCM<S> im2col(const Tensor<S>& x, int k, int stride, int pad, Index ho, Index wo) {
    const Index c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    MatCM<S> cols = MatCM<S>::Zero(c_in * k * k, ho * wo);
    const S* src = x.data();
    for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
            S* col = cols.col(oy * wo + ox).data();
            for (Index c = 0; c < c_in; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    Index iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) { col += k; continue; }
                    const S* row = src + (c * h + iy) * w;
                    for (int kx = 0; kx < k; ++kx) {
                        Index ix = ox * stride + kx - pad;
                        *col++ = (ix >= 0 && ix < w) ? row[ix] : S(0);
                    }
                }
            }
        }
    }
    return cols;
}

// Adjoint of im2col: scatter-adds columns back into an image.
template <typename S>
void col2im_add(const MatCM<S>& cols, int k, int stride, int pad, Index ho, Index wo,
                Tensor<S>& out_img, Array<S>* into_grad) {
    const Index c_in = out_img.dim(0), h = out_img.dim(1), w = out_img.dim(2);
    S* dst = into_grad ? into_grad->data() : out_img.data();
    for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
            const S* col = cols.col(oy * wo + ox).data();
            for (Index c = 0; c < c_in; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    Index iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) { col += k; continue; }
                    S* row = dst + (c * h + iy) * w;
                    for (int kx = 0; kx < k; ++kx) {
                        Index ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) row[ix] += *col;
                        ++col;
                    }
                }
            }
        }
    }
}

template <typename S>
void require_3d(const Tensor<S>& x, const char* op) {
    if (x.rank() != 3)
        throw std::invalid_argument(std::string(op) + ": expected a [C,H,W] tensor, got " + shape_str(x.shape()));
}

}  // namespace detail

// Cross-correlation of x[Cin,H,W] with kernels[Cout,Cin,k,k].
template <typename S>
Tensor<S> conv2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& kernels, int stride, int padding) {
    detail::require_3d(x, "conv2d");
    if (kernels.rank() != 4)
        throw std::invalid_argument("conv2d: expected kernels [Cout,Cin,k,k], got " + shape_str(kernels.shape()));
    const Index c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index c_out = kernels.dim(0);
    const int k = static_cast<int>(kernels.dim(2));
    if (k != 1 && k != 3)
        throw std::invalid_argument("conv2d: kernel size must be 1 or 3, got " + std::to_string(k));
    if (kernels.dim(2) != kernels.dim(3))
        throw std::invalid_argument("conv2d: kernels must be square, got " + shape_str(kernels.shape()));
    if (kernels.dim(1) != c_in)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(c_in) +
                                    " != kernel input channels " + std::to_string(kernels.dim(1)));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    if ((h + 2 * padding - k) < 0 || (h + 2 * padding - k) % stride != 0)
        throw std::invalid_argument("conv2d: height " + std::to_string(h) + " incompatible with kernel/stride/padding");
    if ((w + 2 * padding - k) < 0 || (w + 2 * padding - k) % stride != 0)
        throw std::invalid_argument("conv2d: width " + std::to_string(w) + " incompatible with kernel/stride/padding");
    const Index ho = (h + 2 * padding - k) / stride + 1;
    const Index wo = (w + 2 * padding - k) / stride + 1;

    Tensor<S> y(Shape{c_out, ho, wo});
    Eigen::Map<const MatRM<S>> kmat(kernels.data(), c_out, c_in * k * k);
    Eigen::Map<MatRM<S>> ymat(y.data(), c_out, ho * wo);

    const bool trivial = (k == 1 && stride == 1 && padding == 0);
    std::shared_ptr<MatCM<S>> cols;
    if (trivial) {
        Eigen::Map<const MatRM<S>> xmat(x.data(), c_in, h * w);
        ymat.noalias() = kmat * xmat;
    } else {
        cols = std::make_shared<MatCM<S>>(detail::im2col(x, k, stride, padding, ho, wo));
        ymat.noalias() = kmat * (*cols);
    }

    if (should_record(tape, {x.requires_grad(), kernels.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, kc = kernels, yc = y;
        tape->record([xc, kc, yc, cols, stride, padding, k, ho, wo]() mutable {
            if (!yc.has_grad()) return;
            const Index c_out = kc.dim(0), c_in = xc.dim(0);
            Eigen::Map<const MatRM<S>> gy(yc.grad_view().data(), c_out, ho * wo);
            if (kc.requires_grad()) {
                Eigen::Map<MatRM<S>> gk(kc.grad().data(), c_out, c_in * k * k);
                if (cols) gk.noalias() += gy * cols->transpose();
                else {
                    Eigen::Map<const MatRM<S>> xmat(xc.data(), c_in, xc.dim(1) * xc.dim(2));
                    gk.noalias() += gy * xmat.transpose();
                }
            }
            if (xc.requires_grad()) {
                Eigen::Map<const MatRM<S>> kmat(kc.data(), c_out, c_in * k * k);
                if (cols) {
                    MatCM<S> gcols = kmat.transpose() * gy;
                    detail::col2im_add(gcols, k, stride, padding, ho, wo, xc, &xc.grad());
                } else {
                    Eigen::Map<MatRM<S>> gx(xc.grad().data(), c_in, xc.dim(1) * xc.dim(2));
                    gx.noalias() += kmat.transpose() * gy;
                }
            }
        });
    }
    return y;
}

// Fractionally strided convolution of x[Cin,H,W] with kernels[Cin,Cout,k,k];
// output is [Cout, H*stride, W*stride]. Adjoint of conv2d with the same
// kernel/stride and implied padding (k - stride)/2, so it inverts the conv2d
// shape map exactly.
template <typename S>
Tensor<S> conv2d_transpose(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& kernels, int stride) {
    detail::require_3d(x, "conv2d_transpose");
    if (kernels.rank() != 4)
        throw std::invalid_argument("conv2d_transpose: expected kernels [Cin,Cout,k,k], got " + shape_str(kernels.shape()));
    const Index c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index c_out = kernels.dim(1);
    const int k = static_cast<int>(kernels.dim(2));
    if (kernels.dim(2) != kernels.dim(3))
        throw std::invalid_argument("conv2d_transpose: kernels must be square, got " + shape_str(kernels.shape()));
    if (kernels.dim(0) != c_in)
        throw std::invalid_argument("conv2d_transpose: input channels " + std::to_string(c_in) +
                                    " != kernel input channels " + std::to_string(kernels.dim(0)));
    if (stride < 1) throw std::invalid_argument("conv2d_transpose: stride must be >= 1");
    if (k < stride || (k - stride) % 2 != 0)
        throw std::invalid_argument("conv2d_transpose: kernel " + std::to_string(k) + " and stride " +
                                    std::to_string(stride) + " must differ by an even non-negative amount");
    const int pad = (k - stride) / 2;
    const Index ho = h * stride, wo = w * stride;

    Tensor<S> y(Shape{c_out, ho, wo});
    Eigen::Map<const MatRM<S>> kmat(kernels.data(), c_in, c_out * k * k);
    Eigen::Map<const MatRM<S>> xmat(x.data(), c_in, h * w);
    MatCM<S> cols = kmat.transpose() * xmat;
    detail::col2im_add(cols, k, stride, pad, h, w, y, static_cast<Array<S>*>(nullptr));

    if (should_record(tape, {x.requires_grad(), kernels.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, kc = kernels, yc = y;
        tape->record([xc, kc, yc, stride, pad, k]() mutable {
            if (!yc.has_grad()) return;
            const Index c_in = xc.dim(0), c_out = kc.dim(1);
            const Index h = xc.dim(1), w = xc.dim(2);
            Tensor<S> gwrap(Shape{c_out, yc.dim(1), yc.dim(2)});
            gwrap.value() = yc.grad_view();
            MatCM<S> gcols = detail::im2col(gwrap, k, stride, pad, h, w);
            if (xc.requires_grad()) {
                Eigen::Map<const MatRM<S>> kmat(kc.data(), c_in, c_out * k * k);
                Eigen::Map<MatRM<S>> gx(xc.grad().data(), c_in, h * w);
                gx.noalias() += kmat * gcols;
            }
            if (kc.requires_grad()) {
                Eigen::Map<const MatRM<S>> xmat(xc.data(), c_in, h * w);
                Eigen::Map<MatRM<S>> gk(kc.grad().data(), c_in, c_out * k * k);
                gk.noalias() += xmat * gcols.transpose();
            }
        });
    }
    return y;
}

// 2x2 max pooling; gradient routes to the first argmax cell in row-major order.
template <typename S>
Tensor<S> maxpool2x2(Tape<S>* tape, const Tensor<S>& x) {
    detail::require_3d(x, "maxpool2x2");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 != 0) throw std::invalid_argument("maxpool2x2: height " + std::to_string(h) + " is odd");
    if (w % 2 != 0) throw std::invalid_argument("maxpool2x2: width " + std::to_string(w) + " is odd");
    Tensor<S> y(Shape{c, h / 2, w / 2});
    auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(y.numel()));
    const S* src = x.data();
    S* dst = y.data();
    Index oi = 0;
    for (Index ch = 0; ch < c; ++ch) {
        for (Index oy = 0; oy < h / 2; ++oy) {
            for (Index ox = 0; ox < w / 2; ++ox, ++oi) {
                Index base = (ch * h + 2 * oy) * w + 2 * ox;
                Index best = base;
                S bv = src[base];
                for (Index dy = 0; dy < 2; ++dy)
                    for (Index dx = 0; dx < 2; ++dx) {
                        Index idx = base + dy * w + dx;
                        if (src[idx] > bv) { bv = src[idx]; best = idx; }
                    }
                dst[oi] = bv;
                (*argmax)[static_cast<std::size_t>(oi)] = best;
            }
        }
    }
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc, argmax]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            auto& gx = xc.grad();
            const auto& gy = yc.grad_view();
            for (Index i = 0; i < yc.numel(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += gy[i];
        });
    }
    return y;
}

// Collapses [C,H,W] to [C,1,1] by per-channel max; same tie rule as maxpool2x2.
template <typename S>
Tensor<S> global_maxpool(Tape<S>* tape, const Tensor<S>& x) {
    detail::require_3d(x, "global_maxpool");
    const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor<S> y(Shape{c, 1, 1});
    auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c));
    for (Index ch = 0; ch < c; ++ch) {
        const S* row = x.data() + ch * hw;
        Index best = 0;
        for (Index i = 1; i < hw; ++i)
            if (row[i] > row[best]) best = i;
        y.value()[ch] = row[best];
        (*argmax)[static_cast<std::size_t>(ch)] = ch * hw + best;
    }
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc, argmax]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            auto& gx = xc.grad();
            const auto& gy = yc.grad_view();
            for (Index ch = 0; ch < yc.numel(); ++ch) gx[(*argmax)[static_cast<std::size_t>(ch)]] += gy[ch];
        });
    }
    return y;
}

template <typename S>
Tensor<S> leaky_relu(Tape<S>* tape, const Tensor<S>& x, S alpha) {
    Tensor<S> y(x.shape());
    y.value() = (x.value() >= S(0)).select(x.value(), alpha * x.value());
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc, alpha]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad() += (xc.value() >= S(0)).select(yc.grad_view(), alpha * yc.grad_view());
        });
    }
    return y;
}

template <typename S>
Tensor<S> sigmoid(Tape<S>* tape, const Tensor<S>& x) {
    Tensor<S> y(x.shape());
    y.value() = S(1) / (S(1) + (-x.value()).exp());
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad() += yc.grad_view() * yc.value() * (S(1) - yc.value());
        });
    }
    return y;
}

// Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).
// Identity when not training or rate == 0.
template <typename S>
Tensor<S> dropout(Tape<S>* tape, const Tensor<S>& x, S rate, bool training, RandomState& rng) {
    if (!(rate >= S(0) && rate < S(1)))
        throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == S(0)) return x;
    Tensor<S> y(x.shape());
    auto mask = std::make_shared<Array<S>>(x.numel());
    const S scale = S(1) / (S(1) - rate);
    for (Index i = 0; i < x.numel(); ++i)
        (*mask)[i] = (rng.uniform() >= static_cast<double>(rate)) ? scale : S(0);
    y.value() = x.value() * (*mask);
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc, mask]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad() += yc.grad_view() * (*mask);
        });
    }
    return y;
}

// Multiplies channel c of x[C,H,W] by weights[c].
template <typename S>
Tensor<S> channel_scale(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& weights) {
    detail::require_3d(x, "channel_scale");
    const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
    if (weights.numel() != c)
        throw std::invalid_argument("channel_scale: weight length " + std::to_string(weights.numel()) +
                                    " != channel count " + std::to_string(c));
    Tensor<S> y(x.shape());
    for (Index ch = 0; ch < c; ++ch)
        y.value().segment(ch * hw, hw) = x.value().segment(ch * hw, hw) * weights.value()[ch];
    if (should_record(tape, {x.requires_grad(), weights.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, wc = weights, yc = y;
        tape->record([xc, wc, yc, c, hw]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad_view();
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                for (Index ch = 0; ch < c; ++ch)
                    gx.segment(ch * hw, hw) += gy.segment(ch * hw, hw) * wc.value()[ch];
            }
            if (wc.requires_grad()) {
                auto& gw = wc.grad();
                for (Index ch = 0; ch < c; ++ch)
                    gw[ch] += (gy.segment(ch * hw, hw) * xc.value().segment(ch * hw, hw)).sum();
            }
        });
    }
    return y;
}

// Adds bias[c] to every pixel of channel c.
template <typename S>
Tensor<S> add_channel_bias(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& bias) {
    detail::require_3d(x, "add_channel_bias");
    const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
    if (bias.numel() != c)
        throw std::invalid_argument("add_channel_bias: bias length " + std::to_string(bias.numel()) +
                                    " != channel count " + std::to_string(c));
    Tensor<S> y(x.shape());
    for (Index ch = 0; ch < c; ++ch)
        y.value().segment(ch * hw, hw) = x.value().segment(ch * hw, hw) + bias.value()[ch];
    if (should_record(tape, {x.requires_grad(), bias.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, bc = bias, yc = y;
        tape->record([xc, bc, yc, c, hw]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad_view();
            if (xc.requires_grad()) xc.grad() += gy;
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (Index ch = 0; ch < c; ++ch) gb[ch] += gy.segment(ch * hw, hw).sum();
            }
        });
    }
    return y;
}

// Affine map W x + b with W[M,N], x[N], b[M].
template <typename S>
Tensor<S> dense(Tape<S>* tape, const Tensor<S>& weight, const Tensor<S>& x, const Tensor<S>& bias) {
    if (weight.rank() != 2)
        throw std::invalid_argument("dense: expected weight [M,N], got " + shape_str(weight.shape()));
    const Index m = weight.dim(0), n = weight.dim(1);
    if (x.numel() != n)
        throw std::invalid_argument("dense: input length " + std::to_string(x.numel()) +
                                    " != weight columns " + std::to_string(n));
    if (bias.numel() != m)
        throw std::invalid_argument("dense: bias length " + std::to_string(bias.numel()) +
                                    " != weight rows " + std::to_string(m));
    Tensor<S> y(Shape{m});
    Eigen::Map<const MatRM<S>> wm(weight.data(), m, n);
    y.value().matrix() = wm * x.value().matrix() + bias.value().matrix();
    if (should_record(tape, {weight.requires_grad(), x.requires_grad(), bias.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> wc = weight, xc = x, bc = bias, yc = y;
        tape->record([wc, xc, bc, yc, m, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad_view();
            if (wc.requires_grad()) {
                Eigen::Map<MatRM<S>> gw(wc.grad().data(), m, n);
                gw.noalias() += gy.matrix() * xc.value().matrix().transpose();
            }
            if (xc.requires_grad()) {
                Eigen::Map<const MatRM<S>> wm(wc.data(), m, n);
                xc.grad().matrix() += wm.transpose() * gy.matrix();
            }
            if (bc.requires_grad()) bc.grad() += gy;
        });
    }
    return y;
}

// Numerically stable softmax over a 1-d tensor.
template <typename S>
Tensor<S> softmax(Tape<S>* tape, const Tensor<S>& x) {
    Tensor<S> y(x.shape());
    S mx = x.value().maxCoeff();
    y.value() = (x.value() - mx).exp();
    y.value() /= y.value().sum();
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            const auto& gy = yc.grad_view();
            S dot = (gy * yc.value()).sum();
            xc.grad() += yc.value() * (gy - dot);
        });
    }
    return y;
}

// Contiguous 1-d slice; gradient scatters back into the source range.
template <typename S>
Tensor<S> slice1d(Tape<S>* tape, const Tensor<S>& x, Index offset, Index len) {
    if (offset < 0 || len < 0 || offset + len > x.numel())
        throw std::invalid_argument("slice1d: range [" + std::to_string(offset) + "," +
                                    std::to_string(offset + len) + ") outside tensor of " +
                                    std::to_string(x.numel()) + " elements");
    Tensor<S> y(Shape{len});
    y.value() = x.value().segment(offset, len);
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc, offset, len]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad().segment(offset, len) += yc.grad_view();
        });
    }
    return y;
}

// Picks arbitrary elements of a 1-d tensor; gradient scatter-adds back.
template <typename S>
Tensor<S> gather1d(Tape<S>* tape, const Tensor<S>& x, std::vector<Index> indices) {
    for (Index i : indices)
        if (i < 0 || i >= x.numel())
            throw std::invalid_argument("gather1d: index " + std::to_string(i) + " outside tensor of " +
                                        std::to_string(x.numel()) + " elements");
    Tensor<S> y(Shape{static_cast<Index>(indices.size())});
    for (std::size_t k = 0; k < indices.size(); ++k) y.value()[static_cast<Index>(k)] = x.value()[indices[k]];
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        auto idx = std::make_shared<std::vector<Index>>(std::move(indices));
        tape->record([xc, yc, idx]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            auto& gx = xc.grad();
            for (std::size_t k = 0; k < idx->size(); ++k) gx[(*idx)[k]] += yc.grad_view()[static_cast<Index>(k)];
        });
    }
    return y;
}

// Shape change with pass-through gradient.
template <typename S>
Tensor<S> reshape(Tape<S>* tape, const Tensor<S>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor<S> y(std::move(shape));
    y.value() = x.value();
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad() += yc.grad_view();
        });
    }
    return y;
}

template <typename S>
Tensor<S> flatten(Tape<S>* tape, const Tensor<S>& x) {
    return reshape(tape, x, Shape{x.numel()});
}

namespace detail {

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> binary_elementwise(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b, const char* op,
                             FwdFn fwd, BwdFn bwd) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    Tensor<S> y(a.shape());
    fwd(a, b, y);
    if (should_record(tape, {a.requires_grad(), b.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> ac = a, bc = b, yc = y;
        tape->record([ac, bc, yc, bwd]() mutable {
            if (!yc.has_grad()) return;
            bwd(ac, bc, yc);
        });
    }
    return y;
}

}  // namespace detail

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_elementwise<S>(
        tape, a, b, "add",
        [](const Tensor<S>& x, const Tensor<S>& y, Tensor<S>& out) { out.value() = x.value() + y.value(); },
        [](Tensor<S>& x, Tensor<S>& y, Tensor<S>& out) {
            if (x.requires_grad()) x.grad() += out.grad_view();
            if (y.requires_grad()) y.grad() += out.grad_view();
        });
}

template <typename S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_elementwise<S>(
        tape, a, b, "sub",
        [](const Tensor<S>& x, const Tensor<S>& y, Tensor<S>& out) { out.value() = x.value() - y.value(); },
        [](Tensor<S>& x, Tensor<S>& y, Tensor<S>& out) {
            if (x.requires_grad()) x.grad() += out.grad_view();
            if (y.requires_grad()) y.grad() -= out.grad_view();
        });
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_elementwise<S>(
        tape, a, b, "mul",
        [](const Tensor<S>& x, const Tensor<S>& y, Tensor<S>& out) { out.value() = x.value() * y.value(); },
        [](Tensor<S>& x, Tensor<S>& y, Tensor<S>& out) {
            if (x.requires_grad()) x.grad() += out.grad_view() * y.value();
            if (y.requires_grad()) y.grad() += out.grad_view() * x.value();
        });
}

template <typename S>
Tensor<S> divide(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_elementwise<S>(
        tape, a, b, "divide",
        [](const Tensor<S>& x, const Tensor<S>& y, Tensor<S>& out) { out.value() = x.value() / y.value(); },
        [](Tensor<S>& x, Tensor<S>& y, Tensor<S>& out) {
            if (x.requires_grad()) x.grad() += out.grad_view() / y.value();
            if (y.requires_grad()) y.grad() -= out.grad_view() * out.value() / y.value();
        });
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& x, S c) {
    Tensor<S> y(x.shape());
    y.value() = x.value() * c;
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc, c]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad() += yc.grad_view() * c;
        });
    }
    return y;
}

template <typename S>
Tensor<S> add_const(Tape<S>* tape, const Tensor<S>& x, S c) {
    Tensor<S> y(x.shape());
    y.value() = x.value() + c;
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad() += yc.grad_view();
        });
    }
    return y;
}

template <typename S>
Tensor<S> sum(Tape<S>* tape, const Tensor<S>& x) {
    Tensor<S> y = Tensor<S>::scalar(x.value().sum());
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.grad() += yc.grad_view()[0];
        });
    }
    return y;
}

// x * log(x) with the convention 0 log 0 = 0; inputs are clamped away from
// zero on the gradient path only.
template <typename S>
Tensor<S> xlogx(Tape<S>* tape, const Tensor<S>& x) {
    Tensor<S> y(x.shape());
    for (Index i = 0; i < x.numel(); ++i) {
        S v = x.value()[i];
        y.value()[i] = v <= S(0) ? S(0) : v * std::log(v);
    }
    if (should_record(tape, {x.requires_grad()})) {
        y.set_requires_grad(true);
        Tensor<S> xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            auto& gx = xc.grad();
            const auto& gy = yc.grad_view();
            for (Index i = 0; i < xc.numel(); ++i) {
                S v = std::max(xc.value()[i], S(1e-30));
                gx[i] += gy[i] * (std::log(v) + S(1));
            }
        });
    }
    return y;
}

}  // namespace ops

namespace detail {

// He-initialized parameter: zero-mean normal with variance 2/fan_in.
template <typename S>
Tensor<S> he_kernel(Shape shape, Index fan_in, RandomState& rng) {
    Tensor<S> t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Index i = 0; i < t.numel(); ++i) t.value()[i] = static_cast<S>(rng.normal() * stddev);
    t.set_requires_grad(true);
    return t;
}

template <typename S>
Tensor<S> zero_param(Shape shape) {
    Tensor<S> t(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail
}  // namespace needlenet
