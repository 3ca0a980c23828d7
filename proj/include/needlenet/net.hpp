#pragma once

#include "needlenet/episode.hpp"
#include "needlenet/ops.hpp"

#include <numeric>
#include <string>
#include <vector>

namespace needlenet {

// Architecture description for the selector-gated encoder/decoder.
//
// The encoder is a chain of conv stacks. All stacks but the last use 3x3
// kernels and are each followed by a selector gate and a 2x2 max pool; the
// last stack uses 1x1 kernels and is followed by its gate only. Dropout sits
// after the third stack onward. The decoder consumes the last stack's gated
// output and restores the input extent with one stride-2 transposed conv per
// pooling stage. The selector branch collapses the trunk with a global max
// pool before the 1x1 stack and projects its output to one weight per
// encoder filter.
struct NetworkConfig {
    int in_channels = 3;
    int input_h = 64;
    int input_w = 64;
    std::vector<int> stack_filters{8, 16, 16, 24};
    std::vector<int> convs_per_stack{2, 2, 2, 2};
    std::vector<int> kernel_sizes{3, 3, 3, 1};
    std::vector<int> decoder_filters{16, 16, 8};
    double dropout_rate = 0.15;
    double leaky_alpha = 0.02;
    std::uint64_t seed = 1;

    int num_stacks() const { return static_cast<int>(stack_filters.size()); }
    int pooling_stages() const { return num_stacks() - 1; }

    // Selector vector length: one weight per convolutional filter stack slot.
    Index feature_dim() const {
        return std::accumulate(stack_filters.begin(), stack_filters.end(), Index(0));
    }

    Index bottleneck_h() const { return Index(input_h) >> pooling_stages(); }
    Index bottleneck_w() const { return Index(input_w) >> pooling_stages(); }

    void validate() const {
        const int n = num_stacks();
        if (n < 2) throw std::invalid_argument("config: need at least 2 conv stacks, got " + std::to_string(n));
        if (static_cast<int>(convs_per_stack.size()) != n)
            throw std::invalid_argument("config: convs_per_stack has " + std::to_string(convs_per_stack.size()) +
                                        " entries for " + std::to_string(n) + " stacks");
        if (static_cast<int>(kernel_sizes.size()) != n)
            throw std::invalid_argument("config: kernel_sizes has " + std::to_string(kernel_sizes.size()) +
                                        " entries for " + std::to_string(n) + " stacks");
        for (int i = 0; i < n; ++i) {
            if (stack_filters[static_cast<std::size_t>(i)] < 1)
                throw std::invalid_argument("config: stack " + std::to_string(i + 1) + " has no filters");
            if (convs_per_stack[static_cast<std::size_t>(i)] < 1)
                throw std::invalid_argument("config: stack " + std::to_string(i + 1) + " has no convolutions");
            int k = kernel_sizes[static_cast<std::size_t>(i)];
            if (i + 1 < n && k != 3)
                throw std::invalid_argument("config: stack " + std::to_string(i + 1) + " kernel size must be 3, got " +
                                            std::to_string(k));
            if (i + 1 == n && k != 1)
                throw std::invalid_argument("config: final stack kernel size must be 1, got " + std::to_string(k));
        }
        if (in_channels < 1) throw std::invalid_argument("config: in_channels must be positive");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw std::invalid_argument("config: dropout_rate must be in [0,1), got " + std::to_string(dropout_rate));
        if (!(leaky_alpha > 0.0)) throw std::invalid_argument("config: leaky_alpha must be positive");
        int h = input_h, w = input_w;
        for (int s = 0; s < pooling_stages(); ++s) {
            if (h <= 0 || h % 2 != 0)
                throw std::invalid_argument("config: input_h " + std::to_string(input_h) + " is not even at pooled stage " +
                                            std::to_string(s + 1) + " (extent " + std::to_string(h) + ")");
            if (w <= 0 || w % 2 != 0)
                throw std::invalid_argument("config: input_w " + std::to_string(input_w) + " is not even at pooled stage " +
                                            std::to_string(s + 1) + " (extent " + std::to_string(w) + ")");
            h /= 2;
            w /= 2;
        }
        if (static_cast<int>(decoder_filters.size()) != pooling_stages())
            throw std::invalid_argument("config: decoder_filters has " + std::to_string(decoder_filters.size()) +
                                        " entries, need one per pooling stage (" + std::to_string(pooling_stages()) + ")");
        for (std::size_t i = 0; i < decoder_filters.size(); ++i)
            if (decoder_filters[i] < 1)
                throw std::invalid_argument("config: decoder stage " + std::to_string(i + 1) + " has no filters");
    }

    // Decoder widths mirroring the encoder stack filters in reverse.
    static std::vector<int> mirrored_decoder(const std::vector<int>& stack_filters) {
        std::vector<int> dec(stack_filters.begin(), stack_filters.end() - 1);
        std::reverse(dec.begin(), dec.end());
        return dec;
    }

    // Paper-scale preset: eight stacks whose filter counts sum to 4544.
    static NetworkConfig paper_scale() {
        NetworkConfig c;
        c.in_channels = 4;
        c.input_h = 256;
        c.input_w = 256;
        c.stack_filters = {64, 128, 256, 512, 512, 1024, 1024, 1024};
        c.convs_per_stack = std::vector<int>(8, 2);
        c.kernel_sizes = {3, 3, 3, 3, 3, 3, 3, 1};
        c.decoder_filters = mirrored_decoder(c.stack_filters);
        return c;
    }

    // Small configuration used by the test and acceptance suites.
    static NetworkConfig desk_scale() {
        NetworkConfig c;  // defaults above are the desk preset
        c.decoder_filters = mirrored_decoder(c.stack_filters);
        return c;
    }
};

// Per-filter gating vector derived from the needle image, partitioned into
// one slice per encoder stack.
template <typename S>
struct SelectorWeights {
    Tensor<S> values;             // [feature_dim]
    std::vector<Index> offsets;   // slice start per stack
    std::vector<Index> lengths;   // slice length per stack

    static SelectorWeights partitioned(const NetworkConfig& cfg, Tensor<S> values) {
        SelectorWeights w;
        w.values = std::move(values);
        Index off = 0;
        for (int f : cfg.stack_filters) {
            w.offsets.push_back(off);
            w.lengths.push_back(f);
            off += f;
        }
        if (w.values.numel() != off)
            throw std::invalid_argument("selector weights: vector length " + std::to_string(w.values.numel()) +
                                        " != total filter count " + std::to_string(off));
        return w;
    }

    static SelectorWeights constant(const NetworkConfig& cfg, S v) {
        return partitioned(cfg, Tensor<S>::full(Shape{cfg.feature_dim()}, v));
    }

    void check_against(const NetworkConfig& cfg) const {
        if (lengths.size() != cfg.stack_filters.size())
            throw std::invalid_argument("selector weights: " + std::to_string(lengths.size()) +
                                        " slices for " + std::to_string(cfg.stack_filters.size()) + " stacks");
        for (std::size_t i = 0; i < lengths.size(); ++i)
            if (lengths[i] != cfg.stack_filters[i])
                throw std::invalid_argument("selector weights: slice " + std::to_string(i + 1) + " has length " +
                                            std::to_string(lengths[i]) + ", stack has " +
                                            std::to_string(cfg.stack_filters[i]) + " filters");
    }
};

template <typename S>
struct EpisodeForwardResult {
    SelectorWeights<S> selector;
    Tensor<S> needle_features;  // raw pre-squash features, feeds the spread loss
    Tensor<S> belief_task1;     // gated pass over the haystack
    Tensor<S> belief_task2;     // ungated pass over the haystack
    Tensor<S> belief_task3;     // gated re-detection on the needle image
};

struct EpisodeForwardOptions {
    bool run_task2 = true;
    bool run_task3 = true;
};

// The Siamese encoder/decoder. Encoder parameters are shared between the
// needle and haystack passes; training mutates parameters single-writer,
// concurrent read-only inference is safe.
template <typename S>
class SegNet {
public:
    struct Conv {
        Tensor<S> kernel;  // [out,in,k,k]
        Tensor<S> bias;    // [out]
    };
    struct Deconv {
        Tensor<S> kernel;  // [in,out,2,2]
        Tensor<S> bias;    // [out]
    };

    NetworkConfig config;
    std::vector<std::vector<Conv>> encoder;  // per stack, per conv
    Tensor<S> selector_head_w;               // [F, last stack filters]
    Tensor<S> selector_head_b;               // [F]
    std::vector<Deconv> decoder;
    Conv output_head;  // 1x1 conv to a single belief channel

    std::vector<Tensor<S>> parameters() const {
        std::vector<Tensor<S>> ps;
        for (const auto& stack : encoder)
            for (const auto& c : stack) {
                ps.push_back(c.kernel);
                ps.push_back(c.bias);
            }
        ps.push_back(selector_head_w);
        ps.push_back(selector_head_b);
        for (const auto& d : decoder) {
            ps.push_back(d.kernel);
            ps.push_back(d.bias);
        }
        ps.push_back(output_head.kernel);
        ps.push_back(output_head.bias);
        return ps;
    }

    Index parameter_count() const {
        Index n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    SegNet clone() const {
        SegNet out;
        out.config = config;
        out.encoder.resize(encoder.size());
        for (std::size_t s = 0; s < encoder.size(); ++s)
            for (const auto& c : encoder[s])
                out.encoder[s].push_back({c.kernel.clone(), c.bias.clone()});
        out.selector_head_w = selector_head_w.clone();
        out.selector_head_b = selector_head_b.clone();
        for (const auto& d : decoder) out.decoder.push_back({d.kernel.clone(), d.bias.clone()});
        out.output_head = {output_head.kernel.clone(), output_head.bias.clone()};
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) const_cast<Tensor<S>&>(p).zero_grad();
    }

    // --- forward passes ---------------------------------------------------

    std::pair<SelectorWeights<S>, Tensor<S>> forward_needle(Tape<S>* tape, const Tensor<S>& needle,
                                                            bool training, RandomState rng) const {
        check_image(needle, "forward_needle");
        Tensor<S> x = run_trunk(tape, needle, nullptr, training, rng);
        x = ops::global_maxpool(tape, x);
        x = run_final_stack(tape, x, nullptr, training, rng);
        Tensor<S> flat = ops::flatten(tape, x);
        Tensor<S> feats = ops::dense(tape, selector_head_w, flat, selector_head_b);
        Tensor<S> squashed = ops::sigmoid(tape, feats);
        return {SelectorWeights<S>::partitioned(config, squashed), feats};
    }

    Tensor<S> forward_gated(Tape<S>* tape, const Tensor<S>& image, const SelectorWeights<S>& w,
                            bool training, RandomState rng) const {
        w.check_against(config);
        check_image(image, "forward_gated");
        Tensor<S> x = run_trunk(tape, image, &w, training, rng);
        x = run_final_stack(tape, x, &w, training, rng);
        return run_decoder(tape, x);
    }

    Tensor<S> forward_ungated(Tape<S>* tape, const Tensor<S>& image, bool training, RandomState rng) const {
        check_image(image, "forward_ungated");
        Tensor<S> x = run_trunk(tape, image, nullptr, training, rng);
        x = run_final_stack(tape, x, nullptr, training, rng);
        return run_decoder(tape, x);
    }

    // Runs all passes of one episode on a single tape so gradients flow
    // through the needle pass into the shared encoder. Dropout draws an
    // independent stream per pass.
    EpisodeForwardResult<S> episode_forward(Tape<S>* tape, const EpisodeT<S>& ep, bool training,
                                            const RandomState& rng,
                                            EpisodeForwardOptions opts = {}) const {
        EpisodeForwardResult<S> r;
        auto [w, feats] = forward_needle(tape, ep.needle_image, training, rng.fork({0}));
        r.selector = w;
        r.needle_features = feats;
        r.belief_task1 = forward_gated(tape, ep.haystack_image, w, training, rng.fork({1}));
        if (opts.run_task2) r.belief_task2 = forward_ungated(tape, ep.haystack_image, training, rng.fork({2}));
        if (opts.run_task3) r.belief_task3 = forward_gated(tape, ep.needle_image, w, training, rng.fork({3}));
        return r;
    }

private:
    void check_image(const Tensor<S>& img, const char* op) const {
        if (img.rank() != 3 || img.dim(0) != config.in_channels || img.dim(1) != config.input_h ||
            img.dim(2) != config.input_w)
            throw std::invalid_argument(std::string(op) + ": image " + shape_str(img.shape()) +
                                        " does not match configured [" + std::to_string(config.in_channels) + "," +
                                        std::to_string(config.input_h) + "," + std::to_string(config.input_w) + "]");
    }

    Tensor<S> run_stack_convs(Tape<S>* tape, Tensor<S> x, int stack) const {
        const int k = config.kernel_sizes[static_cast<std::size_t>(stack)];
        const int pad = (k - 1) / 2;
        for (const auto& c : encoder[static_cast<std::size_t>(stack)]) {
            x = ops::conv2d(tape, x, c.kernel, 1, pad);
            x = ops::add_channel_bias(tape, x, c.bias);
            x = ops::leaky_relu(tape, x, S(config.leaky_alpha));
        }
        return x;
    }

    Tensor<S> gate(Tape<S>* tape, Tensor<S> x, const SelectorWeights<S>* w, int stack) const {
        if (!w) return x;
        Tensor<S> slice = ops::slice1d(tape, w->values, w->offsets[static_cast<std::size_t>(stack)],
                                       w->lengths[static_cast<std::size_t>(stack)]);
        return ops::channel_scale(tape, x, slice);
    }

    // Stacks 1..n-1: convs, gate, pool, dropout from the third stack on.
    Tensor<S> run_trunk(Tape<S>* tape, Tensor<S> x, const SelectorWeights<S>* w, bool training,
                        RandomState& rng) const {
        for (int s = 0; s + 1 < config.num_stacks(); ++s) {
            x = run_stack_convs(tape, x, s);
            x = gate(tape, x, w, s);
            x = ops::maxpool2x2(tape, x);
            if (s >= 2) {
                RandomState dropout_rng = rng.fork({100 + static_cast<std::uint64_t>(s)});
                x = ops::dropout(tape, x, S(config.dropout_rate), training, dropout_rng);
            }
        }
        return x;
    }

    // The 1x1-kernel stack; spatial-extent agnostic.
    Tensor<S> run_final_stack(Tape<S>* tape, Tensor<S> x, const SelectorWeights<S>* w, bool training,
                              RandomState& rng) const {
        const int s = config.num_stacks() - 1;
        x = run_stack_convs(tape, x, s);
        x = gate(tape, x, w, s);
        if (s >= 2) {
            RandomState dropout_rng = rng.fork({100 + static_cast<std::uint64_t>(s)});
            x = ops::dropout(tape, x, S(config.dropout_rate), training, dropout_rng);
        }
        return x;
    }

    Tensor<S> run_decoder(Tape<S>* tape, Tensor<S> x) const {
        for (const auto& d : decoder) {
            x = ops::conv2d_transpose(tape, x, d.kernel, 2);
            x = ops::add_channel_bias(tape, x, d.bias);
            x = ops::leaky_relu(tape, x, S(config.leaky_alpha));
        }
        x = ops::conv2d(tape, x, output_head.kernel, 1, 0);
        x = ops::add_channel_bias(tape, x, output_head.bias);
        return ops::sigmoid(tape, x);
    }
};

// He initialization: kernels are zero-mean normal with variance 2/fan_in,
// biases start at zero. Draw order is fixed by parameter declaration order.
template <typename S>
SegNet<S> init_network(const NetworkConfig& config, RandomState rng) {
    config.validate();
    SegNet<S> net;
    net.config = config;
    const int n = config.num_stacks();
    int c_in = config.in_channels;
    for (int s = 0; s < n; ++s) {
        const int k = config.kernel_sizes[static_cast<std::size_t>(s)];
        const int c_out = config.stack_filters[static_cast<std::size_t>(s)];
        std::vector<typename SegNet<S>::Conv> stack;
        int cin = c_in;
        for (int j = 0; j < config.convs_per_stack[static_cast<std::size_t>(s)]; ++j) {
            stack.push_back({detail::he_kernel<S>(Shape{c_out, cin, k, k}, Index(cin) * k * k, rng),
                             detail::zero_param<S>(Shape{c_out})});
            cin = c_out;
        }
        net.encoder.push_back(std::move(stack));
        c_in = c_out;
    }
    const Index f = config.feature_dim();
    const int c_last = config.stack_filters.back();
    net.selector_head_w = detail::he_kernel<S>(Shape{f, c_last}, c_last, rng);
    net.selector_head_b = detail::zero_param<S>(Shape{f});
    int dec_in = c_last;
    for (int d = 0; d < config.pooling_stages(); ++d) {
        const int dec_out = config.decoder_filters[static_cast<std::size_t>(d)];
        net.decoder.push_back({detail::he_kernel<S>(Shape{dec_in, dec_out, 2, 2}, Index(dec_in) * 4, rng),
                               detail::zero_param<S>(Shape{dec_out})});
        dec_in = dec_out;
    }
    net.output_head = {detail::he_kernel<S>(Shape{1, dec_in, 1, 1}, dec_in, rng),
                       detail::zero_param<S>(Shape{1})};
    return net;
}

}  // namespace needlenet
