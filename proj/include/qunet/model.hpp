#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "qunet/ops.hpp"
#include "qunet/quant.hpp"
#include "qunet/tensor.hpp"

namespace qunet {

struct UNetConfig {
    int in_channels = 1;
    int base_channels = 64;  // desk-scale runs use 8
    int depth = 4;
    int out_channels = 1;
    bool quantized = true;
    int act_bits = 8;
    double init_bitwidth = 4.0;

    bool operator==(const UNetConfig&) const = default;
};

enum class LayerKind { Conv3x3, Conv1x1, UpConv };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv3x3: return "conv3x3";
        case LayerKind::Conv1x1: return "conv1x1";
        case LayerKind::UpConv: return "upconv";
    }
    return "?";
}

// One quantized weight layer: kernel + bias leaves, the learnable bitwidth,
// and the EMA state of the layer's *output* activation site (post-ReLU for
// block convs, post-upsample for upconvs, pre-sigmoid signed for the head).
template <class T>
struct QuantLayer {
    std::string name;
    LayerKind kind = LayerKind::Conv3x3;
    Var<T> weight;
    Var<T> bias;
    QuantParams<T> qp;
    ActQuantState<T> act;
};

template <class T>
struct QuantUNet {
    UNetConfig cfg;
    std::vector<QuantLayer<T>> layers;
    ActQuantState<T> input_act;
    ActQuantState<T> output_act;  // sigmoid-output site

    QuantLayer<T>& layer(const std::string& name) {
        for (auto& l : layers)
            if (l.name == name) return l;
        throw std::invalid_argument("no such layer: " + name);
    }
};

namespace detail {

template <class T>
Var<T> init_kernel(Rng& rng, std::vector<int64_t> shape, int64_t fan_in) {
    Tensor<T> w(std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.data) v = T(rng.gaussian() * std);
    return make_leaf(std::move(w), true);
}

}  // namespace detail

// Build the Table-1 architecture: depth encoder blocks with channel doubling,
// bottleneck, transpose-conv + skip-concat decoder, 1x1 sigmoid head.
// Kaiming fan-in init for kernels, zero biases; deterministic for a seed.
template <class T>
QuantUNet<T> build_unet(const UNetConfig& cfg, uint64_t seed) {
    if (cfg.base_channels < 1)
        throw std::invalid_argument("config: base_channels must be >= 1");
    if (cfg.depth < 1 || cfg.depth > 8)
        throw std::invalid_argument("config: depth out of range");
    if (cfg.act_bits < 2 || cfg.act_bits > 8)
        throw std::invalid_argument("config: act_bits must be in [2,8]");
    if (cfg.in_channels < 1 || cfg.out_channels < 1)
        throw std::invalid_argument("config: channel counts must be >= 1");

    QuantUNet<T> m;
    m.cfg = cfg;
    Rng rng(seed);
    const int d = cfg.depth;
    std::vector<int64_t> ch(static_cast<size_t>(d) + 1);
    for (int i = 0; i <= d; ++i) ch[static_cast<size_t>(i)] = int64_t(cfg.base_channels) << i;

    auto add_conv = [&](const std::string& name, int64_t ci, int64_t co, int64_t k) {
        QuantLayer<T> l;
        l.name = name;
        l.kind = k == 1 ? LayerKind::Conv1x1 : LayerKind::Conv3x3;
        l.weight = detail::init_kernel<T>(rng, {co, ci, k, k}, ci * k * k);
        l.bias = make_leaf(Tensor<T>::zeros({co}), true);
        l.qp = QuantParams<T>::init(T(cfg.init_bitwidth));
        m.layers.push_back(std::move(l));
    };
    auto add_upconv = [&](const std::string& name, int64_t ci, int64_t co) {
        QuantLayer<T> l;
        l.name = name;
        l.kind = LayerKind::UpConv;
        // stride 2, kernel 2: each output pixel sums ci products
        l.weight = detail::init_kernel<T>(rng, {ci, co, 2, 2}, ci);
        l.bias = make_leaf(Tensor<T>::zeros({co}), true);
        l.qp = QuantParams<T>::init(T(cfg.init_bitwidth));
        m.layers.push_back(std::move(l));
    };

    int64_t prev = cfg.in_channels;
    for (int i = 0; i < d; ++i) {
        const std::string base = "enc" + std::to_string(i + 1);
        add_conv(base + ".conv1", prev, ch[static_cast<size_t>(i)], 3);
        add_conv(base + ".conv2", ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)], 3);
        prev = ch[static_cast<size_t>(i)];
    }
    add_conv("bottleneck.conv1", ch[static_cast<size_t>(d) - 1], ch[static_cast<size_t>(d)], 3);
    add_conv("bottleneck.conv2", ch[static_cast<size_t>(d)], ch[static_cast<size_t>(d)], 3);
    for (int i = d - 1; i >= 0; --i) {
        const std::string idx = std::to_string(i + 1);
        add_upconv("up" + idx, ch[static_cast<size_t>(i) + 1], ch[static_cast<size_t>(i)]);
        add_conv("dec" + idx + ".conv1", 2 * ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)], 3);
        add_conv("dec" + idx + ".conv2", ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)], 3);
    }
    add_conv("outseg", ch[0], cfg.out_channels, 1);
    return m;
}

template <class T>
std::vector<std::string> quant_layer_names(const QuantUNet<T>& m) {
    std::vector<std::string> names;
    names.reserve(m.layers.size());
    for (const auto& l : m.layers) names.push_back(l.name);
    return names;
}

template <class T>
int64_t param_count(const QuantUNet<T>& m) {
    int64_t n = 0;
    for (const auto& l : m.layers) n += l.weight->value.numel() + l.bias->value.numel();
    return n;
}

template <class T>
std::vector<QuantParams<T>*> bitwidth_params(QuantUNet<T>& m) {
    std::vector<QuantParams<T>*> ps;
    ps.reserve(m.layers.size());
    for (auto& l : m.layers) ps.push_back(&l.qp);
    return ps;
}

template <class T>
void freeze_act_states(QuantUNet<T>& m, bool frozen = true) {
    m.input_act.frozen = frozen;
    m.output_act.frozen = frozen;
    for (auto& l : m.layers) l.act.frozen = frozen;
}

namespace detail {

// Grid step (real units per integer) of an unsigned 2^b-1 site or a signed
// symmetric site with Q = 2^(b-1)-1 levels per side.
template <class T>
inline T unsigned_step(const ActQuantState<T>& st, int q_max) {
    return std::max(st.running_max, T(kQuantEps)) / T(q_max);
}
template <class T>
inline T signed_step(const ActQuantState<T>& st, int q_hi) {
    return std::max(st.running_max, T(kQuantEps)) / T(q_hi);
}

// Quantized conv step: fake-quant the kernel, snap the bias onto the
// s_x*s_w accumulator grid, then convolve.
template <class T>
Var<T> qconv(const Var<T>& x, QuantLayer<T>& l, T in_step, int padding) {
    auto [wq, meta] = fake_quant_weight(l.weight, l.qp);
    Var<T> bq = quantize_bias(l.bias, static_cast<double>(in_step) * meta.scale);
    return conv2d(x, wq, bq, padding);
}

template <class T>
Var<T> qupconv(const Var<T>& x, QuantLayer<T>& l, T in_step) {
    auto [wq, meta] = fake_quant_weight(l.weight, l.qp);
    Var<T> bq = quantize_bias(l.bias, static_cast<double>(in_step) * meta.scale);
    return conv_transpose2d(x, wq, bq);
}

}  // namespace detail

// Forward pass. In quantized mode every conv consumes fake-quantized weights
// and a grid-snapped bias, and every activation site (input, per-layer
// output, sigmoid output) passes through its fake-quantizer; concat branches
// are re-quantized to the coarser of the two branch scales first. Output is
// a probability map with the input's spatial dims.
//
// training=true runs EMA updates and records a tape; training=false is
// tape-free. calibrate_unset seeds any never-observed running_max directly
// from this input (used before export).
template <class T>
Var<T> forward(QuantUNet<T>& m, const Tensor<T>& x, bool training, bool calibrate_unset = false) {
    if (x.rank() != 4 || x.shape[1] != m.cfg.in_channels)
        throw std::invalid_argument("forward: expected [N," + std::to_string(m.cfg.in_channels) +
                                    ",H,W] input, got " + shape_str(x));
    const int64_t div = int64_t(1) << m.cfg.depth;
    if (x.shape[2] % div != 0 || x.shape[3] % div != 0)
        throw std::invalid_argument("forward: spatial dims must be divisible by " +
                                    std::to_string(div) + ", got " + shape_str(x));

    std::unique_ptr<NoGradGuard> guard;
    if (!training) guard = std::make_unique<NoGradGuard>();

    const int d = m.cfg.depth;
    const int qmax = (1 << m.cfg.act_bits) - 1;        // unsigned sites
    const int qhi = (1 << (m.cfg.act_bits - 1)) - 1;   // signed sites
    const bool q = m.cfg.quantized;
    size_t li = 0;  // walks m.layers in canonical order

    Var<T> cur = make_const(x);
    T cur_step = T(0);
    if (q) {
        cur = fake_quant_activation(cur, m.cfg.act_bits, m.input_act, training, calibrate_unset);
        cur_step = detail::unsigned_step(m.input_act, qmax);
    }

    auto block = [&](Var<T> in, T in_step) -> std::pair<Var<T>, T> {
        for (int c = 0; c < 2; ++c) {
            QuantLayer<T>& l = m.layers[li++];
            const int pad = l.kind == LayerKind::Conv1x1 ? 0 : 1;
            if (q) {
                in = relu(detail::qconv(in, l, in_step, pad));
                in = fake_quant_activation(in, m.cfg.act_bits, l.act, training, calibrate_unset);
                in_step = detail::unsigned_step(l.act, qmax);
            } else {
                in = relu(conv2d(in, l.weight, l.bias, pad));
            }
        }
        return {in, in_step};
    };

    std::vector<Var<T>> skips;
    std::vector<T> skip_step;
    for (int i = 0; i < d; ++i) {
        auto [out, st] = block(cur, cur_step);
        skips.push_back(out);
        skip_step.push_back(st);
        cur = maxpool2d(out);
        cur_step = st;
    }
    {
        auto [out, st] = block(cur, cur_step);
        cur = out;
        cur_step = st;
    }
    for (int i = d - 1; i >= 0; --i) {
        QuantLayer<T>& up = m.layers[li++];
        if (q) {
            cur = detail::qupconv(cur, up, cur_step);
            // upconv outputs can be negative: signed symmetric site
            cur = fake_quant_signed(cur, m.cfg.act_bits, up.act, training, calibrate_unset);
            const T up_step = detail::signed_step(up.act, qhi);
            // unify branch grids before concat; the coarser step avoids clipping
            const T common = std::max(up_step, skip_step[static_cast<size_t>(i)]);
            Var<T> a = requantize_step(cur, common, -qhi, qhi);
            Var<T> b = requantize_step(skips[static_cast<size_t>(i)], common, 0, qmax);
            cur = concat_channels(a, b);
            cur_step = common;
        } else {
            cur = conv_transpose2d(cur, up.weight, up.bias);
            cur = concat_channels(cur, skips[static_cast<size_t>(i)]);
        }
        auto [out, st2] = block(cur, cur_step);
        cur = out;
        cur_step = st2;
    }

    QuantLayer<T>& head = m.layers[li++];
    if (q) {
        cur = detail::qconv(cur, head, cur_step, 0);
        cur = fake_quant_signed(cur, m.cfg.act_bits, head.act, training, calibrate_unset);
        cur = sigmoid(cur);
        cur = fake_quant_activation(cur, m.cfg.act_bits, m.output_act, training, calibrate_unset);
    } else {
        cur = sigmoid(conv2d(cur, head.weight, head.bias, 0));
    }
    return cur;
}

// Grid step of the input each layer consumes, in canonical layer order,
// from the current (frozen) EMA states. Mirrors the wiring forward() uses.
template <class T>
std::vector<T> layer_input_steps(const QuantUNet<T>& m) {
    const int d = m.cfg.depth;
    const int qmax = (1 << m.cfg.act_bits) - 1;
    const int qhi = (1 << (m.cfg.act_bits - 1)) - 1;
    std::vector<T> r;
    r.reserve(m.layers.size());
    size_t li = 0;
    T cur = detail::unsigned_step(m.input_act, qmax);
    std::vector<T> skip_step;
    auto block = [&](T in) {
        for (int c = 0; c < 2; ++c) {
            r.push_back(in);
            in = detail::unsigned_step(m.layers[li++].act, qmax);
        }
        return in;
    };
    for (int i = 0; i < d; ++i) {
        cur = block(cur);
        skip_step.push_back(cur);
    }
    cur = block(cur);
    for (int i = d - 1; i >= 0; --i) {
        r.push_back(cur);  // upconv input
        T up_step = detail::signed_step(m.layers[li++].act, qhi);
        cur = block(std::max(up_step, skip_step[static_cast<size_t>(i)]));
    }
    r.push_back(cur);  // head input
    ++li;
    return r;
}

// Lossless precision widening/narrowing of a whole model (weights, bitwidth
// params, EMA states). float -> double is exact.
template <class To, class From>
QuantUNet<To> model_cast(const QuantUNet<From>& m) {
    QuantUNet<To> out;
    out.cfg = m.cfg;
    out.input_act = {To(m.input_act.running_max), To(m.input_act.momentum), m.input_act.frozen};
    out.output_act = {To(m.output_act.running_max), To(m.output_act.momentum), m.output_act.frozen};
    out.layers.reserve(m.layers.size());
    for (const auto& l : m.layers) {
        QuantLayer<To> o;
        o.name = l.name;
        o.kind = l.kind;
        Tensor<To> w(l.weight->value.shape);
        for (int64_t i = 0; i < w.numel(); ++i)
            w.data[static_cast<size_t>(i)] = To(l.weight->value.data[static_cast<size_t>(i)]);
        Tensor<To> b(l.bias->value.shape);
        for (int64_t i = 0; i < b.numel(); ++i)
            b.data[static_cast<size_t>(i)] = To(l.bias->value.data[static_cast<size_t>(i)]);
        o.weight = make_leaf(std::move(w), true);
        o.bias = make_leaf(std::move(b), true);
        o.qp = QuantParams<To>::init(To(l.qp.value()));
        o.act = {To(l.act.running_max), To(l.act.momentum), l.act.frozen};
        out.layers.push_back(std::move(o));
    }
    return out;
}

}  // namespace qunet
