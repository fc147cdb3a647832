#pragma once

#include <cmath>
#include <vector>

#include "qunet/autograd.hpp"
#include "qunet/ops.hpp"
#include "qunet/tensor.hpp"

namespace qunet {

// Scale floor; also the "never observed" threshold for activation ranges.
inline constexpr double kQuantEps = 1e-8;

// Learnable continuous bitwidth for one weight layer. The effective integer
// bitwidth is round_half_even(clamp(b_param, 2, 8)); gradients flow through
// the round via STE and die at the clamp rails.
template <class T>
struct QuantParams {
    Var<T> b_param;  // scalar leaf, shape [1]
    T b_min = T(2);
    T b_max = T(8);

    static QuantParams init(T b0) {
        QuantParams p;
        p.b_param = make_leaf(Tensor<T>::scalar(b0), true);
        return p;
    }
    T value() const { return b_param->value.data[0]; }
    T clamped() const { return clamp_val(value(), b_min, b_max); }
};

struct QuantMeta {
    double scale = 0.0;
    int q_min = 0;
    int q_max = 0;
    int b_eff = 0;
    bool is_signed = true;
};

// EMA range tracker for one activation site.
template <class T>
struct ActQuantState {
    T running_max = T(0);
    T momentum = T(0.9);
    bool frozen = false;
};

template <class T>
int effective_bitwidth(const QuantParams<T>& p) {
    return static_cast<int>(round_half_even(p.clamped()));
}

namespace detail {
template <class T>
inline bool rail_open(const QuantParams<T>& p) {
    T b = p.value();
    return b > p.b_min && b < p.b_max;
}
}  // namespace detail

// Symmetric per-tensor weight fake-quantization at the layer's effective
// bitwidth. Computed as A*(c/Q) rather than s*round(W/s): the max element
// then maps to +-A exactly, which makes re-quantization bit-idempotent.
//
// Gradients: straight-through to W for elements with |W*Q/A| <= Q, zero
// outside; to b_param through the scale (residual * ds/db, with the spec's
// STE on both rounds and zero at the clamp rails). For saturated elements the
// scale and saturation-value paths cancel exactly, contributing zero.
template <class T>
std::pair<Var<T>, QuantMeta> fake_quant_weight(const Var<T>& W, QuantParams<T>& p) {
    const int b = effective_bitwidth(p);
    const int Q = (1 << (b - 1)) - 1;
    const T A = std::max(max_abs(W->value), T(kQuantEps));
    const T Qt = T(Q);

    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(W->value.shape);
    const int64_t n = W->value.numel();
    auto residual = std::make_shared<std::vector<T>>(static_cast<size_t>(n));  // c - u, 0 when saturated
    auto pass = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const T wv = W->value.data[static_cast<size_t>(i)];
        const T u = wv * Qt / A;
        const T r = round_half_even(u);
        const T c = clamp_val(r, -Qt, Qt);
        out->value.data[static_cast<size_t>(i)] = A * (c / Qt);
        // |u| <= Q iff |w| <= A; the latter is exact under fp
        const bool inside = (wv < T(0) ? -wv : wv) <= A;
        (*pass)[static_cast<size_t>(i)] = inside ? 1 : 0;
        (*residual)[static_cast<size_t>(i)] = inside ? (c - u) : T(0);
    }

    QuantMeta meta;
    meta.scale = static_cast<double>(A) / Q;
    meta.q_min = -Q;
    meta.q_max = Q;
    meta.b_eff = b;
    meta.is_signed = true;

    Var<T> bp = p.b_param;
    if (tape_active<T>({W, bp})) {
        out->requires_grad = true;
        out->parents = {W, bp};
        Node<T>* o = out.get();
        Node<T>* wn = W.get();
        Node<T>* bn = bp.get();
        // d s / d b at the rounded bitwidth, s = A/Q, Q = 2^(b-1)-1
        const T dsdb = -A * T(std::log(2.0)) * T(std::ldexp(1.0, b - 1)) / (Qt * Qt);
        const bool rail = detail::rail_open(p);
        out->backprop = [o, wn, bn, residual, pass, dsdb, rail]() {
            const Tensor<T>& gy = o->grad;
            if (wn->requires_grad) {
                Tensor<T>& gw = wn->ensure_grad();
                for (int64_t i = 0; i < gy.numel(); ++i)
                    if ((*pass)[static_cast<size_t>(i)])
                        gw.data[static_cast<size_t>(i)] += gy.data[static_cast<size_t>(i)];
            }
            if (bn->requires_grad && rail) {
                T acc = T(0);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    acc += gy.data[static_cast<size_t>(i)] * (*residual)[static_cast<size_t>(i)];
                bn->ensure_grad().data[0] += acc * dsdb;
            }
        };
    }
    return {out, meta};
}

namespace detail {

// Shared body for the unsigned/signed activation quantizers. q_lo/q_hi give
// the integer grid, range_of(x) the magnitude used for the running max.
template <class T, class RangeFn>
Var<T> fake_quant_act_impl(const Var<T>& X, int q_lo, int q_hi, ActQuantState<T>& state,
                           bool training, bool calibrate_unset, RangeFn range_of) {
    T observed = T(0);
    for (T v : X->value.data) {
        T m = range_of(v);
        if (m > observed) observed = m;
    }
    if (calibrate_unset && state.running_max < T(kQuantEps)) state.running_max = observed;
    if (training && !state.frozen)
        state.running_max = state.momentum * state.running_max + (T(1) - state.momentum) * observed;

    const T R = std::max(state.running_max, T(kQuantEps));
    const T lo = T(q_lo), hi = T(q_hi);
    // grid magnitude: q_hi steps span [0,R] (unsigned) or [-R,R] (signed)
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(X->value.shape);
    for (int64_t i = 0; i < X->value.numel(); ++i) {
        const T u = X->value.data[static_cast<size_t>(i)] * hi / R;
        const T q = clamp_val(round_half_even(u), lo, hi);
        out->value.data[static_cast<size_t>(i)] = R * (q / hi);
    }
    if (tape_active<T>({X})) {
        out->requires_grad = true;
        out->parents = {X};
        Node<T>* o = out.get();
        Node<T>* xn = X.get();
        const T xlo = q_lo == 0 ? T(0) : -R;
        out->backprop = [o, xn, xlo, R]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < o->grad.numel(); ++i) {
                const T x = xn->value.data[static_cast<size_t>(i)];
                if (x >= xlo && x <= R)
                    gx.data[static_cast<size_t>(i)] += o->grad.data[static_cast<size_t>(i)];
            }
        };
    }
    return out;
}

}  // namespace detail

// Unsigned activation fake-quantization with EMA range. Values are expected
// nonnegative; anything below 0 clamps to 0 with zero gradient (the upconv
// output site relies on this).
template <class T>
Var<T> fake_quant_activation(const Var<T>& X, int b_act, ActQuantState<T>& state, bool training,
                             bool calibrate_unset = false) {
    const int q_max = (1 << b_act) - 1;
    return detail::fake_quant_act_impl(X, 0, q_max, state, training, calibrate_unset,
                                       [](T v) { return v > T(0) ? v : T(0); });
}

// Signed symmetric fake-quantization for the pre-sigmoid head; the state
// tracks max|x|.
template <class T>
Var<T> fake_quant_signed(const Var<T>& X, int bits, ActQuantState<T>& state, bool training,
                         bool calibrate_unset = false) {
    const int Q = (1 << (bits - 1)) - 1;
    return detail::fake_quant_act_impl(X, -Q, Q, state, training, calibrate_unset,
                                       [](T v) { return v < T(0) ? -v : v; });
}

// Re-quantize an already quantized activation onto an explicit grid step
// with integer bounds [lo, hi] (the concat scale-unification op; signed
// branches pass lo = -Q). Straight-through inside [step*lo, step*hi].
template <class T>
Var<T> requantize_step(const Var<T>& X, T step, int lo, int hi) {
    const T st = std::max(step, T(kQuantEps / 255.0));
    const T lov = T(lo), hiv = T(hi);
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(X->value.shape);
    for (int64_t i = 0; i < X->value.numel(); ++i) {
        const T q = clamp_val(round_half_even(X->value.data[static_cast<size_t>(i)] / st), lov, hiv);
        out->value.data[static_cast<size_t>(i)] = st * q;
    }
    if (tape_active<T>({X})) {
        out->requires_grad = true;
        out->parents = {X};
        Node<T>* o = out.get();
        Node<T>* xn = X.get();
        const T xmin = st * lov, xmax = st * hiv;
        out->backprop = [o, xn, xmin, xmax]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < o->grad.numel(); ++i) {
                const T x = xn->value.data[static_cast<size_t>(i)];
                if (x >= xmin && x <= xmax)
                    gx.data[static_cast<size_t>(i)] += o->grad.data[static_cast<size_t>(i)];
            }
        };
    }
    return out;
}

// Snap bias onto the accumulator grid step = s_x*s_w (straight-through).
// Keeps the float forward representable as a 32-bit integer bias add in the
// integer runtime.
template <class T>
Var<T> quantize_bias(const Var<T>& bias, double step) {
    const T st = T(step);
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(bias->value.shape);
    for (int64_t i = 0; i < bias->value.numel(); ++i)
        out->value.data[static_cast<size_t>(i)] =
            st * round_half_even(bias->value.data[static_cast<size_t>(i)] / st);
    if (tape_active<T>({bias})) {
        out->requires_grad = true;
        out->parents = {bias};
        Node<T>* o = out.get();
        Node<T>* bn = bias.get();
        out->backprop = [o, bn]() {
            if (bn->requires_grad) accumulate(bn, o->grad);
        };
    }
    return out;
}

// Mean of the clamped continuous bitwidths -- the L_Bitwidth term. Gradient
// to each unclamped b_param is exactly 1/L.
template <class T>
Var<T> avg_bitwidth(const std::vector<QuantParams<T>*>& params) {
    if (params.empty()) throw std::invalid_argument("avg_bitwidth: empty parameter list");
    const int64_t L = static_cast<int64_t>(params.size());
    const T invL = T(1) / T(L);
    T acc = T(0);
    std::vector<Var<T>> parents;
    std::vector<uint8_t> open;
    parents.reserve(params.size());
    open.reserve(params.size());
    for (auto* p : params) {
        acc += p->clamped();
        parents.push_back(p->b_param);
        open.push_back(detail::rail_open(*p) ? 1 : 0);
    }
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>::scalar(acc * invL);
    if (tape_active<T>(parents)) {
        out->requires_grad = true;
        out->parents = parents;
        Node<T>* o = out.get();
        auto openv = std::make_shared<std::vector<uint8_t>>(std::move(open));
        out->backprop = [o, openv, invL]() {
            const T g = o->grad.data[0];
            for (size_t i = 0; i < o->parents.size(); ++i) {
                Node<T>* p = o->parents[i].get();
                if (p->requires_grad && (*openv)[i]) p->ensure_grad().data[0] += g * invL;
            }
        };
    }
    return out;
}

template <class T>
T avg_bitwidth_value(const std::vector<QuantParams<T>*>& params) {
    if (params.empty()) throw std::invalid_argument("avg_bitwidth: empty parameter list");
    T acc = T(0);
    for (auto* p : params) acc += p->clamped();
    return acc / T(static_cast<int64_t>(params.size()));
}

}  // namespace qunet
