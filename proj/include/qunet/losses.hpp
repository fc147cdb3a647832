#pragma once

#include <cmath>
#include <vector>

#include "qunet/autograd.hpp"
#include "qunet/ops.hpp"
#include "qunet/quant.hpp"
#include "qunet/tensor.hpp"

namespace qunet {

inline constexpr double kBceEps = 1e-7;
inline constexpr double kDiceSmooth = 1e-5;

// The four loss symbols plus lambda, as logged. total is defined as
// bce + dice + lambda*bitwidth in this exact order so the decomposition
// identity holds bit-exactly on the logged values.
struct LossBreakdown {
    double bce = 0.0;
    double dice = 0.0;
    double bitwidth = 0.0;
    double lambda = 0.0;
    double total = 0.0;
    int64_t pixels = 0;
    double smooth = kDiceSmooth;
};

// Mean pixelwise negative log-likelihood; predictions clamp to
// [eps, 1-eps] before the logs.
template <class T>
Var<T> bce_loss(const Var<T>& pred, const Tensor<T>& target) {
    if (!pred->value.same_shape(target))
        throw std::invalid_argument("bce_loss: shape mismatch " + shape_str(pred->value) +
                                    " vs " + shape_str(target));
    const int64_t n = pred->value.numel();
    if (n == 0) throw std::invalid_argument("bce_loss: empty tensors");
    const T eps = T(kBceEps);
    const T lo = eps, hi = T(1) - eps;
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const T p = clamp_val(pred->value.data[static_cast<size_t>(i)], lo, hi);
        const T y = target.data[static_cast<size_t>(i)];
        acc -= static_cast<double>(y) * std::log(static_cast<double>(p)) +
               (1.0 - static_cast<double>(y)) * std::log(1.0 - static_cast<double>(p));
    }
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>::scalar(T(acc / static_cast<double>(n)));
    if (tape_active<T>({pred})) {
        out->requires_grad = true;
        out->parents = {pred};
        Node<T>* o = out.get();
        Node<T>* pn = pred.get();
        auto tgt = std::make_shared<Tensor<T>>(target);
        out->backprop = [o, pn, tgt, lo, hi, n]() {
            if (!pn->requires_grad) return;
            Tensor<T>& gp = pn->ensure_grad();
            const T g = o->grad.data[0];
            const T invN = T(1) / T(n);
            for (int64_t i = 0; i < n; ++i) {
                const T p = pn->value.data[static_cast<size_t>(i)];
                if (p < lo || p > hi) continue;  // clamp region: zero slope
                const T y = tgt->data[static_cast<size_t>(i)];
                gp.data[static_cast<size_t>(i)] +=
                    g * invN * (-y / p + (T(1) - y) / (T(1) - p));
            }
        };
    }
    return out;
}

// Soft Dice loss: 1 - (2*sum(p*t)+smooth)/(sum(p)+sum(t)+smooth).
template <class T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target, T smooth = T(kDiceSmooth)) {
    if (!pred->value.same_shape(target))
        throw std::invalid_argument("dice_loss: shape mismatch " + shape_str(pred->value) +
                                    " vs " + shape_str(target));
    const int64_t n = pred->value.numel();
    T inter = T(0), psum = T(0), tsum = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T p = pred->value.data[static_cast<size_t>(i)];
        const T y = target.data[static_cast<size_t>(i)];
        inter += p * y;
        psum += p;
        tsum += y;
    }
    const T num = T(2) * inter + smooth;
    const T den = psum + tsum + smooth;
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>::scalar(T(1) - num / den);
    if (tape_active<T>({pred})) {
        out->requires_grad = true;
        out->parents = {pred};
        Node<T>* o = out.get();
        Node<T>* pn = pred.get();
        auto tgt = std::make_shared<Tensor<T>>(target);
        out->backprop = [o, pn, tgt, num, den, n]() {
            if (!pn->requires_grad) return;
            Tensor<T>& gp = pn->ensure_grad();
            const T g = o->grad.data[0];
            const T den2 = den * den;
            for (int64_t i = 0; i < n; ++i) {
                const T y = tgt->data[static_cast<size_t>(i)];
                // d/dp_i [1 - num/den], num depends via 2*y, den via 1
                gp.data[static_cast<size_t>(i)] += g * (-(T(2) * y * den - num) / den2);
            }
        };
    }
    return out;
}

// Dice coefficient on thresholded binary masks (metric, not differentiable).
template <class T>
double dice_coeff(const Tensor<T>& pred_mask, const Tensor<T>& target, double smooth = kDiceSmooth) {
    if (!pred_mask.same_shape(target))
        throw std::invalid_argument("dice_coeff: shape mismatch");
    double inter = 0.0, ps = 0.0, ts = 0.0;
    for (int64_t i = 0; i < pred_mask.numel(); ++i) {
        const double p = pred_mask.data[static_cast<size_t>(i)] > T(0) ? 1.0 : 0.0;
        const double y = target.data[static_cast<size_t>(i)] > T(0) ? 1.0 : 0.0;
        inter += p * y;
        ps += p;
        ts += y;
    }
    return (2.0 * inter + smooth) / (ps + ts + smooth);
}

template <class T>
double pixel_accuracy(const Tensor<T>& pred_mask, const Tensor<T>& target) {
    if (!pred_mask.same_shape(target))
        throw std::invalid_argument("pixel_accuracy: shape mismatch");
    const int64_t n = pred_mask.numel();
    if (n == 0) throw std::invalid_argument("pixel_accuracy: empty tensors");
    int64_t agree = 0;
    for (int64_t i = 0; i < n; ++i) {
        const bool p = pred_mask.data[static_cast<size_t>(i)] > T(0);
        const bool y = target.data[static_cast<size_t>(i)] > T(0);
        if (p == y) ++agree;
    }
    return static_cast<double>(agree) / static_cast<double>(n);
}

// Threshold probabilities into a binary mask (p > 0.5 is foreground).
template <class T>
Tensor<T> threshold_mask(const Tensor<T>& prob, T thr = T(0.5)) {
    Tensor<T> m(prob.shape);
    for (int64_t i = 0; i < prob.numel(); ++i)
        m.data[static_cast<size_t>(i)] = prob.data[static_cast<size_t>(i)] > thr ? T(1) : T(0);
    return m;
}

template <class T>
struct TotalLoss {
    Var<T> total;  // differentiable, including the bitwidth path
    LossBreakdown parts;
};

// L_total = L_BCE + L_Dice + lambda * L_Bitwidth.
template <class T>
TotalLoss<T> total_loss(const Var<T>& pred, const Tensor<T>& target,
                        const std::vector<QuantParams<T>*>& bitwidth_params, double lambda,
                        T smooth = T(kDiceSmooth)) {
    if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    Var<T> bce = bce_loss(pred, target);
    Var<T> dice = dice_loss(pred, target, smooth);
    Var<T> bw = avg_bitwidth(bitwidth_params);
    Var<T> total = add(add(bce, dice), scale(bw, T(lambda)));

    TotalLoss<T> r;
    r.total = total;
    r.parts.bce = static_cast<double>(bce->value.data[0]);
    r.parts.dice = static_cast<double>(dice->value.data[0]);
    r.parts.bitwidth = static_cast<double>(bw->value.data[0]);
    r.parts.lambda = lambda;
    r.parts.total = r.parts.bce + r.parts.dice + r.parts.lambda * r.parts.bitwidth;
    r.parts.pixels = pred->value.numel();
    r.parts.smooth = static_cast<double>(smooth);
    return r;
}

}  // namespace qunet
