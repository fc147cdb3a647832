#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include "qunet/autograd.hpp"
#include "qunet/tensor.hpp"

namespace qunet {

// ---------------------------------------------------------------------------
// raw kernels
//
// Accumulation order per output element is fixed (ci -> kh -> kw, batch
// outermost), so results are bit-identical run to run. The optional OpenMP
// pragmas only partition whole output planes across threads; no reduction
// crosses a thread boundary, so results are also identical for any thread
// count.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d_raw(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad) {
    const int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = w.shape[0], K = w.shape[2];
    Tensor<T> y({N, Co, H, W});
    const int64_t hw = H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Co; ++co) {
            T* yp = y.ptr() + (n * Co + co) * hw;
            std::fill(yp, yp + hw, b.data[static_cast<size_t>(co)]);
            for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* xp = x.ptr() + (n * Ci + ci) * hw;
                const T* wp = w.ptr() + (co * Ci + ci) * K * K;
                for (int64_t kh = 0; kh < K; ++kh) {
                    for (int64_t kw = 0; kw < K; ++kw) {
                        const T wv = wp[kh * K + kw];
                        const int64_t dh = kh - pad, dw = kw - pad;
                        const int64_t oh0 = std::max<int64_t>(0, -dh);
                        const int64_t oh1 = std::min<int64_t>(H, H - dh);
                        const int64_t ow0 = std::max<int64_t>(0, -dw);
                        const int64_t ow1 = std::min<int64_t>(W, W - dw);
                        for (int64_t oh = oh0; oh < oh1; ++oh) {
                            const T* xrow = xp + (oh + dh) * W + dw;
                            T* yrow = yp + oh * W;
                            for (int64_t ow = ow0; ow < ow1; ++ow) yrow[ow] += wv * xrow[ow];
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> conv2d_grad_input(const Tensor<T>& gy, const Tensor<T>& w, const Tensor<T>& xshape_like,
                            int pad) {
    const int64_t N = xshape_like.shape[0], Ci = xshape_like.shape[1];
    const int64_t H = xshape_like.shape[2], W = xshape_like.shape[3];
    const int64_t Co = w.shape[0], K = w.shape[2];
    Tensor<T> gx({N, Ci, H, W});
    const int64_t hw = H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
            T* gxp = gx.ptr() + (n * Ci + ci) * hw;
            for (int64_t co = 0; co < Co; ++co) {
                const T* gyp = gy.ptr() + (n * Co + co) * hw;
                const T* wp = w.ptr() + (co * Ci + ci) * K * K;
                for (int64_t kh = 0; kh < K; ++kh) {
                    for (int64_t kw = 0; kw < K; ++kw) {
                        const T wv = wp[kh * K + kw];
                        const int64_t dh = kh - pad, dw = kw - pad;
                        const int64_t oh0 = std::max<int64_t>(0, -dh);
                        const int64_t oh1 = std::min<int64_t>(H, H - dh);
                        const int64_t ow0 = std::max<int64_t>(0, -dw);
                        const int64_t ow1 = std::min<int64_t>(W, W - dw);
                        for (int64_t oh = oh0; oh < oh1; ++oh) {
                            T* gxrow = gxp + (oh + dh) * W + dw;
                            const T* gyrow = gyp + oh * W;
                            for (int64_t ow = ow0; ow < ow1; ++ow) gxrow[ow] += wv * gyrow[ow];
                        }
                    }
                }
            }
        }
    }
    return gx;
}

template <class T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& gy, const Tensor<T>& x, int64_t Co, int64_t K,
                             int pad) {
    const int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor<T> gw({Co, Ci, K, K});
    const int64_t hw = H * W;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t co = 0; co < Co; ++co) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
            for (int64_t kh = 0; kh < K; ++kh) {
                for (int64_t kw = 0; kw < K; ++kw) {
                    const int64_t dh = kh - pad, dw = kw - pad;
                    const int64_t oh0 = std::max<int64_t>(0, -dh);
                    const int64_t oh1 = std::min<int64_t>(H, H - dh);
                    const int64_t ow0 = std::max<int64_t>(0, -dw);
                    const int64_t ow1 = std::min<int64_t>(W, W - dw);
                    T acc = T(0);
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gyp = gy.ptr() + (n * Co + co) * hw;
                        const T* xp = x.ptr() + (n * Ci + ci) * hw;
                        for (int64_t oh = oh0; oh < oh1; ++oh) {
                            const T* gyrow = gyp + oh * W;
                            const T* xrow = xp + (oh + dh) * W + dw;
                            for (int64_t ow = ow0; ow < ow1; ++ow) acc += gyrow[ow] * xrow[ow];
                        }
                    }
                    gw.at4(co, ci, kh, kw) = acc;
                }
            }
        }
    }
    return gw;
}

template <class T>
Tensor<T> sum_spatial_per_channel(const Tensor<T>& gy) {
    const int64_t N = gy.shape[0], C = gy.shape[1], hw = gy.shape[2] * gy.shape[3];
    Tensor<T> gb({C});
    for (int64_t c = 0; c < C; ++c) {
        T acc = T(0);
        for (int64_t n = 0; n < N; ++n) {
            const T* p = gy.ptr() + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
        }
        gb.data[static_cast<size_t>(c)] = acc;
    }
    return gb;
}

// Transpose conv, kernel 2x2 stride 2 (no overlap): each output pixel reads
// exactly one input pixel per channel.
template <class T>
Tensor<T> conv_transpose2d_raw(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = w.shape[1];
    Tensor<T> y({N, Co, 2 * H, 2 * W});
    const int64_t ohw = 4 * H * W, ihw = H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Co; ++co) {
            T* yp = y.ptr() + (n * Co + co) * ohw;
            std::fill(yp, yp + ohw, b.data[static_cast<size_t>(co)]);
            for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* xp = x.ptr() + (n * Ci + ci) * ihw;
                const T* wp = w.ptr() + (ci * Co + co) * 4;
                for (int64_t kh = 0; kh < 2; ++kh) {
                    for (int64_t kw = 0; kw < 2; ++kw) {
                        const T wv = wp[kh * 2 + kw];
                        for (int64_t h = 0; h < H; ++h) {
                            const T* xrow = xp + h * W;
                            T* yrow = yp + (2 * h + kh) * (2 * W) + kw;
                            for (int64_t iw = 0; iw < W; ++iw) yrow[2 * iw] += wv * xrow[iw];
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> conv_transpose2d_grad_input(const Tensor<T>& gy, const Tensor<T>& w, int64_t Ci,
                                      int64_t H, int64_t W) {
    const int64_t N = gy.shape[0], Co = gy.shape[1];
    Tensor<T> gx({N, Ci, H, W});
    const int64_t ohw = 4 * H * W, ihw = H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
            T* gxp = gx.ptr() + (n * Ci + ci) * ihw;
            for (int64_t co = 0; co < Co; ++co) {
                const T* gyp = gy.ptr() + (n * Co + co) * ohw;
                const T* wp = w.ptr() + (ci * Co + co) * 4;
                for (int64_t kh = 0; kh < 2; ++kh) {
                    for (int64_t kw = 0; kw < 2; ++kw) {
                        const T wv = wp[kh * 2 + kw];
                        for (int64_t h = 0; h < H; ++h) {
                            T* gxrow = gxp + h * W;
                            const T* gyrow = gyp + (2 * h + kh) * (2 * W) + kw;
                            for (int64_t iw = 0; iw < W; ++iw) gxrow[iw] += wv * gyrow[2 * iw];
                        }
                    }
                }
            }
        }
    }
    return gx;
}

template <class T>
Tensor<T> conv_transpose2d_grad_weight(const Tensor<T>& gy, const Tensor<T>& x) {
    const int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = gy.shape[1];
    Tensor<T> gw({Ci, Co, 2, 2});
    const int64_t ohw = 4 * H * W, ihw = H * W;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t ci = 0; ci < Ci; ++ci) {
        for (int64_t co = 0; co < Co; ++co) {
            for (int64_t kh = 0; kh < 2; ++kh) {
                for (int64_t kw = 0; kw < 2; ++kw) {
                    T acc = T(0);
                    for (int64_t n = 0; n < N; ++n) {
                        const T* xp = x.ptr() + (n * Ci + ci) * ihw;
                        const T* gyp = gy.ptr() + (n * Co + co) * ohw;
                        for (int64_t h = 0; h < H; ++h) {
                            const T* xrow = xp + h * W;
                            const T* gyrow = gyp + (2 * h + kh) * (2 * W) + kw;
                            for (int64_t iw = 0; iw < W; ++iw) acc += xrow[iw] * gyrow[2 * iw];
                        }
                    }
                    gw.at4(ci, co, kh, kw) = acc;
                }
            }
        }
    }
    return gw;
}

// ---------------------------------------------------------------------------
// graph ops
// ---------------------------------------------------------------------------

template <class T>
void check_4d(const Tensor<T>& t, const char* what) {
    if (t.rank() != 4) throw std::invalid_argument(std::string(what) + ": expected 4-d tensor, got " + shape_str(t));
}

// Same-padded cross-correlation plus per-channel bias. Kernel must be odd and
// square with padding = k/2 so spatial dims are preserved (Table-1 layers are
// all 3x3 pad 1 or 1x1 pad 0).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int padding) {
    check_4d(x->value, "conv2d input");
    check_4d(w->value, "conv2d kernel");
    const auto& xs = x->value.shape;
    const auto& ws = w->value.shape;
    if (ws[2] != ws[3] || ws[2] % 2 == 0)
        throw std::invalid_argument("conv2d: kernel must be square with odd spatial size, got " +
                                    shape_str(w->value));
    if (2 * padding + 1 != ws[2])
        throw std::invalid_argument("conv2d: padding must preserve spatial dims (pad = k/2)");
    if (xs[1] != ws[1])
        throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x->value) +
                                    " vs kernel " + shape_str(w->value));
    if (b->value.rank() != 1 || b->value.shape[0] != ws[0])
        throw std::invalid_argument("conv2d: bias must be [Cout]");

    auto out = std::make_shared<Node<T>>();
    out->value = conv2d_raw(x->value, w->value, b->value, padding);
    if (tape_active<T>({x, w, b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        Node<T>* o = out.get();
        Node<T>* xp = x.get();
        Node<T>* wp = w.get();
        Node<T>* bp = b.get();
        const int pad = padding;
        out->backprop = [o, xp, wp, bp, pad]() {
            const Tensor<T>& gy = o->grad;
            if (xp->requires_grad)
                accumulate(xp, conv2d_grad_input(gy, wp->value, xp->value, pad));
            if (wp->requires_grad)
                accumulate(wp, conv2d_grad_weight(gy, xp->value, wp->value.shape[0],
                                                  wp->value.shape[2], pad));
            if (bp->requires_grad) accumulate(bp, sum_spatial_per_channel(gy));
        };
    }
    return out;
}

// Kernel [Cin,Cout,2,2], stride fixed at 2; output spatial dims are doubled.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    check_4d(x->value, "conv_transpose2d input");
    check_4d(w->value, "conv_transpose2d kernel");
    const auto& xs = x->value.shape;
    const auto& ws = w->value.shape;
    if (ws[2] != 2 || ws[3] != 2)
        throw std::invalid_argument("conv_transpose2d: kernel must be 2x2");
    if (xs[1] != ws[0])
        throw std::invalid_argument("conv_transpose2d: channel mismatch, input " +
                                    shape_str(x->value) + " vs kernel " + shape_str(w->value));
    if (b->value.rank() != 1 || b->value.shape[0] != ws[1])
        throw std::invalid_argument("conv_transpose2d: bias must be [Cout]");

    auto out = std::make_shared<Node<T>>();
    out->value = conv_transpose2d_raw(x->value, w->value, b->value);
    if (tape_active<T>({x, w, b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        Node<T>* o = out.get();
        Node<T>* xp = x.get();
        Node<T>* wp = w.get();
        Node<T>* bp = b.get();
        out->backprop = [o, xp, wp, bp]() {
            const Tensor<T>& gy = o->grad;
            if (xp->requires_grad)
                accumulate(xp, conv_transpose2d_grad_input(gy, wp->value, xp->value.shape[1],
                                                           xp->value.shape[2], xp->value.shape[3]));
            if (wp->requires_grad) accumulate(wp, conv_transpose2d_grad_weight(gy, xp->value));
            if (bp->requires_grad) accumulate(bp, sum_spatial_per_channel(gy));
        };
    }
    return out;
}

// 2x2 stride-2 max pooling. Gradient routes to the argmax only; ties go to
// the first element in row-major window order.
template <class T>
Var<T> maxpool2d(const Var<T>& x) {
    check_4d(x->value, "maxpool2d input");
    const int64_t N = x->value.shape[0], C = x->value.shape[1];
    const int64_t H = x->value.shape[2], W = x->value.shape[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("maxpool2d: spatial dims must be even, got " +
                                    shape_str(x->value));
    const int64_t Ho = H / 2, Wo = W / 2;
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * Ho * Wo));
    const T* xp = x->value.ptr();
    T* yp = out->value.ptr();
    int64_t* ap = argmax->data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* plane = xp + nc * H * W;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t i00 = (2 * oh) * W + 2 * ow;
                const int64_t idx[4] = {i00, i00 + 1, i00 + W, i00 + W + 1};
                int64_t best = idx[0];
                T bv = plane[idx[0]];
                for (int k = 1; k < 4; ++k) {
                    if (plane[idx[k]] > bv) {
                        bv = plane[idx[k]];
                        best = idx[k];
                    }
                }
                yp[nc * Ho * Wo + oh * Wo + ow] = bv;
                ap[nc * Ho * Wo + oh * Wo + ow] = nc * H * W + best;
            }
        }
    }
    if (tape_active<T>({x})) {
        out->requires_grad = true;
        out->parents = {x};
        Node<T>* o = out.get();
        Node<T>* xn = x.get();
        out->backprop = [o, xn, argmax]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            const Tensor<T>& gy = o->grad;
            const int64_t* a = argmax->data();
            for (int64_t i = 0; i < gy.numel(); ++i) gx.data[static_cast<size_t>(a[i])] += gy.data[static_cast<size_t>(i)];
        };
    }
    return out;
}

// Elementwise max(0,x); gradient is 0 at x == 0.
template <class T>
Var<T> relu(const Var<T>& x) {
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(x->value.shape);
    for (int64_t i = 0; i < x->value.numel(); ++i) {
        T v = x->value.data[static_cast<size_t>(i)];
        out->value.data[static_cast<size_t>(i)] = v > T(0) ? v : T(0);
    }
    if (tape_active<T>({x})) {
        out->requires_grad = true;
        out->parents = {x};
        Node<T>* o = out.get();
        Node<T>* xn = x.get();
        out->backprop = [o, xn]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < o->grad.numel(); ++i)
                if (xn->value.data[static_cast<size_t>(i)] > T(0))
                    gx.data[static_cast<size_t>(i)] += o->grad.data[static_cast<size_t>(i)];
        };
    }
    return out;
}

// Logistic sigmoid, output clamped into [eps, 1-eps] so downstream logs never
// see an exact 0 or 1 even after fp saturation.
template <class T>
Var<T> sigmoid(const Var<T>& x) {
    constexpr T eps = T(1e-7);
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(x->value.shape);
    for (int64_t i = 0; i < x->value.numel(); ++i) {
        T v = x->value.data[static_cast<size_t>(i)];
        T s;
        if (v >= T(0)) {
            T e = std::exp(-v);
            s = T(1) / (T(1) + e);
        } else {
            T e = std::exp(v);
            s = e / (T(1) + e);
        }
        out->value.data[static_cast<size_t>(i)] = clamp_val(s, eps, T(1) - eps);
    }
    if (tape_active<T>({x})) {
        out->requires_grad = true;
        out->parents = {x};
        Node<T>* o = out.get();
        Node<T>* xn = x.get();
        out->backprop = [o, xn]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < o->grad.numel(); ++i) {
                T s = o->value.data[static_cast<size_t>(i)];
                gx.data[static_cast<size_t>(i)] += o->grad.data[static_cast<size_t>(i)] * s * (T(1) - s);
            }
        };
    }
    return out;
}

// Channel concatenation, a first then b. Backward splits the gradient.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    check_4d(a->value, "concat_channels a");
    check_4d(b->value, "concat_channels b");
    const auto& as = a->value.shape;
    const auto& bs = b->value.shape;
    if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
        throw std::invalid_argument("concat_channels: batch/spatial mismatch, " +
                                    shape_str(a->value) + " vs " + shape_str(b->value));
    const int64_t N = as[0], Ca = as[1], Cb = bs[1], H = as[2], W = as[3];
    const int64_t hw = H * W;
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>({N, Ca + Cb, H, W});
    for (int64_t n = 0; n < N; ++n) {
        std::memcpy(out->value.ptr() + n * (Ca + Cb) * hw, a->value.ptr() + n * Ca * hw,
                    sizeof(T) * static_cast<size_t>(Ca * hw));
        std::memcpy(out->value.ptr() + (n * (Ca + Cb) + Ca) * hw, b->value.ptr() + n * Cb * hw,
                    sizeof(T) * static_cast<size_t>(Cb * hw));
    }
    if (tape_active<T>({a, b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        Node<T>* o = out.get();
        Node<T>* an = a.get();
        Node<T>* bn = b.get();
        out->backprop = [o, an, bn, N, Ca, Cb, hw]() {
            const Tensor<T>& gy = o->grad;
            if (an->requires_grad) {
                Tensor<T>& ga = an->ensure_grad();
                for (int64_t n = 0; n < N; ++n) {
                    const T* s = gy.ptr() + n * (Ca + Cb) * hw;
                    T* d = ga.ptr() + n * Ca * hw;
                    for (int64_t i = 0; i < Ca * hw; ++i) d[i] += s[i];
                }
            }
            if (bn->requires_grad) {
                Tensor<T>& gb = bn->ensure_grad();
                for (int64_t n = 0; n < N; ++n) {
                    const T* s = gy.ptr() + (n * (Ca + Cb) + Ca) * hw;
                    T* d = gb.ptr() + n * Cb * hw;
                    for (int64_t i = 0; i < Cb * hw; ++i) d[i] += s[i];
                }
            }
        };
    }
    return out;
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a->value) + " vs " +
                                    shape_str(b->value));
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(a->value.shape);
    for (int64_t i = 0; i < a->value.numel(); ++i)
        out->value.data[static_cast<size_t>(i)] =
            a->value.data[static_cast<size_t>(i)] + b->value.data[static_cast<size_t>(i)];
    if (tape_active<T>({a, b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        Node<T>* o = out.get();
        Node<T>* an = a.get();
        Node<T>* bn = b.get();
        out->backprop = [o, an, bn]() {
            if (an->requires_grad) accumulate(an, o->grad);
            if (bn->requires_grad) accumulate(bn, o->grad);
        };
    }
    return out;
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(x->value.shape);
    for (int64_t i = 0; i < x->value.numel(); ++i)
        out->value.data[static_cast<size_t>(i)] = c * x->value.data[static_cast<size_t>(i)];
    if (tape_active<T>({x})) {
        out->requires_grad = true;
        out->parents = {x};
        Node<T>* o = out.get();
        Node<T>* xn = x.get();
        out->backprop = [o, xn, c]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            for (int64_t i = 0; i < o->grad.numel(); ++i)
                gx.data[static_cast<size_t>(i)] += c * o->grad.data[static_cast<size_t>(i)];
        };
    }
    return out;
}

// Full reduction to a scalar.
template <class T>
Var<T> sum(const Var<T>& x) {
    auto out = std::make_shared<Node<T>>();
    T acc = T(0);
    for (T v : x->value.data) acc += v;
    out->value = Tensor<T>::scalar(acc);
    if (tape_active<T>({x})) {
        out->requires_grad = true;
        out->parents = {x};
        Node<T>* o = out.get();
        Node<T>* xn = x.get();
        out->backprop = [o, xn]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            const T g = o->grad.data[0];
            for (auto& v : gx.data) v += g;
        };
    }
    return out;
}

// Weighted reduction sum(c * x) with constant weights; handy for gradient
// checks that need a non-uniform cotangent.
template <class T>
Var<T> dot_const(const Var<T>& x, Tensor<T> c) {
    if (!x->value.same_shape(c))
        throw std::invalid_argument("dot_const: shape mismatch");
    auto cw = std::make_shared<Tensor<T>>(std::move(c));
    auto out = std::make_shared<Node<T>>();
    T acc = T(0);
    for (int64_t i = 0; i < x->value.numel(); ++i)
        acc += x->value.data[static_cast<size_t>(i)] * cw->data[static_cast<size_t>(i)];
    out->value = Tensor<T>::scalar(acc);
    if (tape_active<T>({x})) {
        out->requires_grad = true;
        out->parents = {x};
        Node<T>* o = out.get();
        Node<T>* xn = x.get();
        out->backprop = [o, xn, cw]() {
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->ensure_grad();
            const T g = o->grad.data[0];
            for (int64_t i = 0; i < gx.numel(); ++i)
                gx.data[static_cast<size_t>(i)] += g * cw->data[static_cast<size_t>(i)];
        };
    }
    return out;
}

// Round half to even with a straight-through gradient of 1.
template <class T>
Var<T> round_ste(const Var<T>& x) {
    auto out = std::make_shared<Node<T>>();
    out->value = Tensor<T>(x->value.shape);
    for (int64_t i = 0; i < x->value.numel(); ++i)
        out->value.data[static_cast<size_t>(i)] = round_half_even(x->value.data[static_cast<size_t>(i)]);
    if (tape_active<T>({x})) {
        out->requires_grad = true;
        out->parents = {x};
        Node<T>* o = out.get();
        Node<T>* xn = x.get();
        out->backprop = [o, xn]() {
            if (xn->requires_grad) accumulate(xn, o->grad);
        };
    }
    return out;
}

}  // namespace qunet
