#pragma once

// Differentiable primitives. Broadcasting is limited to scalar operands in
// the binary arithmetic ops plus the explicit per-channel / per-sample
// helpers below; every other pairing must match shapes exactly.

#include <Eigen/Core>

#include "asw/tensor.hpp"

namespace asw {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + " tensor, got " +
                         shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    if (!a_scalar && !b_scalar) require_same_shape(a, b, name);
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const auto& av = a.vec();
    const auto& bv = b.vec();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
    count_elementwise(n);
    return make_result(out_shape, std::move(out), {a, b}, name, [=](Node& self) {
        const auto& x = self.inputs[0]->data;
        const auto& y = self.inputs[1]->data;
        auto* gx = input_grad(self, 0);
        auto* gy = input_grad(self, 1);
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            const std::size_t ia = a_scalar ? 0 : i;
            const std::size_t ib = b_scalar ? 0 : i;
            const double g = self.grad[i];
            if (gx) (*gx)[ia] += da(x[ia], y[ib], self.data[i], g);
            if (gy) (*gy)[ib] += db(x[ia], y[ib], self.data[i], g);
        }
    });
}

// df(x, y, g) receives input value, output value and upstream gradient.
template <class F, class DF>
Tensor unary_op(const Tensor& a, const char* name, F f, DF df) {
    std::vector<double> out(a.numel());
    const auto& av = a.vec();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    count_elementwise(out.size());
    return make_result(a.shape(), std::move(out), {a}, name, [=](Node& self) {
        auto* gx = input_grad(self, 0);
        if (!gx) return;
        const auto& x = self.inputs[0]->data;
        for (std::size_t i = 0; i < self.data.size(); ++i) (*gx)[i] += df(x[i], self.data[i], self.grad[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double, double g) { return g; },
        [](double, double, double, double g) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double, double g) { return g; },
        [](double, double, double, double g) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y, double, double g) { return g * y; },
        [](double x, double, double, double g) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y, double, double g) { return g / y; },
        [](double x, double y, double, double g) { return -g * x / (y * y); });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    return detail::unary_op(
        a, "add_scalar", [s](double x) { return x + s; }, [](double, double, double g) { return g; });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    return detail::unary_op(
        a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double, double g) { return g * s; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(mul_scalar(a, -1.0), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

// ----------------------------------------------------------------- pointwise

inline Tensor exp(const Tensor& a) {
    count_transcendental(a.numel());
    return detail::unary_op(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y, double g) { return g * y; });
}

inline Tensor log(const Tensor& a) {
    count_transcendental(a.numel());
    return detail::unary_op(
        a, "log", [](double x) { return std::log(x); }, [](double x, double, double g) { return g / x; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        a, "square", [](double x) { return x * x; }, [](double x, double, double g) { return 2.0 * x * g; });
}

inline Tensor reciprocal(const Tensor& a) {
    return detail::unary_op(
        a, "reciprocal", [](double x) { return 1.0 / x; }, [](double, double y, double g) { return -g * y * y; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
    count_transcendental(a.numel());
    return detail::unary_op(
        a, "sigmoid", [](double x) { return sigmoid(x); },
        [](double, double y, double g) { return g * y * (1.0 - y); });
}

// Gradient passes only where lo < x < hi; at or beyond a bound it is zero.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("clamp: lower bound exceeds upper bound");
    return detail::unary_op(
        a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double, double g) { return (x > lo && x < hi) ? g : 0.0; });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.vec()) s += v;
    count_elementwise(a.numel());
    return detail::make_result({1}, {s}, {a}, "sum_all", [](Node& self) {
        auto* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (double& g : *gx) g += self.grad[0];
    });
}

inline Tensor mean_all(const Tensor& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return detail::make_result(shape, a.vec(), {a}, "reshape", [](Node& self) {
        auto* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
    });
}

// [N,C,H,W] -> [N,C]
inline Tensor sum_spatial(const Tensor& x) {
    detail::require_rank(x, 4, "sum_spatial");
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<double> out(nc, 0.0);
    for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t p = 0; p < hw; ++p) out[i] += x.vec()[i * hw + p];
    count_elementwise(x.numel());
    return detail::make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, "sum_spatial", [hw](Node& self) {
        auto* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            for (std::size_t p = 0; p < hw; ++p) (*gx)[i * hw + p] += self.grad[i];
    });
}

inline Tensor mean_spatial(const Tensor& x) {
    detail::require_rank(x, 4, "mean_spatial");
    return mul_scalar(sum_spatial(x), 1.0 / static_cast<double>(x.dim(2) * x.dim(3)));
}

// [N,C,H,W] -> [N,C,1,1]
inline Tensor global_avg_pool(const Tensor& x) {
    return reshape(mean_spatial(x), {x.dim(0), x.dim(1), 1, 1});
}

// ------------------------------------------------------- explicit broadcasts

// x: [N,C,H,W], w: [N,1,H,W]; w is shared across channels.
inline Tensor mul_bcast_channels(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 4, "mul_bcast_channels");
    detail::require_rank(w, 4, "mul_bcast_channels");
    if (w.dim(0) != x.dim(0) || w.dim(1) != 1 || w.dim(2) != x.dim(2) || w.dim(3) != x.dim(3))
        throw ShapeError("mul_bcast_channels: weight map " + shape_str(w.shape()) + " incompatible with " +
                         shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p)
                out[(n * C + c) * HW + p] = x.vec()[(n * C + c) * HW + p] * w.vec()[n * HW + p];
    count_elementwise(out.size());
    return detail::make_result(x.shape(), std::move(out), {x, w}, "mul_bcast_channels", [N, C, HW](Node& self) {
        const auto& xv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        auto* gx = detail::input_grad(self, 0);
        auto* gw = detail::input_grad(self, 1);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < HW; ++p) {
                    const std::size_t i = (n * C + c) * HW + p;
                    if (gx) (*gx)[i] += self.grad[i] * wv[n * HW + p];
                    if (gw) (*gw)[n * HW + p] += self.grad[i] * xv[i];
                }
    });
}

// Multiplies every element of sample n by c[n]; c holds one value per sample.
inline Tensor scale_batch(const Tensor& x, const Tensor& c) {
    if (x.rank() < 1 || c.numel() != x.dim(0))
        throw ShapeError("scale_batch: need one scale per sample, got " + shape_str(c.shape()) + " for " +
                         shape_str(x.shape()));
    const std::size_t N = x.dim(0), per = x.numel() / N;
    std::vector<double> out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < per; ++i) out[n * per + i] = x.vec()[n * per + i] * c.vec()[n];
    count_elementwise(out.size());
    return detail::make_result(x.shape(), std::move(out), {x, c}, "scale_batch", [N, per](Node& self) {
        const auto& xv = self.inputs[0]->data;
        const auto& cv = self.inputs[1]->data;
        auto* gx = detail::input_grad(self, 0);
        auto* gc = detail::input_grad(self, 1);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < per; ++i) {
                const double g = self.grad[n * per + i];
                if (gx) (*gx)[n * per + i] += g * cv[n];
                if (gc) (*gc)[n] += g * xv[n * per + i];
            }
    });
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
    for (const Tensor& p : parts) detail::require_rank(p, 4, "concat_channels");
    const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3), HW = H * W;
    std::size_t C = 0;
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W)
            throw ShapeError("concat_channels: incompatible " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
        offsets.push_back(C);
        C += p.dim(1);
    }
    std::vector<double> out(N * C * HW);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t ck = parts[k].dim(1);
        for (std::size_t n = 0; n < N; ++n)
            std::copy_n(parts[k].vec().begin() + n * ck * HW, ck * HW, out.begin() + (n * C + offsets[k]) * HW);
    }
    return detail::make_result({N, C, H, W}, std::move(out), parts, "concat_channels",
                               [N, C, HW, offsets](Node& self) {
                                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                       auto* g = detail::input_grad(self, k);
                                       if (!g) continue;
                                       const std::size_t ck = self.inputs[k]->shape[1];
                                       for (std::size_t n = 0; n < N; ++n)
                                           for (std::size_t i = 0; i < ck * HW; ++i)
                                               (*g)[n * ck * HW + i] += self.grad[(n * C + offsets[k]) * HW + i];
                                   }
                               });
}

// ------------------------------------------------------------- convolutions

namespace detail {

// Column matrix [Ci*k*k, Ho*Wo] for sample n.
inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
                   std::size_t pad, std::size_t Ho, std::size_t Wo, double* col) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        row[oy * Wo + ox] = (iy >= 0 && iy < static_cast<long>(H) && ix >= 0 &&
                                             ix < static_cast<long>(W))
                                                ? x[(c * H + iy) * W + ix]
                                                : 0.0;
                    }
                }
            }
}

inline void col2im_add(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                       std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* dx) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix >= 0 && ix < static_cast<long>(W)) dx[(c * H + iy) * W + ix] += row[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace detail

// Cross-correlation. x: [N,C,H,W], w: [Co,C,k,k] (k odd), b: [Co] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b = {}, std::size_t stride = 1,
                     std::size_t pad = 0) {
    detail::require_rank(x, 4, "conv2d input");
    detail::require_rank(w, 4, "conv2d weight");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != C)
        throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, input has " +
                         std::to_string(C));
    if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd extent");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (b.defined() && (b.rank() != 1 || b.dim(0) != Co))
        throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " does not match " + std::to_string(Co) +
                         " output channels");
    if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    const std::size_t K = C * k * k, P = Ho * Wo;
    const bool direct = (k == 1 && stride == 1 && pad == 0);

    std::vector<double> out(N * Co * P);
    std::vector<double> col(direct ? 0 : K * P);
    detail::ConstMap Wm(w.vec().data(), Co, K);
    for (std::size_t n = 0; n < N; ++n) {
        const double* xn = x.vec().data() + n * C * H * W;
        if (!direct) detail::im2col(xn, C, H, W, k, stride, pad, Ho, Wo, col.data());
        detail::ConstMap Xm(direct ? xn : col.data(), K, P);
        detail::MutMap Ym(out.data() + n * Co * P, Co, P);
        Ym.noalias() = Wm * Xm;
        if (b.defined())
            for (std::size_t o = 0; o < Co; ++o) Ym.row(o).array() += b.vec()[o];
    }
    count_macs(static_cast<std::uint64_t>(N) * Co * P * K);
    if (b.defined()) count_elementwise(out.size());

    std::vector<Tensor> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    const bool has_bias = b.defined();
    return detail::make_result(
        {N, Co, Ho, Wo}, std::move(out), inputs, "conv2d",
        [=](Node& self) {
            const auto& xv = self.inputs[0]->data;
            const auto& wv = self.inputs[1]->data;
            auto* gx = detail::input_grad(self, 0);
            auto* gw = detail::input_grad(self, 1);
            auto* gb = has_bias ? detail::input_grad(self, 2) : nullptr;
            detail::ConstMap Wm(wv.data(), Co, K);
            std::vector<double> colbuf(direct ? 0 : K * P), dcol(direct ? 0 : K * P);
            for (std::size_t n = 0; n < N; ++n) {
                detail::ConstMap G(self.grad.data() + n * Co * P, Co, P);
                const double* xn = xv.data() + n * C * H * W;
                if (gw) {
                    if (!direct) detail::im2col(xn, C, H, W, k, stride, pad, Ho, Wo, colbuf.data());
                    detail::ConstMap Xm(direct ? xn : colbuf.data(), K, P);
                    detail::MutMap GW(gw->data(), Co, K);
                    GW.noalias() += G * Xm.transpose();
                }
                if (gb)
                    for (std::size_t o = 0; o < Co; ++o) (*gb)[o] += G.row(o).sum();
                if (gx) {
                    if (direct) {
                        detail::MutMap GX(gx->data() + n * C * H * W, K, P);
                        GX.noalias() += Wm.transpose() * G;
                    } else {
                        detail::MutMap DC(dcol.data(), K, P);
                        DC.noalias() = Wm.transpose() * G;
                        detail::col2im_add(dcol.data(), C, H, W, k, stride, pad, Ho, Wo, gx->data() + n * C * H * W);
                    }
                }
            }
        });
}

// Depthwise convolution, stride 1. x: [N,C,H,W], w: [C,1,k,k].
inline Tensor dwconv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
    detail::require_rank(x, 4, "dwconv2d input");
    detail::require_rank(w, 4, "dwconv2d weight");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = w.dim(2);
    if (w.dim(0) != C || w.dim(1) != 1)
        throw ShapeError("dwconv2d: weight " + shape_str(w.shape()) + " does not match " + std::to_string(C) +
                         " channels");
    if (w.dim(3) != k || k % 2 == 0) throw ShapeError("dwconv2d: kernel must be square with odd extent");
    if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("dwconv2d: kernel larger than padded input");
    const std::size_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    const long lp = static_cast<long>(pad), lH = static_cast<long>(H), lW = static_cast<long>(W);

    std::vector<double> out(N * C * Ho * Wo, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double* xc = x.vec().data() + (n * C + c) * H * W;
            const double* wc = w.vec().data() + c * k * k;
            double* oc = out.data() + (n * C + c) * Ho * Wo;
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const double wk = wc[ky * k + kx];
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const long iy = static_cast<long>(oy + ky) - lp;
                        if (iy < 0 || iy >= lH) continue;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const long ix = static_cast<long>(ox + kx) - lp;
                            if (ix >= 0 && ix < lW) oc[oy * Wo + ox] += wk * xc[iy * W + ix];
                        }
                    }
                }
        }
    count_macs(static_cast<std::uint64_t>(N) * C * Ho * Wo * k * k);

    return detail::make_result({N, C, Ho, Wo}, std::move(out), {x, w}, "dwconv2d", [=](Node& self) {
        const auto& xv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        auto* gx = detail::input_grad(self, 0);
        auto* gw = detail::input_grad(self, 1);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double* xc = xv.data() + (n * C + c) * H * W;
                const double* gc = self.grad.data() + (n * C + c) * Ho * Wo;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const double wk = wv[c * k * k + ky * k + kx];
                        double acc = 0.0;
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            const long iy = static_cast<long>(oy + ky) - lp;
                            if (iy < 0 || iy >= lH) continue;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const long ix = static_cast<long>(ox + kx) - lp;
                                if (ix < 0 || ix >= lW) continue;
                                const double g = gc[oy * Wo + ox];
                                acc += g * xc[iy * W + ix];
                                if (gx) (*gx)[(n * C + c) * H * W + iy * W + ix] += g * wk;
                            }
                        }
                        if (gw) (*gw)[c * k * k + ky * k + kx] += acc;
                    }
            }
    });
}

// --------------------------------------------------------- resampling/pools

// Non-overlapping k×k max pooling; H and W must be multiples of k.
inline Tensor maxpool2d(const Tensor& x, std::size_t k = 2) {
    detail::require_rank(x, 4, "maxpool2d");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (k == 0 || H % k || W % k) throw ShapeError("maxpool2d: spatial extent not divisible by window");
    const std::size_t Ho = H / k, Wo = W / k;
    std::vector<double> out(N * C * Ho * Wo);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = nc * H * W + (oy * k) * W + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t i = nc * H * W + (oy * k + dy) * W + ox * k + dx;
                        if (x.vec()[i] > x.vec()[best]) best = i;
                    }
                const std::size_t o = (nc * Ho + oy) * Wo + ox;
                out[o] = x.vec()[best];
                argmax[o] = best;
            }
    count_elementwise(x.numel());
    return detail::make_result({N, C, Ho, Wo}, std::move(out), {x}, "maxpool2d",
                               [argmax = std::move(argmax)](Node& self) {
                                   auto* gx = detail::input_grad(self, 0);
                                   if (!gx) return;
                                   for (std::size_t o = 0; o < argmax.size(); ++o) (*gx)[argmax[o]] += self.grad[o];
                               });
}

inline Tensor avgpool2d(const Tensor& x, std::size_t k) {
    detail::require_rank(x, 4, "avgpool2d");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (k == 0 || H % k || W % k) throw ShapeError("avgpool2d: spatial extent not divisible by window");
    if (k == 1) return x;
    const std::size_t Ho = H / k, Wo = W / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    std::vector<double> out(N * C * Ho * Wo, 0.0);
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
                out[(nc * Ho + y / k) * Wo + xx / k] += x.vec()[(nc * H + y) * W + xx] * inv;
    count_elementwise(x.numel());
    return detail::make_result({N, C, Ho, Wo}, std::move(out), {x}, "avgpool2d", [=](Node& self) {
        auto* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx)
                    (*gx)[(nc * H + y) * W + xx] += self.grad[(nc * Ho + y / k) * Wo + xx / k] * inv;
    });
}

inline Tensor upsample_nearest(const Tensor& x, std::size_t k = 2) {
    detail::require_rank(x, 4, "upsample_nearest");
    if (k == 0) throw ShapeError("upsample_nearest: factor must be positive");
    if (k == 1) return x;
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Ho = H * k, Wo = W * k;
    std::vector<double> out(N * C * Ho * Wo);
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx)
                out[(nc * Ho + y) * Wo + xx] = x.vec()[(nc * H + y / k) * W + xx / k];
    return detail::make_result({N, C, Ho, Wo}, std::move(out), {x}, "upsample_nearest", [=](Node& self) {
        auto* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t xx = 0; xx < Wo; ++xx)
                    (*gx)[(nc * H + y / k) * W + xx / k] += self.grad[(nc * Ho + y) * Wo + xx];
    });
}

// Untracked nearest-neighbour resize for conditioning inputs such as masks.
inline Tensor resize_nearest(const Tensor& x, std::size_t Ho, std::size_t Wo) {
    detail::require_rank(x, 4, "resize_nearest");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H == Ho && W == Wo) return x.detach();
    std::vector<double> out(N * C * Ho * Wo);
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx)
                out[(nc * Ho + y) * Wo + xx] = x.vec()[(nc * H + y * H / Ho) * W + xx * W / Wo];
    return Tensor({N, C, Ho, Wo}, std::move(out));
}

// ------------------------------------------------------- tokens and matmul

// [N,C,H,W] -> [N,H*W,C]
inline Tensor to_tokens(const Tensor& x) {
    detail::require_rank(x, 4, "to_tokens");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) out[(n * HW + p) * C + c] = x.vec()[(n * C + c) * HW + p];
    return detail::make_result({N, HW, C}, std::move(out), {x}, "to_tokens", [=](Node& self) {
        auto* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < HW; ++p) (*gx)[(n * C + c) * HW + p] += self.grad[(n * HW + p) * C + c];
    });
}

// [N,H*W,C] -> [N,C,H,W]
inline Tensor from_tokens(const Tensor& t, std::size_t H, std::size_t W) {
    detail::require_rank(t, 3, "from_tokens");
    const std::size_t N = t.dim(0), HW = t.dim(1), C = t.dim(2);
    if (HW != H * W) throw ShapeError("from_tokens: token count does not match spatial extent");
    std::vector<double> out(t.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) out[(n * C + c) * HW + p] = t.vec()[(n * HW + p) * C + c];
    return detail::make_result({N, C, H, W}, std::move(out), {t}, "from_tokens", [=](Node& self) {
        auto* gt = detail::input_grad(self, 0);
        if (!gt) return;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < HW; ++p) (*gt)[(n * HW + p) * C + c] += self.grad[(n * C + c) * HW + p];
    });
}

// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Tensor transpose_last2(const Tensor& a) {
    if (a.rank() != 2 && a.rank() != 3) throw ShapeError("transpose_last2: rank must be 2 or 3");
    const std::size_t B = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t M = a.dim(a.rank() - 2), N = a.dim(a.rank() - 1);
    Shape s = a.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    std::vector<double> out(a.numel());
    for (std::size_t b = 0; b < B; ++b) {
        detail::ConstMap A(a.vec().data() + b * M * N, M, N);
        detail::MutMap O(out.data() + b * M * N, N, M);
        O = A.transpose();
    }
    return detail::make_result(s, std::move(out), {a}, "transpose", [=](Node& self) {
        auto* ga = detail::input_grad(self, 0);
        if (!ga) return;
        for (std::size_t b = 0; b < B; ++b) {
            detail::ConstMap G(self.grad.data() + b * M * N, N, M);
            detail::MutMap GA(ga->data() + b * M * N, M, N);
            GA += G.transpose();
        }
    });
}

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3))
        throw ShapeError("matmul: operands must both be rank 2 or both rank 3, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const bool batched = a.rank() == 3;
    const std::size_t B = batched ? a.dim(0) : 1;
    if (batched && b.dim(0) != B) throw ShapeError("matmul: batch extents differ");
    const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
    const std::size_t K2 = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
    if (K != K2)
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(B * M * N);
    for (std::size_t i = 0; i < B; ++i) {
        detail::ConstMap A(a.vec().data() + i * M * K, M, K);
        detail::ConstMap Bm(b.vec().data() + i * K * N, K, N);
        detail::MutMap O(out.data() + i * M * N, M, N);
        O.noalias() = A * Bm;
    }
    count_macs(static_cast<std::uint64_t>(B) * M * N * K);
    Shape s = batched ? Shape{B, M, N} : Shape{M, N};
    return detail::make_result(s, std::move(out), {a, b}, "matmul", [=](Node& self) {
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        auto* ga = detail::input_grad(self, 0);
        auto* gb = detail::input_grad(self, 1);
        for (std::size_t i = 0; i < B; ++i) {
            detail::ConstMap G(self.grad.data() + i * M * N, M, N);
            if (ga) {
                detail::ConstMap Bm(bv.data() + i * K * N, K, N);
                detail::MutMap GA(ga->data() + i * M * K, M, K);
                GA.noalias() += G * Bm.transpose();
            }
            if (gb) {
                detail::ConstMap A(av.data() + i * M * K, M, K);
                detail::MutMap GB(gb->data() + i * K * N, K, N);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

// Row-wise softmax over the last axis (max-shifted).
inline Tensor softmax_lastdim(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("softmax_lastdim: rank-0 tensor");
    const std::size_t L = a.dim(a.rank() - 1);
    if (L == 0) throw ShapeError("softmax_lastdim: empty softmax axis");
    const std::size_t rows = a.numel() / L;
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.vec().data() + r * L;
        double* y = out.data() + r * L;
        const double mx = *std::max_element(x, x + L);
        double s = 0.0;
        for (std::size_t j = 0; j < L; ++j) s += (y[j] = std::exp(x[j] - mx));
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < L; ++j) y[j] *= inv;
    }
    count_transcendental(a.numel());
    return detail::make_result(a.shape(), std::move(out), {a}, "softmax", [=](Node& self) {
        auto* ga = detail::input_grad(self, 0);
        if (!ga) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * L;
            const double* g = self.grad.data() + r * L;
            double dot = 0.0;
            for (std::size_t j = 0; j < L; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < L; ++j) (*ga)[r * L + j] += y[j] * (g[j] - dot);
        }
    });
}

}  // namespace asw
