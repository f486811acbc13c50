#pragma once

// Loop oracles for the segmentation network. They read parameter values from
// the library's structs but recompute everything with plain loops.

#include "asw/order.hpp"
#include "oracles.hpp"

namespace oracle {

inline Vec relu(Vec v) {
    for (double& x : v) x = std::max(x, 0.0);
    return v;
}

// One MKIR block on [N,C,H,W].
inline Vec mkir(const Vec& x, std::size_t N, std::size_t C, std::size_t H, std::size_t W, const asw::MkirBlock& b) {
    const std::size_t HW = H * W, E = 2 * C;
    Vec out(x.size());
    for (std::size_t n = 0; n < N; ++n) {
        const Vec xn(x.begin() + n * C * HW, x.begin() + (n + 1) * C * HW);
        const Vec h = relu(pointwise(xn, C, HW, b.expand.weight.vec(), b.expand.bias.vec(), E));
        Vec acc(E * HW, 0.0);
        for (const auto& dw : b.dw) {
            const Vec y = dwconv2d(h, 1, E, H, W, dw.weight.vec(), dw.kernel());
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += y[i];
        }
        const Vec p = pointwise(relu(acc), E, HW, b.proj.weight.vec(), b.proj.bias.vec(), C);
        for (std::size_t i = 0; i < C * HW; ++i) out[n * C * HW + i] = xn[i] + p[i];
    }
    return out;
}

struct AttnResult {
    Vec d, e, c;
};

// Bidirectional attention with each direction's similarity recomputed from
// scratch: decoder tokens attend over encoder tokens, then encoder tokens
// attend over decoder tokens.
inline AttnResult bidir_attention(const Vec& d, const Vec& e, std::size_t N, std::size_t C, std::size_t H,
                                  std::size_t W, const asw::BiAttnUnit& u, bool gate = true,
                                  std::optional<double> force = std::nullopt) {
    const std::size_t L = H * W, dh = u.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));
    AttnResult r{d, e, Vec(N)};
    for (std::size_t n = 0; n < N; ++n) {
        const Vec dn(d.begin() + n * C * L, d.begin() + (n + 1) * C * L);
        const Vec en(e.begin() + n * C * L, e.begin() + (n + 1) * C * L);
        const Vec Q = pointwise(dn, C, L, u.q.weight.vec(), u.q.bias.vec(), dh);
        const Vec K = pointwise(en, C, L, u.k.weight.vec(), u.k.bias.vec(), dh);
        const Vec Vd = pointwise(dn, C, L, u.v_d.weight.vec(), u.v_d.bias.vec(), C);
        const Vec Ve = pointwise(en, C, L, u.v_e.weight.vec(), u.v_e.bias.vec(), C);

        double c = 1.0;
        if (force) {
            c = *force;
        } else if (gate) {
            double z = u.gate.bias[0];
            for (std::size_t ch = 0; ch < C; ++ch) {
                double md = 0, me = 0;
                for (std::size_t p = 0; p < L; ++p) {
                    md += dn[ch * L + p];
                    me += en[ch * L + p];
                }
                z += u.gate.weight[ch] * md / double(L) + u.gate.weight[C + ch] * me / double(L);
            }
            c = sigmoid(z);
        }
        r.c[n] = c;

        // decoder direction: query i over keys j
        for (std::size_t i = 0; i < L; ++i) {
            Vec s(L);
            double mx = -INFINITY;
            for (std::size_t j = 0; j < L; ++j) {
                double acc = 0;
                for (std::size_t a = 0; a < dh; ++a) acc += Q[a * L + i] * K[a * L + j];
                s[j] = acc * scale;
                mx = std::max(mx, s[j]);
            }
            double z = 0;
            for (double& v : s) z += (v = std::exp(v - mx));
            for (std::size_t ch = 0; ch < C; ++ch) {
                double acc = 0;
                for (std::size_t j = 0; j < L; ++j) acc += s[j] / z * Ve[ch * L + j];
                r.d[(n * C + ch) * L + i] = dn[ch * L + i] + c * acc;
            }
        }
        // encoder direction: key j over queries i, similarity recomputed
        for (std::size_t j = 0; j < L; ++j) {
            Vec s(L);
            double mx = -INFINITY;
            for (std::size_t i = 0; i < L; ++i) {
                double acc = 0;
                for (std::size_t a = 0; a < dh; ++a) acc += K[a * L + j] * Q[a * L + i];
                s[i] = acc * scale;
                mx = std::max(mx, s[i]);
            }
            double z = 0;
            for (double& v : s) z += (v = std::exp(v - mx));
            for (std::size_t ch = 0; ch < C; ++ch) {
                double acc = 0;
                for (std::size_t i = 0; i < L; ++i) acc += s[i] / z * Vd[ch * L + i];
                r.e[(n * C + ch) * L + j] = en[ch * L + j] + c * acc;
            }
        }
    }
    return r;
}

// BCE + per-image soft Dice with the same clamping as the library.
inline double seg_loss(const Vec& p, const Vec& y, std::size_t N, double eps_s = 1e-6) {
    const std::size_t per = p.size() / N;
    double bce = 0, dice = 0;
    for (std::size_t n = 0; n < N; ++n) {
        double inter = 0, sp = 0, sy = 0;
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
            const double q = std::clamp(p[i], 1e-7, 1.0 - 1e-7);
            bce -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
            inter += q * y[i];
            sp += q;
            sy += y[i];
        }
        dice += 1.0 - (2.0 * inter + eps_s) / (sp + sy + eps_s);
    }
    return bce / double(p.size()) + dice / double(N);
}

}  // namespace oracle
