#pragma once

// Parameter counts and analytic FLOP estimates. One multiply-accumulate is two
// FLOPs; softmax costs five FLOPs per element; other pointwise ops cost the
// per-element figure recorded on their layer entry.

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "asw/law.hpp"
#include "asw/order.hpp"

namespace asw {

namespace layer {

struct Conv {
    std::string name;
    std::size_t cin, cout, k, Ho, Wo;
};
struct DwConv {
    std::string name;
    std::size_t C, k, H, W;
};
struct Pool {
    std::string name;
    std::size_t C, H, W;  // input extent; one FLOP per input element
};
struct Upsample {
    std::string name;
    std::size_t C, Ho, Wo;  // pure copy
};
struct Pointwise {
    std::string name;
    std::uint64_t elements;
    std::uint64_t flops_per_element;
};
struct Matmul {
    std::string name;
    std::size_t M, N, K;
};
struct Softmax {
    std::string name;
    std::uint64_t elements;
};

}  // namespace layer

using LayerSpec =
    std::variant<layer::Conv, layer::DwConv, layer::Pool, layer::Upsample, layer::Pointwise, layer::Matmul, layer::Softmax>;

inline constexpr std::uint64_t kSoftmaxFlops = 5;
inline constexpr std::uint64_t kSigmoidFlops = 4;

struct LayerCost {
    std::uint64_t macs = 0;
    std::uint64_t other_flops = 0;
    std::uint64_t flops() const { return 2 * macs + other_flops; }
};

inline LayerCost layer_cost(const LayerSpec& spec) {
    return std::visit(
        [](const auto& l) -> LayerCost {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, layer::Conv>)
                return {std::uint64_t{l.cout} * l.Ho * l.Wo * l.cin * l.k * l.k, 0};
            else if constexpr (std::is_same_v<T, layer::DwConv>)
                return {std::uint64_t{l.C} * l.H * l.W * l.k * l.k, 0};
            else if constexpr (std::is_same_v<T, layer::Pool>)
                return {0, std::uint64_t{l.C} * l.H * l.W};
            else if constexpr (std::is_same_v<T, layer::Upsample>)
                return {0, 0};
            else if constexpr (std::is_same_v<T, layer::Pointwise>)
                return {0, l.elements * l.flops_per_element};
            else if constexpr (std::is_same_v<T, layer::Matmul>)
                return {std::uint64_t{l.M} * l.N * l.K, 0};
            else
                return {0, l.elements * kSoftmaxFlops};
        },
        spec);
}

// ------------------------------------------------------------ layer walks

namespace detail {

inline void conv_spec(std::vector<LayerSpec>& out, const std::string& name, const Conv2d& c, std::size_t H,
                      std::size_t W) {
    const std::size_t Ho = (H + 2 * c.pad - c.kernel()) / c.stride + 1, Wo = (W + 2 * c.pad - c.kernel()) / c.stride + 1;
    out.push_back(layer::Conv{name, c.in_channels(), c.out_channels(), c.kernel(), Ho, Wo});
}

inline void mkir_specs(std::vector<LayerSpec>& out, const std::string& name, const MkirBlock& b, std::size_t H,
                       std::size_t W) {
    const std::size_t C = b.channels(), E = 2 * C, hw = H * W;
    conv_spec(out, name + ".expand", b.expand, H, W);
    out.push_back(layer::Pointwise{name + ".relu", E * hw, 1});
    for (const auto& dw : b.dw) out.push_back(layer::DwConv{name + ".dw" + std::to_string(dw.kernel()), E, dw.kernel(), H, W});
    out.push_back(layer::Pointwise{name + ".dwsum", (b.dw.size() - 1) * E * hw, 1});
    out.push_back(layer::Pointwise{name + ".relu", E * hw, 1});
    conv_spec(out, name + ".proj", b.proj, H, W);
    out.push_back(layer::Pointwise{name + ".residual", C * hw, 1});
}

inline void attn_specs(std::vector<LayerSpec>& out, const std::string& name, const BiAttnUnit& u, std::size_t H,
                       std::size_t W, std::size_t max_side, bool gate) {
    const std::size_t C = u.channels(), dh = u.head_dim(), hw = H * W;
    std::size_t f = 1;
    if (max_side && std::max(H, W) > max_side) f = (std::max(H, W) + max_side - 1) / max_side;
    const std::size_t h = H / f, w = W / f, L = h * w;
    if (f > 1) out.push_back(layer::Pool{name + ".pool", 2 * C, H, W});
    conv_spec(out, name + ".q", u.q, h, w);
    conv_spec(out, name + ".k", u.k, h, w);
    conv_spec(out, name + ".v_d", u.v_d, h, w);
    conv_spec(out, name + ".v_e", u.v_e, h, w);
    out.push_back(layer::Matmul{name + ".S", L, L, dh});
    out.push_back(layer::Pointwise{name + ".scale", std::uint64_t{L} * L, 1});
    out.push_back(layer::Softmax{name + ".softmax_S", std::uint64_t{L} * L});
    out.push_back(layer::Softmax{name + ".softmax_ST", std::uint64_t{L} * L});
    out.push_back(layer::Matmul{name + ".delta_d", L, C, L});
    out.push_back(layer::Matmul{name + ".delta_e", L, C, L});
    if (f > 1) out.push_back(layer::Upsample{name + ".upsample", 2 * C, H, W});
    if (gate) {
        out.push_back(layer::Pool{name + ".gap", 2 * C, H, W});
        conv_spec(out, name + ".gate", u.gate, 1, 1);
        out.push_back(layer::Pointwise{name + ".gate_sigmoid", 1, kSigmoidFlops});
    }
    out.push_back(layer::Pointwise{name + ".gated_update", 4 * C * hw, 1});  // c * delta, then add, for both streams
}

}  // namespace detail

// Batch-1 forward of the segmentation network at H x W.
inline std::vector<LayerSpec> layer_specs(const OrderNetwork& net, std::size_t H, std::size_t W) {
    if (H % net.cfg.divisor() || W % net.cfg.divisor())
        throw ShapeError("layer_specs: input " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by " +
                         std::to_string(net.cfg.divisor()));
    const auto& ch = net.cfg.channels;
    const std::size_t L = ch.size();
    std::vector<LayerSpec> out;
    detail::conv_spec(out, "stem", net.stem, H, W);
    std::vector<std::size_t> hs(L), ws(L);
    for (std::size_t i = 0; i < L; ++i) {
        hs[i] = H >> i;
        ws[i] = W >> i;
        if (i) {
            out.push_back(layer::Pool{"down" + std::to_string(i) + ".maxpool", ch[i - 1], hs[i - 1], ws[i - 1]});
            detail::conv_spec(out, "down" + std::to_string(i), net.down[i], hs[i], ws[i]);
        }
        detail::mkir_specs(out, "enc" + std::to_string(i), net.enc[i], hs[i], ws[i]);
    }
    for (std::size_t i = L; i-- > 0;) {
        if (i + 1 < L) {
            out.push_back(layer::Upsample{"up" + std::to_string(i) + ".nearest", ch[i + 1], hs[i], ws[i]});
            detail::conv_spec(out, "up" + std::to_string(i), net.up[i], hs[i], ws[i]);
        }
        detail::mkir_specs(out, "dec" + std::to_string(i), net.dec[i], hs[i], ws[i]);
        if (auto it = net.attn.find(i); it != net.attn.end())
            detail::attn_specs(out, "attn" + std::to_string(i), it->second, hs[i], ws[i], net.cfg.attn_max_side,
                               net.cfg.gate_enabled);
        out.push_back(layer::Pointwise{"skip" + std::to_string(i), ch[i] * hs[i] * ws[i], 1});
    }
    detail::conv_spec(out, "head", net.head, H, W);
    out.push_back(layer::Pointwise{"head.sigmoid", H * W, kSigmoidFlops});
    return out;
}

inline std::vector<LayerSpec> layer_specs(const SurrogateDenoiser& d, std::size_t H, std::size_t W,
                                          const std::string& name = "denoiser") {
    std::vector<LayerSpec> out;
    for (const auto* c : {&d.c1, &d.c2, &d.c3}) {
        detail::conv_spec(out, name + ".conv", *c, H, W);
        if (c != &d.c3) out.push_back(layer::Pointwise{name + ".relu", c->out_channels() * H * W, 1});
    }
    return out;
}

inline std::vector<LayerSpec> layer_specs(const DeltaNet& phi, std::size_t H, std::size_t W) {
    std::vector<LayerSpec> out;
    for (const auto* c : {&phi.c1, &phi.c2, &phi.c3}) {
        detail::conv_spec(out, "phi.conv", *c, H, W);
        if (c != &phi.c3) out.push_back(layer::Pointwise{"phi.relu", c->out_channels() * H * W, 1});
    }
    out.push_back(layer::Pointwise{"phi.sigmoid", H * W, kSigmoidFlops});
    return out;
}

// --------------------------------------------------------------- reports

struct ProfileReport {
    std::size_t total_params = 0;
    std::map<std::string, std::size_t> breakdown;  // keyed by the first segment of the parameter name
    std::uint64_t macs = 0;
    std::uint64_t flops = 0;
    std::size_t input_height = 0;
    std::size_t input_width = 0;

    double gflops() const { return static_cast<double>(flops) * 1e-9; }
};

inline void to_json(nlohmann::json& j, const ProfileReport& r) {
    j = {{"total_params", r.total_params},
         {"breakdown", r.breakdown},
         {"macs", r.macs},
         {"flops", r.flops},
         {"gflops", r.gflops()},
         {"input_size", {r.input_height, r.input_width}}};
}

inline ProfileReport count_params(const ParamList& params) {
    ProfileReport r;
    for (const auto& p : params) {
        r.total_params += p.tensor.numel();
        r.breakdown[p.name.substr(0, p.name.find('.'))] += p.tensor.numel();
    }
    return r;
}

inline void add_flops(ProfileReport& r, const std::vector<LayerSpec>& specs) {
    for (const auto& s : specs) {
        const LayerCost c = layer_cost(s);
        r.macs += c.macs;
        r.flops += c.flops();
    }
}

inline ProfileReport profile(const OrderNetwork& net, std::size_t H, std::size_t W) {
    ProfileReport r = count_params(net.params());
    r.input_height = H;
    r.input_width = W;
    add_flops(r, layer_specs(net, H, W));
    return r;
}

inline ProfileReport profile(const LawState& s, std::size_t H, std::size_t W) {
    ProfileReport r = count_params(s.params());
    r.input_height = H;
    r.input_width = W;
    add_flops(r, layer_specs(s.student, H, W, "student"));
    add_flops(r, layer_specs(s.teacher, H, W, "teacher"));
    add_flops(r, layer_specs(s.phi, H, W));
    return r;
}

}  // namespace asw
