#pragma once

// MK-UNet with optional bidirectional skip attention (ORDER) and the BCE+Dice
// segmentation objective.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asw/data.hpp"
#include "asw/diverged.hpp"
#include "asw/metrics.hpp"
#include "asw/nn.hpp"
#include "asw/optim.hpp"

namespace asw {

// ------------------------------------------------------------------- MKIR

inline constexpr std::size_t kMkirKernels[] = {1, 3, 5};

// x + Proj(sum_k DWConv_k(Expand(x))), ReLU after the expansion and after the
// depthwise sum.
struct MkirBlock {
    Conv2d expand;  // C -> 2C, 1x1
    std::vector<DepthwiseConv2d> dw;
    Conv2d proj;  // 2C -> C, 1x1

    static MkirBlock make(std::size_t C, Rng& rng) {
        MkirBlock b;
        b.expand = Conv2d::make(C, 2 * C, 1, rng);
        for (std::size_t k : kMkirKernels) b.dw.push_back(DepthwiseConv2d::make(2 * C, k, rng));
        b.proj = Conv2d::make(2 * C, C, 1, rng);
        return b;
    }

    std::size_t channels() const { return expand.in_channels(); }

    Tensor operator()(const Tensor& x) const {
        detail::require_rank(x, 4, "mkir");
        if (x.dim(1) != channels())
            throw ShapeError("mkir: block has " + std::to_string(channels()) + " channels, input has " +
                             std::to_string(x.dim(1)));
        const Tensor h = relu(expand(x));
        Tensor acc = dw[0](h);
        for (std::size_t i = 1; i < dw.size(); ++i) acc = acc + dw[i](h);
        return x + proj(relu(acc));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        expand.collect(prefix + ".expand", out);
        for (std::size_t i = 0; i < dw.size(); ++i) dw[i].collect(prefix + ".dw" + std::to_string(dw[i].kernel()), out);
        proj.collect(prefix + ".proj", out);
    }
};

// ------------------------------------------------------ skip attention

struct AttnOptions {
    bool gate_enabled = true;
    std::optional<double> force_gate;  // replaces the predicted gate when set
    std::size_t max_side = 0;          // pool tokens down to this side length; 0 keeps native resolution
};

struct AttnOutput {
    Tensor d;  // d + c * delta_d
    Tensor e;  // e + c * delta_e
    Tensor S;  // [N, L, L], decoder queries against encoder keys
    Tensor c;  // [N]
};

struct BiAttnUnit {
    Conv2d q, k, v_d, v_e;  // 1x1 projections
    Conv2d gate;            // 2C -> 1 over pooled [d; e]

    static BiAttnUnit make(std::size_t C, std::size_t d_h, Rng& rng) {
        if (C == 0 || d_h == 0) throw std::invalid_argument("attention unit needs positive channel counts");
        return {Conv2d::make(C, d_h, 1, rng), Conv2d::make(C, d_h, 1, rng), Conv2d::make(C, C, 1, rng),
                Conv2d::make(C, C, 1, rng), Conv2d::make(2 * C, 1, 1, rng)};
    }

    std::size_t channels() const { return q.in_channels(); }
    std::size_t head_dim() const { return q.out_channels(); }

    Tensor confidence(const Tensor& d, const Tensor& e) const {
        const Tensor pooled = concat_channels({global_avg_pool(d), global_avg_pool(e)});
        return reshape(sigmoid(gate(pooled)), {d.dim(0)});
    }

    AttnOutput operator()(const Tensor& d, const Tensor& e, const AttnOptions& opt = {}) const {
        detail::require_rank(d, 4, "bidir_attention");
        if (d.shape() != e.shape())
            throw ShapeError("bidir_attention: decoder " + shape_str(d.shape()) + " vs encoder " + shape_str(e.shape()));
        if (d.dim(1) != channels())
            throw ShapeError("bidir_attention: unit has " + std::to_string(channels()) + " channels, features have " +
                             std::to_string(d.dim(1)));
        const std::size_t N = d.dim(0), H = d.dim(2), W = d.dim(3);
        std::size_t f = 1;
        if (opt.max_side && std::max(H, W) > opt.max_side) {
            f = (std::max(H, W) + opt.max_side - 1) / opt.max_side;
            if (H % f || W % f)
                throw ShapeError("bidir_attention: " + std::to_string(H) + "x" + std::to_string(W) +
                                 " cannot be pooled by " + std::to_string(f));
        }
        const Tensor dp = f > 1 ? avgpool2d(d, f) : d;
        const Tensor ep = f > 1 ? avgpool2d(e, f) : e;
        const std::size_t h = H / f, w = W / f;

        const Tensor Q = to_tokens(q(dp)), K = to_tokens(k(ep));
        const Tensor Vd = to_tokens(v_d(dp)), Ve = to_tokens(v_e(ep));
        AttnOutput out;
        out.S = matmul(Q, transpose_last2(K)) * (1.0 / std::sqrt(static_cast<double>(head_dim())));
        Tensor delta_d = from_tokens(matmul(softmax_lastdim(out.S), Ve), h, w);
        Tensor delta_e = from_tokens(matmul(softmax_lastdim(transpose_last2(out.S)), Vd), h, w);
        if (f > 1) {
            delta_d = upsample_nearest(delta_d, f);
            delta_e = upsample_nearest(delta_e, f);
        }
        if (opt.force_gate)
            out.c = Tensor::full({N}, *opt.force_gate);
        else
            out.c = opt.gate_enabled ? confidence(d, e) : Tensor::full({N}, 1.0);
        out.d = d + scale_batch(delta_d, out.c);
        out.e = e + scale_batch(delta_e, out.c);
        return out;
    }

    void collect(const std::string& prefix, ParamList& out) const {
        q.collect(prefix + ".q", out);
        k.collect(prefix + ".k", out);
        v_d.collect(prefix + ".v_d", out);
        v_e.collect(prefix + ".v_e", out);
        gate.collect(prefix + ".gate", out);
    }
};

inline Tensor fuse_skip(const Tensor& d, const Tensor& e) {
    if (d.shape() != e.shape()) throw ShapeError("fuse_skip: " + shape_str(d.shape()) + " vs " + shape_str(e.shape()));
    return d + e;
}

// --------------------------------------------------------------- network

struct OrderConfig {
    std::vector<std::size_t> channels{4, 8, 16, 24, 32};
    std::set<std::size_t> attn_stages;  // decoder stages; 0 is the highest resolution
    std::size_t in_channels = 1;
    std::size_t heads = 1;
    bool gate_enabled = true;
    std::size_t attn_max_side = 0;
    std::size_t input_size = 64;

    std::size_t stages() const { return channels.size(); }
    std::size_t divisor() const { return std::size_t{1} << (stages() - 1); }

    void validate() const {
        if (channels.size() < 2) throw std::invalid_argument("order.channels needs at least two stages");
        for (std::size_t i = 0; i < channels.size(); ++i) {
            if (channels[i] == 0) throw std::invalid_argument("order.channels must be positive");
            if (i && channels[i] <= channels[i - 1]) throw std::invalid_argument("order.channels must be strictly increasing");
        }
        for (std::size_t s : attn_stages)
            if (s >= channels.size())
                throw std::invalid_argument("order.attn_stages contains stage " + std::to_string(s) + ", valid range is 0.." +
                                            std::to_string(channels.size() - 1));
        if (heads != 1) throw std::invalid_argument("order.heads: only single-head attention is supported");
        if (in_channels != 1 && in_channels != 3) throw std::invalid_argument("order.in_channels must be 1 or 3");
        if (input_size == 0 || input_size % divisor())
            throw std::invalid_argument("order.input_size must be a positive multiple of " + std::to_string(divisor()));
    }
};

inline void to_json(nlohmann::json& j, const OrderConfig& c) {
    j = {{"channels", c.channels},
         {"attn_stages", std::vector<std::size_t>(c.attn_stages.begin(), c.attn_stages.end())},
         {"in_channels", c.in_channels},
         {"heads", c.heads},
         {"gate_enabled", c.gate_enabled},
         {"attn_max_side", c.attn_max_side},
         {"input_size", c.input_size}};
}

struct ForwardTrace {
    Tensor prob;                   // [N,1,H,W]
    std::map<std::size_t, Tensor> gates;  // per attention stage, [N]
};

struct OrderNetwork {
    OrderConfig cfg;
    Conv2d stem;
    std::vector<Conv2d> down;  // entry i (i >= 1) maps c_{i-1} -> c_i after pooling; entry 0 unused
    std::vector<MkirBlock> enc, dec;
    std::vector<Conv2d> up;  // entry i (i < last) maps c_{i+1} -> c_i after upsampling
    std::map<std::size_t, BiAttnUnit> attn;
    Conv2d head;

    // The backbone draws from the "init" stream in a fixed order and each
    // attention unit from its own stream, so adding attention never changes
    // the backbone's initial weights.
    static OrderNetwork make(const OrderConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        OrderNetwork net;
        net.cfg = cfg;
        const auto& ch = cfg.channels;
        const std::size_t L = ch.size();
        Rng rng(seed, "init");
        net.stem = Conv2d::make(cfg.in_channels, ch[0], 3, rng);
        net.down.resize(L);
        for (std::size_t i = 0; i < L; ++i) {
            if (i) net.down[i] = Conv2d::make(ch[i - 1], ch[i], 1, rng);
            net.enc.push_back(MkirBlock::make(ch[i], rng));
        }
        net.up.resize(L);
        net.dec.resize(L);
        for (std::size_t i = L; i-- > 0;) {
            if (i + 1 < L) net.up[i] = Conv2d::make(ch[i + 1], ch[i], 1, rng);
            net.dec[i] = MkirBlock::make(ch[i], rng);
        }
        net.head = Conv2d::make(ch[0], 1, 1, rng);
        for (std::size_t s : cfg.attn_stages) {
            Rng ra(seed, "init.attn", s);
            net.attn.emplace(s, BiAttnUnit::make(ch[s], ch[s], ra));
        }
        return net;
    }

    AttnOptions attn_options() const {
        AttnOptions o;
        o.gate_enabled = cfg.gate_enabled;
        o.max_side = cfg.attn_max_side;
        return o;
    }

    ForwardTrace trace(const Tensor& x, std::optional<double> force_gate = std::nullopt) const {
        detail::require_rank(x, 4, "order_forward");
        if (x.dim(1) != cfg.in_channels)
            throw ShapeError("order_forward: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                             std::to_string(x.dim(1)));
        if (x.dim(2) % cfg.divisor() || x.dim(3) % cfg.divisor())
            throw ShapeError("order_forward: input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                             " is not divisible by " + std::to_string(cfg.divisor()));
        const std::size_t L = cfg.stages();
        std::vector<Tensor> e(L);
        e[0] = enc[0](stem(x));
        for (std::size_t i = 1; i < L; ++i) e[i] = enc[i](down[i](maxpool2d(e[i - 1])));

        ForwardTrace tr;
        AttnOptions opt = attn_options();
        opt.force_gate = force_gate;
        Tensor out;
        for (std::size_t i = L; i-- > 0;) {
            const Tensor in = i + 1 == L ? e[i] : up[i](upsample_nearest(out));
            const Tensor d = dec[i](in);
            if (auto it = attn.find(i); it != attn.end()) {
                const AttnOutput a = it->second(d, e[i], opt);
                tr.gates[i] = a.c;
                out = fuse_skip(a.d, a.e);
            } else {
                out = fuse_skip(d, e[i]);
            }
        }
        tr.prob = sigmoid(head(out));
        return tr;
    }

    Tensor operator()(const Tensor& x) const { return trace(x).prob; }

    ParamList params() const {
        ParamList out;
        stem.collect("stem", out);
        for (std::size_t i = 0; i < cfg.stages(); ++i) {
            if (i) down[i].collect("down" + std::to_string(i), out);
            enc[i].collect("enc" + std::to_string(i), out);
        }
        for (std::size_t i = cfg.stages(); i-- > 0;) {
            if (i + 1 < cfg.stages()) up[i].collect("up" + std::to_string(i), out);
            dec[i].collect("dec" + std::to_string(i), out);
        }
        for (const auto& [s, unit] : attn) unit.collect("attn" + std::to_string(s), out);
        head.collect("head", out);
        return out;
    }
};

// MK-UNet: the same backbone with additive skips everywhere.
inline OrderNetwork make_mkunet(OrderConfig cfg, std::uint64_t seed) {
    cfg.attn_stages.clear();
    return OrderNetwork::make(cfg, seed);
}

// ------------------------------------------------------------------ loss

inline constexpr double kProbEps = 1e-7;

// BCE + soft Dice on clamped probabilities; Dice is computed per image and
// averaged.
inline Tensor seg_loss(const Tensor& pred, const Tensor& target, double eps_s = 1e-6) {
    if (pred.shape() != target.shape())
        throw ShapeError("seg_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    detail::require_rank(pred, 4, "seg_loss");
    const Tensor p = clamp(pred, kProbEps, 1.0 - kProbEps);
    const Tensor bce = -mean_all(target * log(p) + (1.0 - target) * log(1.0 - p));
    const Tensor inter = sum_spatial(p * target);
    const Tensor dice = mean_all(1.0 - (inter * 2.0 + eps_s) / (sum_spatial(p) + sum_spatial(target) + eps_s));
    return bce + dice;
}

// -------------------------------------------------------------- training

struct SegTrainConfig {
    std::size_t epochs = 10;
    std::size_t batch = 8;
    double lr = 3e-3;
    std::uint64_t seed = 0;
    bool flips = true;
};

inline void to_json(nlohmann::json& j, const SegTrainConfig& c) {
    j = {{"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.lr}, {"seed", c.seed}, {"flips", c.flips}};
}

struct SegEpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_mdice = 0.0;
    double val_miou = 0.0;
};

inline void to_json(nlohmann::json& j, const SegEpochLog& r) {
    j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_mdice", r.val_mdice}, {"val_miou", r.val_miou}};
}

struct SegRun {
    OrderNetwork net;
    std::vector<SegEpochLog> log;
};

inline MeanMetrics evaluate_seg(const OrderNetwork& net, const std::vector<SamplePair>& data, std::size_t batch = 16) {
    NoGradGuard ng;
    std::vector<ImageMetrics> all;
    for (std::size_t start = 0; start < data.size(); start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
        const auto per = per_image_metrics(net(stack_images(data, idx)), stack_masks(data, idx));
        all.insert(all.end(), per.begin(), per.end());
    }
    return mean_metrics(all);
}

namespace detail {

// In-place horizontal and/or vertical flip of a [N,C,H,W] buffer, per sample.
inline void flip_sample(std::vector<double>& v, std::size_t n, std::size_t C, std::size_t H, std::size_t W, bool fh,
                        bool fv) {
    for (std::size_t c = 0; c < C; ++c) {
        double* base = v.data() + (n * C + c) * H * W;
        if (fh)
            for (std::size_t y = 0; y < H; ++y) std::reverse(base + y * W, base + (y + 1) * W);
        if (fv)
            for (std::size_t y = 0; y < H / 2; ++y) std::swap_ranges(base + y * W, base + (y + 1) * W, base + (H - 1 - y) * W);
    }
}

}  // namespace detail

inline SegRun train_seg(const std::vector<SamplePair>& train, const std::vector<SamplePair>& val, const OrderConfig& cfg,
                        const SegTrainConfig& tc) {
    if (train.empty()) throw std::invalid_argument("segmentation training needs a non-empty training set");
    if (tc.batch == 0) throw std::invalid_argument("batch size must be positive");
    SegRun run{OrderNetwork::make(cfg, tc.seed), {}};
    Adam opt(run.net.params(), {tc.lr});
    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(tc.seed, "data", epoch);
        std::shuffle(order.begin(), order.end(), rng.engine());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + tc.batch)));
            Tensor x = stack_images(train, idx), y = stack_masks(train, idx);
            if (tc.flips) {
                std::vector<double> xv = x.vec(), yv = y.vec();
                for (std::size_t n = 0; n < idx.size(); ++n) {
                    const bool fh = rng.uniform() < 0.5, fv = rng.uniform() < 0.5;
                    detail::flip_sample(xv, n, x.dim(1), x.dim(2), x.dim(3), fh, fv);
                    detail::flip_sample(yv, n, 1, y.dim(2), y.dim(3), fh, fv);
                }
                x = Tensor(x.shape(), std::move(xv));
                y = Tensor(y.shape(), std::move(yv));
            }
            Tensor loss;
            try {
                loss = seg_loss(run.net(x), y);
            } catch (const NonFiniteError& e) {
                throw TrainingDiverged("non-finite value in epoch " + std::to_string(epoch) + ": " + e.what(),
                                       {{"epoch", epoch}, {"batch_start", start}, {"error", e.what()}});
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        const MeanMetrics m = val.empty() ? MeanMetrics{} : evaluate_seg(run.net, val);
        run.log.push_back({epoch, loss_sum / static_cast<double>(batches), m.mdice, m.miou});
    }
    return run;
}

}  // namespace asw
