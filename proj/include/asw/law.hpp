#pragma once

// Learnable adaptive weighting (LAW) for mask-conditioned denoising: ratio
// prior, learned delta map, weight finalisation, the four loss terms and a
// desk-scale training loop around a surrogate student/teacher pair.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asw/data.hpp"
#include "asw/diverged.hpp"
#include "asw/metrics.hpp"
#include "asw/nn.hpp"
#include "asw/optim.hpp"

namespace asw {

struct DegenerateWeightsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------- noise schedule

struct NoiseSchedule {
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    std::size_t T() const { return alpha_bar.size(); }

    // Linearly spaced betas; alpha_bar_t = prod_{i<=t} (1 - beta_i).
    static NoiseSchedule linear(std::size_t T = 100, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (T == 0) throw std::invalid_argument("noise schedule needs at least one step");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw std::invalid_argument("noise schedule betas must satisfy 0 < start <= end < 1");
        NoiseSchedule s;
        double prod = 1.0;
        for (std::size_t t = 0; t < T; ++t) {
            const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / static_cast<double>(T - 1);
            prod *= 1.0 - b;
            s.beta.push_back(b);
            s.alpha_bar.push_back(prod);
        }
        return s;
    }
};

inline Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t >= sched.T())
        throw std::out_of_range("forward_diffuse: timestep " + std::to_string(t) + " outside [0, " +
                                std::to_string(sched.T()) + ")");
    if (z0.shape() != eps.shape()) throw ShapeError("forward_diffuse: z0 and eps differ in shape");
    const double ab = sched.alpha_bar[t];
    return z0 * std::sqrt(ab) + eps * std::sqrt(1.0 - ab);
}

// Per-sample timesteps: z0, eps are [N,...] and t has N entries.
inline Tensor forward_diffuse(const Tensor& z0, const std::vector<std::size_t>& t, const Tensor& eps,
                              const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape()) throw ShapeError("forward_diffuse: z0 and eps differ in shape");
    if (t.size() != z0.dim(0)) throw ShapeError("forward_diffuse: one timestep per sample required");
    std::vector<double> a(t.size()), b(t.size());
    for (std::size_t n = 0; n < t.size(); ++n) {
        if (t[n] >= sched.T()) throw std::out_of_range("forward_diffuse: timestep out of range");
        a[n] = std::sqrt(sched.alpha_bar[t[n]]);
        b[n] = std::sqrt(1.0 - sched.alpha_bar[t[n]]);
    }
    return scale_batch(z0, Tensor({t.size()}, a)) + scale_batch(eps, Tensor({t.size()}, b));
}

// ---------------------------------------------------------------- config

struct LawConfig {
    double gamma = 0.2;
    double tau = 3.0;
    double w_min = 1e-3;
    double w_max = 2.0;
    double lambda_dice = 1.0;
    double beta_T = 0.05;
    double beta_D = 0.05;
    double eps_s = 1e-6;

    bool use_ratio = true;  // off: the prior is uniform 1.0
    bool use_delta = true;
    bool use_norm = true;
    bool use_min_clamp = true;
    bool use_max_clamp = true;
    bool use_dice = true;

    bool weights_through_phi = false;  // let L_S and L_dist reach phi via w_final
    bool per_batch_norm = false;
    bool degenerate_fallback = true;

    void validate() const {
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("law.gamma must lie in [0, 1]");
        if (!(tau > 0.0)) throw std::invalid_argument("law.tau must be positive");
        if (!(w_min > 0.0 && w_min <= w_max)) throw std::invalid_argument("law weights need 0 < w_min <= w_max");
        if (eps_s < 0.0 || lambda_dice < 0.0 || beta_T < 0.0 || beta_D < 0.0)
            throw std::invalid_argument("law loss coefficients must be non-negative");
    }

    // Every weighting mechanism off: plain uniform-MSE training.
    static LawConfig uniform() {
        LawConfig c;
        c.use_ratio = c.use_delta = c.use_norm = c.use_min_clamp = c.use_max_clamp = c.use_dice = false;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const LawConfig& c) {
    j = {{"gamma", c.gamma},
         {"tau", c.tau},
         {"w_min", c.w_min},
         {"w_max", c.w_max},
         {"lambda_dice", c.lambda_dice},
         {"beta_T", c.beta_T},
         {"beta_D", c.beta_D},
         {"eps_s", c.eps_s},
         {"use_ratio", c.use_ratio},
         {"use_delta", c.use_delta},
         {"use_norm", c.use_norm},
         {"use_min_clamp", c.use_min_clamp},
         {"use_max_clamp", c.use_max_clamp},
         {"use_dice", c.use_dice},
         {"weights_through_phi", c.weights_through_phi},
         {"per_batch_norm", c.per_batch_norm},
         {"degenerate_fallback", c.degenerate_fallback}};
}

// ------------------------------------------------------------ weight maps

namespace detail {

inline void require_mask(const Tensor& m, const char* op) {
    require_rank(m, 4, op);
    if (m.dim(1) != 1) throw ShapeError(std::string(op) + ": mask must have one channel, got " + shape_str(m.shape()));
}

}  // namespace detail

// m: [N,1,H,W] in [0,1]. Masks with r in {0,1} give uniform 1.0 unless the
// fallback is disabled, in which case the raw prior is returned.
inline Tensor ratio_prior(const Tensor& m, bool degenerate_fallback = true) {
    detail::require_mask(m, "ratio_prior");
    const std::size_t N = m.dim(0), hw = m.dim(2) * m.dim(3);
    std::vector<double> w(m.numel());
    for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
            const double v = m.vec()[n * hw + p];
            if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("ratio_prior: mask values must lie in [0, 1]");
            s += v;
        }
        const double r = s / static_cast<double>(hw);
        const bool degenerate = r == 0.0 || r == 1.0;
        for (std::size_t p = 0; p < hw; ++p) {
            const double v = m.vec()[n * hw + p];
            w[n * hw + p] = degenerate && degenerate_fallback ? 1.0 : v * (1.0 - r) + (1.0 - v) * r;
        }
    }
    return Tensor(m.shape(), std::move(w));
}

// Brings the mask to (H,W) by nearest-neighbour resampling when the scale
// factor is a whole number in each direction.
inline Tensor align_mask(const Tensor& m, std::size_t H, std::size_t W) {
    detail::require_mask(m, "align_mask");
    const std::size_t h = m.dim(2), w = m.dim(3);
    if (h == H && w == W) return m;
    auto whole = [](std::size_t a, std::size_t b) { return a >= b ? a % b == 0 : b % a == 0; };
    if (!whole(h, H) || !whole(w, W))
        throw ShapeError("align_mask: cannot map mask " + shape_str(m.shape()) + " onto " + std::to_string(H) + "x" +
                         std::to_string(W));
    return resize_nearest(m, H, W);
}

// phi: three 3x3 convolutions over [f_t; m] with ReLU between them.
struct DeltaNet {
    Conv2d c1, c2, c3;

    static DeltaNet make(std::size_t feature_channels, std::size_t hidden, Rng& rng) {
        return {Conv2d::make(feature_channels + 1, hidden, 3, rng), Conv2d::make(hidden, hidden, 3, rng),
                Conv2d::make(hidden, 1, 3, rng)};
    }

    std::size_t feature_channels() const { return c1.in_channels() - 1; }

    Tensor operator()(const Tensor& f, const Tensor& m) const {
        detail::require_rank(f, 4, "delta_net");
        if (f.dim(1) != feature_channels())
            throw ShapeError("delta_net: expected " + std::to_string(feature_channels()) + " feature channels, got " +
                             std::to_string(f.dim(1)));
        const Tensor mm = align_mask(m, f.dim(2), f.dim(3));
        if (mm.dim(0) != f.dim(0)) throw ShapeError("delta_net: batch sizes differ");
        return c3(relu(c2(relu(c1(concat_channels({f, mm}))))));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        c1.collect(prefix + ".c1", out);
        c2.collect(prefix + ".c2", out);
        c3.collect(prefix + ".c3", out);
    }
};

inline Tensor delta_from_logits(const Tensor& logits, double tau) { return sigmoid(logits * (1.0 / tau)); }

inline Tensor delta_map(const Tensor& f, const Tensor& m, const DeltaNet& phi, double tau) {
    return delta_from_logits(phi(f, m), tau);
}

inline Tensor modulate(const Tensor& delta, double gamma) { return 1.0 + gamma * (2.0 * delta - 1.0); }

struct WeightMaps {
    Tensor w_final;
    Tensor normalized;  // after mean normalisation, before clamping (undefined if use_norm is off)
};

inline WeightMaps finalize_weights(const Tensor& w_ratio, const Tensor& mu, const LawConfig& cfg) {
    if (w_ratio.shape() != mu.shape())
        throw ShapeError("finalize_weights: " + shape_str(w_ratio.shape()) + " vs " + shape_str(mu.shape()));
    detail::require_mask(mu, "finalize_weights");
    Tensor w = w_ratio * mu;
    WeightMaps out;
    if (cfg.use_norm) {
        const std::size_t N = w.dim(0);
        if (cfg.per_batch_norm) {
            const Tensor mean = mean_all(w);
            if (!(mean.item() > 0.0)) throw DegenerateWeightsError("finalize_weights: adaptive weights have zero mean");
            w = w / mean;
        } else {
            const Tensor mean = reshape(mean_spatial(w), {N});
            for (double v : mean.vec())
                if (!(v > 0.0)) throw DegenerateWeightsError("finalize_weights: a sample's adaptive weights have zero mean");
            w = scale_batch(w, reciprocal(mean));
        }
        out.normalized = w;
    }
    if (cfg.use_min_clamp || cfg.use_max_clamp) {
        const double inf = std::numeric_limits<double>::infinity();
        w = clamp(w, cfg.use_min_clamp ? cfg.w_min : -inf, cfg.use_max_clamp ? cfg.w_max : inf);
    }
    out.w_final = w;
    return out;
}

// ------------------------------------------------------------------ losses

// Mean over all elements of w * (pred - target)^2; w is [N,1,H,W] and shared
// across channels.
inline Tensor weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& w) {
    if (pred.shape() != target.shape())
        throw ShapeError("weighted_mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    return mean_all(mul_bcast_channels(square(pred - target), w));
}

inline Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) throw ShapeError("mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    return mean_all(square(pred - target));
}

// Soft Dice loss per sample, averaged over the batch.
inline Tensor dice_regularizer(const Tensor& delta, const Tensor& m, double eps_s = 1e-6) {
    if (delta.shape() != m.shape())
        throw ShapeError("dice_regularizer: " + shape_str(delta.shape()) + " vs " + shape_str(m.shape()));
    detail::require_rank(delta, 4, "dice_regularizer");
    const Tensor inter = sum_spatial(delta * m);
    const Tensor denom = sum_spatial(delta) + sum_spatial(m) + eps_s;
    return mean_all(1.0 - (inter * 2.0 + eps_s) / denom);
}

// -------------------------------------------------------- surrogate models

// Sinusoidal timestep channels: sin/cos pairs at frequencies pi * 2^j * t / T.
inline Tensor timestep_embedding(const std::vector<std::size_t>& t, std::size_t T, std::size_t channels, std::size_t H,
                                 std::size_t W) {
    const std::size_t N = t.size(), hw = H * W;
    std::vector<double> out(N * channels * hw);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
            const double freq = std::numbers::pi * std::pow(2.0, static_cast<double>(c / 2));
            const double arg = freq * static_cast<double>(t[n]) / static_cast<double>(T);
            const double v = c % 2 == 0 ? std::sin(arg) : std::cos(arg);
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((n * channels + c) * hw), hw, v);
        }
    return Tensor({N, channels, H, W}, std::move(out));
}

// Predicts the noise from [z_t; m; emb(t)] with three 3x3 convolutions.
struct SurrogateDenoiser {
    Conv2d c1, c2, c3;
    std::size_t emb_channels = 4;
    std::size_t T = 100;

    static SurrogateDenoiser make(std::size_t latent_channels, std::size_t hidden, std::size_t emb_channels,
                                  std::size_t T, Rng& rng) {
        return {Conv2d::make(latent_channels + 1 + emb_channels, hidden, 3, rng), Conv2d::make(hidden, hidden, 3, rng),
                Conv2d::make(hidden, latent_channels, 3, rng), emb_channels, T};
    }

    Tensor operator()(const Tensor& zt, const std::vector<std::size_t>& t, const Tensor& m) const {
        detail::require_rank(zt, 4, "denoiser");
        const std::size_t H = zt.dim(2), W = zt.dim(3);
        std::vector<Tensor> parts{zt, align_mask(m, H, W)};
        if (emb_channels) parts.push_back(timestep_embedding(t, T, emb_channels, H, W));
        return c3(relu(c2(relu(c1(concat_channels(parts))))));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        c1.collect(prefix + ".c1", out);
        c2.collect(prefix + ".c2", out);
        c3.collect(prefix + ".c3", out);
    }
};

struct LawModelConfig {
    std::size_t latent_channels = 1;
    std::size_t student_hidden = 16;
    std::size_t teacher_hidden = 32;
    std::size_t phi_hidden = 32;
    std::size_t emb_channels = 4;
};

inline void to_json(nlohmann::json& j, const LawModelConfig& c) {
    j = {{"latent_channels", c.latent_channels},
         {"student_hidden", c.student_hidden},
         {"teacher_hidden", c.teacher_hidden},
         {"phi_hidden", c.phi_hidden},
         {"emb_channels", c.emb_channels}};
}

struct LawState {
    SurrogateDenoiser student;
    SurrogateDenoiser teacher;
    DeltaNet phi;

    // Each network draws its initial weights from its own stream.
    static LawState make(const LawModelConfig& mc, std::size_t T, std::uint64_t seed) {
        Rng rs(seed, "init.student"), rt(seed, "init.teacher"), rp(seed, "init.phi");
        return {SurrogateDenoiser::make(mc.latent_channels, mc.student_hidden, mc.emb_channels, T, rs),
                SurrogateDenoiser::make(mc.latent_channels, mc.teacher_hidden, mc.emb_channels, T, rt),
                DeltaNet::make(mc.latent_channels, mc.phi_hidden, rp)};
    }

    ParamList params() const {
        ParamList out;
        student.collect("student", out);
        teacher.collect("teacher", out);
        phi.collect("phi", out);
        return out;
    }
};

// ------------------------------------------------------------- total loss

struct LawBatch {
    Tensor z0;    // [N,C,H,W]
    Tensor mask;  // [N,1,H,W]
    Tensor eps;   // [N,C,H,W]
    std::vector<std::size_t> t;
};

// Values held fixed when evaluating the loss; used to replay the
// stop-gradient semantics of the default mode under finite differences.
struct LawFrozen {
    Tensor features;  // stands in for the detached student prediction fed to phi
    Tensor weights;   // stands in for detached w_final
    Tensor teacher;   // stands in for the detached distillation target
};

struct LawLoss {
    Tensor total;
    Tensor L_S, L_T, L_dist, L_dice;
    Tensor w_final;
    Tensor normalized;
    Tensor delta;  // undefined when use_delta is off
    Tensor student_pred;
    Tensor teacher_pred;
};

inline LawLoss law_loss(const LawBatch& b, const LawState& s, const LawConfig& cfg, const NoiseSchedule& sched,
                        const LawFrozen* frozen = nullptr) {
    const Tensor zt = forward_diffuse(b.z0, b.t, b.eps, sched);
    LawLoss out;
    out.student_pred = s.student(zt, b.t, b.mask);
    out.teacher_pred = s.teacher(zt, b.t, b.mask);
    const Tensor& teacher_pred = out.teacher_pred;

    const Tensor m = align_mask(b.mask, zt.dim(2), zt.dim(3));
    const Tensor prior = cfg.use_ratio ? ratio_prior(m, cfg.degenerate_fallback) : Tensor::full(m.shape(), 1.0);
    if (cfg.use_delta) {
        const Tensor f = frozen && frozen->features.defined() ? frozen->features : out.student_pred.detach();
        out.delta = delta_map(f, m, s.phi, cfg.tau);
        const WeightMaps wm = finalize_weights(prior, modulate(out.delta, cfg.gamma), cfg);
        out.w_final = cfg.weights_through_phi ? wm.w_final : wm.w_final.detach();
        out.normalized = wm.normalized;
    } else {
        out.w_final = prior;
    }
    if (frozen && frozen->weights.defined()) out.w_final = frozen->weights;

    out.L_S = weighted_mse(out.student_pred, b.eps, out.w_final);
    out.L_T = mse(teacher_pred, b.eps);
    const Tensor target = frozen && frozen->teacher.defined() ? frozen->teacher : teacher_pred.detach();
    out.L_dist = weighted_mse(out.student_pred, target, out.w_final);
    out.L_dice = cfg.use_dice && cfg.use_delta ? dice_regularizer(out.delta, m, cfg.eps_s) : Tensor::scalar(0.0);
    out.total = out.L_S + out.L_T * cfg.beta_T + out.L_dist * cfg.beta_D + out.L_dice * cfg.lambda_dice;
    return out;
}

// ---------------------------------------------------------------- training

inline Tensor to_latent(const Tensor& image) { return image * 2.0 - 1.0; }

// Draws batch indices from the "data" stream and timesteps/noise from the
// "noise" stream, both keyed by step, so any loop can replay the exact batches.
class LawBatchSampler {
public:
    LawBatchSampler(const std::vector<SamplePair>& data, std::size_t batch, std::size_t T, std::uint64_t seed)
        : data_(data), batch_(batch), T_(T), seed_(seed) {
        if (data.empty()) throw std::invalid_argument("LAW training needs a non-empty dataset");
        if (batch == 0) throw std::invalid_argument("batch size must be positive");
    }

    LawBatch sample(std::size_t step) const {
        Rng rd(seed_, "data", step), rn(seed_, "noise", step);
        std::vector<std::size_t> idx(batch_);
        for (auto& i : idx) i = rd.index(data_.size());
        LawBatch b;
        b.z0 = to_latent(stack_images(data_, idx));
        b.mask = stack_masks(data_, idx);
        b.t.resize(batch_);
        for (auto& t : b.t) t = rn.index(T_);
        std::vector<double> e(b.z0.numel());
        for (double& v : e) v = rn.normal();
        b.eps = Tensor(b.z0.shape(), std::move(e));
        return b;
    }

private:
    const std::vector<SamplePair>& data_;
    std::size_t batch_, T_;
    std::uint64_t seed_;
};

struct LawTrainConfig {
    std::size_t steps = 400;
    std::size_t batch = 4;
    double lr = 1e-3;
    std::size_t snapshot_every = 100;  // 0 disables snapshots
    std::size_t probe_count = 4;
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const LawTrainConfig& c) {
    j = {{"steps", c.steps},
         {"batch", c.batch},
         {"lr", c.lr},
         {"snapshot_every", c.snapshot_every},
         {"probe_count", c.probe_count},
         {"seed", c.seed}};
}

struct LawStepLog {
    std::size_t step = 0;
    double L_S = 0, L_T = 0, L_dist = 0, L_dice = 0, total = 0;
    double w_min = 0, w_max = 0, w_mean = 0;
};

inline void to_json(nlohmann::json& j, const LawStepLog& r) {
    j = {{"step", r.step},
         {"L_S", r.L_S},
         {"L_T", r.L_T},
         {"L_dist", r.L_dist},
         {"L_dice", r.L_dice},
         {"total", r.total},
         {"w_stats", {{"min", r.w_min}, {"max", r.w_max}, {"mean", r.w_mean}}}};
}

struct DeltaSnapshot {
    std::size_t step = 0;
    double alignment = 0.0;  // mean Dice between (delta > 0.5) and the mask over the probe set
    Tensor delta;            // [P,1,H,W]
};

struct ProbeSet {
    LawBatch batch;
};

// Fixed probe batch: the first samples of the dataset at the middle timestep.
inline ProbeSet make_probe(const std::vector<SamplePair>& data, std::size_t count, std::size_t T, std::uint64_t seed) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(count, data.size()); ++i) idx.push_back(i);
    ProbeSet p;
    p.batch.z0 = to_latent(stack_images(data, idx));
    p.batch.mask = stack_masks(data, idx);
    p.batch.t.assign(idx.size(), T / 2);
    Rng rng(seed, "probe");
    std::vector<double> e(p.batch.z0.numel());
    for (double& v : e) v = rng.normal();
    p.batch.eps = Tensor(p.batch.z0.shape(), std::move(e));
    return p;
}

inline DeltaSnapshot take_snapshot(std::size_t step, const ProbeSet& probe, const LawState& s,
                                   const LawConfig& cfg, const NoiseSchedule& sched) {
    NoGradGuard ng;
    const Tensor zt = forward_diffuse(probe.batch.z0, probe.batch.t, probe.batch.eps, sched);
    const Tensor f = s.student(zt, probe.batch.t, probe.batch.mask);
    const Tensor m = align_mask(probe.batch.mask, zt.dim(2), zt.dim(3));
    DeltaSnapshot snap;
    snap.step = step;
    snap.delta = delta_map(f, m, s.phi, cfg.tau);
    snap.alignment = mean_metrics(per_image_metrics(snap.delta, m)).mdice;
    return snap;
}

struct LawRun {
    LawState state;
    std::vector<LawStepLog> log;
    std::vector<DeltaSnapshot> snapshots;
    bool diverged = false;
    std::string divergence;
};

inline LawStepLog summarize_step(std::size_t step, const LawLoss& l) {
    LawStepLog r;
    r.step = step;
    r.L_S = l.L_S.item();
    r.L_T = l.L_T.item();
    r.L_dist = l.L_dist.item();
    r.L_dice = l.L_dice.item();
    r.total = l.total.item();
    const auto& w = l.w_final.vec();
    r.w_min = *std::min_element(w.begin(), w.end());
    r.w_max = *std::max_element(w.begin(), w.end());
    double s = 0.0;
    for (double v : w) s += v;
    r.w_mean = s / static_cast<double>(w.size());
    return r;
}

// With throw_on_divergence false, a non-finite step ends training early and
// is reported through LawRun::diverged instead.
inline LawRun train_law(const std::vector<SamplePair>& data, const LawConfig& cfg, const LawModelConfig& mc,
                        const NoiseSchedule& sched, const LawTrainConfig& tc, bool throw_on_divergence = true) {
    cfg.validate();
    LawRun run{LawState::make(mc, sched.T(), tc.seed), {}, {}, false, {}};
    Adam opt(run.state.params(), {tc.lr});
    const LawBatchSampler sampler(data, tc.batch, sched.T(), tc.seed);
    std::optional<ProbeSet> probe;
    if (tc.snapshot_every && cfg.use_delta) probe = make_probe(data, tc.probe_count, sched.T(), tc.seed);

    for (std::size_t step = 0; step < tc.steps; ++step) {
        if (probe && step % tc.snapshot_every == 0) run.snapshots.push_back(take_snapshot(step, *probe, run.state, cfg, sched));
        const LawBatch b = sampler.sample(step);
        try {
            const LawLoss l = law_loss(b, run.state, cfg, sched);
            run.log.push_back(summarize_step(step, l));
            opt.zero_grad();
            l.total.backward();
            opt.step();
        } catch (const NonFiniteError& e) {
            nlohmann::json diag = {{"step", step}, {"error", e.what()}};
            if (!run.log.empty()) diag["last_record"] = run.log.back();
            run.diverged = true;
            run.divergence = "non-finite value at step " + std::to_string(step) + ": " + e.what();
            if (throw_on_divergence) throw TrainingDiverged(run.divergence, diag);
            return run;
        }
    }
    if (probe && tc.steps > 0) run.snapshots.push_back(take_snapshot(tc.steps, *probe, run.state, cfg, sched));
    return run;
}

// ------------------------------------------------------------- evaluation

struct DenoiseEval {
    double mse = 0.0;
    double lesion_mse = 0.0;
    double background_mse = 0.0;
};

inline void to_json(nlohmann::json& j, const DenoiseEval& e) {
    j = {{"mse", e.mse}, {"lesion_mse", e.lesion_mse}, {"background_mse", e.background_mse}};
}

// Noise-prediction error of the student on held-out pairs at evenly spaced
// timesteps, split by mask region.
inline DenoiseEval evaluate_denoiser(const SurrogateDenoiser& student, const std::vector<SamplePair>& data,
                                     const NoiseSchedule& sched, std::uint64_t seed, std::size_t timesteps = 5) {
    NoGradGuard ng;
    double se_les = 0, se_bg = 0;
    std::size_t n_les = 0, n_bg = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::vector<std::size_t> idx{i};
        const Tensor z0 = to_latent(stack_images(data, idx));
        const Tensor m = stack_masks(data, idx);
        Rng rng(seed, "eval", i);
        for (std::size_t k = 0; k < timesteps; ++k) {
            const std::size_t t = (2 * k + 1) * sched.T() / (2 * timesteps);
            std::vector<double> e(z0.numel());
            for (double& v : e) v = rng.normal();
            const Tensor eps(z0.shape(), std::move(e));
            const std::vector<std::size_t> tv{t};
            const Tensor pred = student(forward_diffuse(z0, tv, eps, sched), tv, m);
            const std::size_t C = z0.dim(1), hw = z0.dim(2) * z0.dim(3);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < hw; ++p) {
                    const double d = pred[c * hw + p] - eps[c * hw + p];
                    if (m[p] > 0.5) {
                        se_les += d * d;
                        ++n_les;
                    } else {
                        se_bg += d * d;
                        ++n_bg;
                    }
                }
        }
    }
    DenoiseEval ev;
    ev.lesion_mse = n_les ? se_les / n_les : 0.0;
    ev.background_mse = n_bg ? se_bg / n_bg : 0.0;
    ev.mse = (n_les + n_bg) ? (se_les + se_bg) / (n_les + n_bg) : 0.0;
    return ev;
}

// ------------------------------------------------------------ stability

struct StabilityVerdict {
    bool stable = true;
    std::string reason;
};

// A trace is unstable when it goes non-finite, when its moving average climbs
// above 1.5x its starting level, or when it ends above where it started.
inline StabilityVerdict assess_stability(const std::vector<LawStepLog>& log, bool diverged, std::size_t window = 10) {
    if (diverged) return {false, "non-finite loss"};
    if (log.size() < window) return {true, "trace shorter than smoothing window"};
    std::vector<double> smooth;
    double acc = 0.0;
    for (std::size_t i = 0; i < log.size(); ++i) {
        acc += log[i].total;
        if (i >= window) acc -= log[i - window].total;
        if (i + 1 >= window) smooth.push_back(acc / static_cast<double>(window));
    }
    const double first = smooth.front();
    const double peak = *std::max_element(smooth.begin(), smooth.end());
    if (peak > 1.5 * first) return {false, "smoothed loss rose above 1.5x its initial value"};
    if (smooth.back() > first) return {false, "smoothed loss ended above its initial value"};
    return {true, ""};
}

}  // namespace asw
