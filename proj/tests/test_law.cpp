#include <gtest/gtest.h>

#include <cmath>

#include "asw/law.hpp"
#include "oracles.hpp"

using namespace asw;

namespace {

Tensor random_mask(std::size_t N, std::size_t H, std::size_t W, Rng& rng, double p = 0.2) {
    std::vector<double> v(N * H * W);
    for (double& x : v) x = rng.uniform() < p ? 1.0 : 0.0;
    v[0] = 1.0;  // keep every batch non-degenerate in the first sample
    return Tensor({N, 1, H, W}, std::move(v));
}

// Loop oracle: mean over n,c,p of w[n,p] * (a - b)^2.
double weighted_mse_oracle(const Tensor& a, const Tensor& b, const Tensor& w) {
    const std::size_t N = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < hw; ++p) {
                const double d = a[(n * C + c) * hw + p] - b[(n * C + c) * hw + p];
                s += w[n * hw + p] * d * d;
            }
    return s / static_cast<double>(a.numel());
}

void zero_conv(Conv2d& c) {
    for (double& v : c.weight.mutable_data()) v = 0.0;
    if (c.bias.defined())
        for (double& v : c.bias.mutable_data()) v = 0.0;
}

LawModelConfig tiny_models() {
    LawModelConfig mc;
    mc.student_hidden = 2;
    mc.teacher_hidden = 3;
    mc.phi_hidden = 2;
    mc.emb_channels = 2;
    return mc;
}

LawBatch random_batch(std::size_t N, std::size_t H, std::size_t W, std::size_t T, Rng& rng) {
    LawBatch b;
    b.z0 = oracle::random_tensor({N, 1, H, W}, rng, -1, 1);
    b.eps = oracle::random_tensor({N, 1, H, W}, rng, -2, 2);
    b.mask = random_mask(N, H, W, rng, 0.3);
    for (std::size_t n = 0; n < N; ++n) b.t.push_back(rng.index(T));
    return b;
}

}  // namespace

TEST(NoiseSchedule, LinearIsMonotoneAndPositive) {
    const auto s = NoiseSchedule::linear();
    ASSERT_EQ(s.T(), 100u);
    EXPECT_NEAR(s.alpha_bar[0], 1.0 - 1e-4, 1e-15);
    for (std::size_t t = 1; t < s.T(); ++t) {
        EXPECT_LE(s.alpha_bar[t], s.alpha_bar[t - 1]);
        EXPECT_GT(s.alpha_bar[t], 0.0);
    }
    EXPECT_NEAR(s.beta.back(), 2e-2, 1e-15);
}

TEST(ForwardDiffuse, Limits) {
    NoiseSchedule s;
    s.alpha_bar = {1.0, 0.0};
    Rng rng(1);
    const Tensor z0 = oracle::random_tensor({1, 1, 3, 3}, rng), eps = oracle::random_tensor({1, 1, 3, 3}, rng);
    EXPECT_EQ(forward_diffuse(z0, 0, eps, s).vec(), z0.vec());
    EXPECT_EQ(forward_diffuse(z0, 1, eps, s).vec(), eps.vec());
    EXPECT_THROW(forward_diffuse(z0, 2, eps, s), std::out_of_range);
    EXPECT_THROW(forward_diffuse(z0, std::vector<std::size_t>{5}, eps, s), std::out_of_range);
}

TEST(ForwardDiffuse, UnitVariancePreserved) {
    const auto s = NoiseSchedule::linear();
    Rng rng(2);
    for (std::size_t t : {0u, 37u, 99u}) {
        std::vector<double> z(100000), e(100000);
        for (auto& v : z) v = rng.normal();
        for (auto& v : e) v = rng.normal();
        const Tensor zt = forward_diffuse(Tensor({100000}, z), t, Tensor({100000}, e), s);
        double m = 0, q = 0;
        for (double v : zt.vec()) m += v;
        m /= 1e5;
        for (double v : zt.vec()) q += (v - m) * (v - m);
        EXPECT_NEAR(q / 1e5, 1.0, 0.05);
    }
}

TEST(RatioPrior, Examples) {
    std::vector<double> m(16, 0.0);
    for (int i : {0, 5, 10, 15}) m[i] = 1.0;
    const Tensor w = ratio_prior(Tensor({1, 1, 4, 4}, m));
    for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(w[i], m[i] == 1.0 ? 0.75 : 0.25);

    const Tensor half = ratio_prior(Tensor({1, 1, 2, 2}, {1, 0, 0, 1}));
    for (double v : half.vec()) EXPECT_EQ(v, 0.5);
    for (double v : ratio_prior(Tensor::zeros({2, 1, 3, 3})).vec()) EXPECT_EQ(v, 1.0);
    for (double v : ratio_prior(Tensor::full({1, 1, 3, 3}, 1.0)).vec()) EXPECT_EQ(v, 1.0);
    for (double v : ratio_prior(Tensor::zeros({1, 1, 3, 3}), false).vec()) EXPECT_EQ(v, 0.0);

    EXPECT_THROW(ratio_prior(Tensor({1, 1, 1, 2}, {0.0, 1.5})), std::invalid_argument);
    EXPECT_THROW(ratio_prior(Tensor::zeros({1, 2, 2, 2})), ShapeError);
}

TEST(DeltaMap, ConstantLogits) {
    Rng rng(3);
    DeltaNet phi = DeltaNet::make(1, 4, rng);
    zero_conv(phi.c1);
    zero_conv(phi.c2);
    zero_conv(phi.c3);
    const Tensor f = oracle::random_tensor({2, 1, 4, 4}, rng), m = random_mask(2, 4, 4, rng);
    for (double v : delta_map(f, m, phi, 3.0).vec()) EXPECT_EQ(v, 0.5);
    phi.c3.bias.mutable_data()[0] = 3.0 * std::log(0.9 / 0.1);
    for (double v : delta_map(f, m, phi, 3.0).vec()) EXPECT_NEAR(v, 0.9, 1e-15);
}

TEST(DeltaMap, RandomNetsStayInOpenInterval) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const DeltaNet phi = DeltaNet::make(1, 8, rng);
        const Tensor f = oracle::random_tensor({2, 1, 8, 8}, rng, -3, 3);
        const Tensor d = delta_map(f, random_mask(2, 8, 8, rng), phi, 3.0);
        EXPECT_EQ(d.shape(), (Shape{2, 1, 8, 8}));
        for (double v : d.vec()) EXPECT_TRUE(v > 0.0 && v < 1.0);
    }
}

TEST(DeltaMap, MaskAlignment) {
    Rng rng(4);
    const DeltaNet phi = DeltaNet::make(1, 2, rng);
    const Tensor f = oracle::random_tensor({1, 1, 4, 4}, rng);
    EXPECT_EQ(delta_map(f, random_mask(1, 8, 8, rng), phi, 3.0).shape(), (Shape{1, 1, 4, 4}));
    EXPECT_THROW(delta_map(f, random_mask(1, 6, 6, rng), phi, 3.0), ShapeError);
}

TEST(Modulate, Examples) {
    const Tensor mu = modulate(Tensor({3}, {0.5, 1.0, 0.0}), 0.2);
    EXPECT_DOUBLE_EQ(mu[0], 1.0);
    EXPECT_DOUBLE_EQ(mu[1], 1.2);
    EXPECT_DOUBLE_EQ(mu[2], 0.8);
}

TEST(FinalizeWeights, Examples) {
    LawConfig cfg;
    const Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0);
    for (double v : finalize_weights(Tensor::full({1, 1, 2, 2}, 0.3), ones, cfg).w_final.vec()) EXPECT_DOUBLE_EQ(v, 1.0);

    const Tensor spike({1, 1, 1, 5}, {5.0, 0.0, 0.0, 0.0, 0.0});
    const auto wm = finalize_weights(spike, Tensor::full({1, 1, 1, 5}, 1.0), cfg);
    EXPECT_DOUBLE_EQ(wm.normalized[0], 5.0);
    EXPECT_EQ(wm.w_final[0], 2.0);
    EXPECT_EQ(wm.w_final[1], 1e-3);

    EXPECT_THROW(finalize_weights(spike, ones, cfg), ShapeError);
    EXPECT_THROW(finalize_weights(Tensor::zeros({1, 1, 2, 2}), ones, cfg), DegenerateWeightsError);
    cfg.per_batch_norm = true;
    EXPECT_THROW(finalize_weights(Tensor::zeros({1, 1, 2, 2}), ones, cfg), DegenerateWeightsError);
}

TEST(FinalizeWeights, NormalizedMeanIsOneAndBoundsHold) {
    Rng rng(5);
    LawConfig cfg;
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor m = random_mask(2, 6, 6, rng, rng.uniform(0.01, 0.5));
        const Tensor mu = modulate(oracle::random_tensor({2, 1, 6, 6}, rng, 0.0, 1.0), cfg.gamma);
        const Tensor prior = ratio_prior(m);
        const auto wm = finalize_weights(prior, mu, cfg);
        for (std::size_t n = 0; n < 2; ++n) {
            // recompute the per-sample normalisation independently
            double mean = 0.0;
            for (std::size_t p = 0; p < 36; ++p) mean += prior[n * 36 + p] * mu[n * 36 + p];
            mean /= 36.0;
            double nm = 0.0;
            for (std::size_t p = 0; p < 36; ++p) {
                EXPECT_NEAR(wm.normalized[n * 36 + p], prior[n * 36 + p] * mu[n * 36 + p] / mean, 1e-12);
                nm += wm.normalized[n * 36 + p];
            }
            EXPECT_NEAR(nm / 36.0, 1.0, 1e-12);
        }
        for (double v : mu.vec()) EXPECT_TRUE(v >= 0.8 && v <= 1.2);
        for (double v : wm.w_final.vec()) EXPECT_TRUE(v >= cfg.w_min && v <= cfg.w_max);
    }
}

TEST(WeightedMse, ExamplesAndOracle) {
    Rng rng(6);
    const Tensor a = oracle::random_tensor({2, 3, 4, 4}, rng), b = oracle::random_tensor({2, 3, 4, 4}, rng);
    const Tensor w = oracle::random_tensor({2, 1, 4, 4}, rng, 0, 2);
    EXPECT_EQ(weighted_mse(a, a, w).item(), 0.0);
    EXPECT_EQ(weighted_mse(a, b, Tensor::full({2, 1, 4, 4}, 1.0)).item(), mse(a, b).item());
    EXPECT_NEAR(weighted_mse(a, b, w).item(), weighted_mse_oracle(a, b, w), 1e-12);
    EXPECT_THROW(weighted_mse(a, Tensor::zeros({2, 3, 4, 2}), w), ShapeError);
}

TEST(DiceRegularizer, Examples) {
    const Tensor m({1, 1, 2, 2}, {1, 0, 0, 0});
    EXPECT_NEAR(dice_regularizer(Tensor::full({1, 1, 2, 2}, 0.5), m).item(), 1.0 - 1.0 / 3.0, 1e-6);
    EXPECT_LT(dice_regularizer(m, m).item(), 1e-3);
    const Tensor inv = 1.0 - m;
    EXPECT_NEAR(dice_regularizer(inv, m).item(), 1.0, 1e-6);
    EXPECT_THROW(dice_regularizer(m, Tensor::zeros({1, 1, 2, 1})), ShapeError);
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        const Tensor d = oracle::random_tensor({2, 1, 3, 3}, rng, 1e-6, 1.0 - 1e-6);
        const double v = dice_regularizer(d, random_mask(2, 3, 3, rng)).item();
        EXPECT_TRUE(v >= 0.0 && v < 1.0);
    }
}

TEST(LawLoss, RecompositionAndReductions) {
    const auto sched = NoiseSchedule::linear();
    Rng rng(8);
    const LawState s = LawState::make(tiny_models(), sched.T(), 8);
    const LawBatch b = random_batch(2, 4, 4, sched.T(), rng);
    LawConfig cfg;
    auto l = law_loss(b, s, cfg, sched);
    const double recomposed = l.L_S.item() + cfg.beta_T * l.L_T.item() + cfg.beta_D * l.L_dist.item() +
                              cfg.lambda_dice * l.L_dice.item();
    EXPECT_NEAR(l.total.item(), recomposed, 1e-12);

    cfg.beta_T = cfg.beta_D = cfg.lambda_dice = 0.0;
    l = law_loss(b, s, cfg, sched);
    EXPECT_EQ(l.total.item(), l.L_S.item());

    LawConfig off;
    off.use_delta = false;
    l = law_loss(b, s, off, sched);
    EXPECT_EQ(l.w_final.vec(), ratio_prior(b.mask).vec());
    EXPECT_FALSE(l.delta.defined());
}

TEST(LawLoss, ExactPredictionsAndAlignedDeltaGiveZero) {
    const auto sched = NoiseSchedule::linear();
    LawState s = LawState::make(tiny_models(), sched.T(), 9);
    for (Conv2d* c : {&s.student.c1, &s.student.c2, &s.student.c3, &s.teacher.c1, &s.teacher.c2, &s.teacher.c3,
                      &s.phi.c1, &s.phi.c2, &s.phi.c3})
        zero_conv(*c);
    // phi routes the mask channel through the centre taps and saturates it.
    const double tau = 3.0, gain = 80.0 * tau;
    s.phi.c1.weight.mutable_data()[1 * 9 + 4] = 1.0;  // out 0 <- in 1 (mask)
    s.phi.c2.weight.mutable_data()[4] = 1.0;
    s.phi.c3.weight.mutable_data()[4] = gain;
    s.phi.c3.bias.mutable_data()[0] = -gain / 2.0;

    Rng rng(10);
    LawBatch b;
    b.z0 = Tensor::zeros({2, 1, 4, 4});
    b.eps = Tensor::zeros({2, 1, 4, 4});
    b.mask = random_mask(2, 4, 4, rng, 0.4);
    b.t = {3, 70};
    const auto l = law_loss(b, s, LawConfig{}, sched);
    EXPECT_NEAR(l.total.item(), 0.0, 1e-12);
}

TEST(LawLoss, GradientsMatchFiniteDifferences) {
    const auto sched = NoiseSchedule::linear();
    const LawState s = LawState::make(tiny_models(), sched.T(), 11);
    ASSERT_LE(param_count(s.params()), 500u);
    Rng rng(12);
    const LawBatch b = random_batch(2, 4, 4, sched.T(), rng);

    // Default mode: stop-gradients on the phi input, on w_final and on the
    // distillation target are replayed
    // by holding those values fixed while differencing.
    LawConfig cfg;
    const auto base = law_loss(b, s, cfg, sched);
    const LawFrozen frozen{base.student_pred.detach(), base.w_final.detach(), base.teacher_pred.detach()};
    auto res = oracle::check_gradients(s.params(), [&] { return law_loss(b, s, cfg, sched, &frozen).total; });
    EXPECT_TRUE(res.ok) << res.worst_rel << " at " << res.worst_name;

    cfg.weights_through_phi = true;
    const LawFrozen frozen_features{base.student_pred.detach(), {}, base.teacher_pred.detach()};
    res = oracle::check_gradients(s.params(), [&] { return law_loss(b, s, cfg, sched, &frozen_features).total; });
    EXPECT_TRUE(res.ok) << res.worst_rel << " at " << res.worst_name;
}

TEST(TrainLaw, ZeroStepsLeavesParametersUntouched) {
    SynthSpec spec;
    spec.size = 16;
    const auto data = gen_dataset(spec, 4);
    LawTrainConfig tc;
    tc.steps = 0;
    tc.seed = 3;
    const auto run = train_law(data, LawConfig{}, tiny_models(), NoiseSchedule::linear(), tc);
    const auto fresh = LawState::make(tiny_models(), 100, 3).params();
    const auto trained = run.state.params();
    for (std::size_t i = 0; i < fresh.size(); ++i) EXPECT_EQ(fresh[i].tensor.vec(), trained[i].tensor.vec());
    EXPECT_TRUE(run.log.empty());
}

TEST(TrainLaw, TogglesOffReplaysUniformBaseline) {
    SynthSpec spec;
    spec.size = 16;
    const auto data = gen_dataset(spec, 8);
    const auto sched = NoiseSchedule::linear();
    LawTrainConfig tc;
    tc.steps = 15;
    tc.batch = 2;
    tc.seed = 21;
    const auto run = train_law(data, LawConfig::uniform(), tiny_models(), sched, tc);

    // Independent replay: plain MSE on the same batches, teacher and distillation at 0.05.
    LawState s = LawState::make(tiny_models(), sched.T(), tc.seed);
    ParamList params;
    s.student.collect("student", params);
    s.teacher.collect("teacher", params);
    Adam opt(params, {tc.lr});
    const LawBatchSampler sampler(data, tc.batch, sched.T(), tc.seed);
    ASSERT_EQ(run.log.size(), tc.steps);
    for (std::size_t step = 0; step < tc.steps; ++step) {
        const LawBatch b = sampler.sample(step);
        const Tensor zt = forward_diffuse(b.z0, b.t, b.eps, sched);
        const Tensor ps = s.student(zt, b.t, b.mask), pt = s.teacher(zt, b.t, b.mask);
        const Tensor loss = mean_all(square(ps - b.eps)) + mean_all(square(pt - b.eps)) * 0.05 +
                            mean_all(square(ps - pt.detach())) * 0.05;
        EXPECT_EQ(run.log[step].total, loss.item()) << "step " << step;
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
}

TEST(TrainLaw, DeterministicAndSnapshotted) {
    SynthSpec spec;
    spec.size = 16;
    const auto data = gen_dataset(spec, 6);
    LawTrainConfig tc;
    tc.steps = 6;
    tc.batch = 2;
    tc.snapshot_every = 3;
    tc.probe_count = 2;
    const auto a = train_law(data, LawConfig{}, tiny_models(), NoiseSchedule::linear(), tc);
    const auto b = train_law(data, LawConfig{}, tiny_models(), NoiseSchedule::linear(), tc);
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].total, b.log[i].total);
    ASSERT_EQ(a.snapshots.size(), 3u);  // steps 0, 3 and the final state
    EXPECT_EQ(a.snapshots.back().step, 6u);
    EXPECT_EQ(a.snapshots[0].delta.shape(), (Shape{2, 1, 16, 16}));
    const nlohmann::json j = a.log[0];
    EXPECT_TRUE(j.contains("w_stats"));
}

TEST(Stability, Verdicts) {
    std::vector<LawStepLog> log(30);
    for (std::size_t i = 0; i < 30; ++i) log[i].total = 1.0 - 0.01 * i;
    EXPECT_TRUE(assess_stability(log, false).stable);
    EXPECT_FALSE(assess_stability(log, true).stable);
    log[20].total = 100.0;
    EXPECT_FALSE(assess_stability(log, false).stable);
    for (std::size_t i = 0; i < 30; ++i) log[i].total = 1.0 + 0.01 * i;
    EXPECT_FALSE(assess_stability(log, false).stable);
}
