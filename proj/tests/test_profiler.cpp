#include <gtest/gtest.h>

#include "asw/profiler.hpp"
#include "oracles.hpp"

using namespace asw;

TEST(Profiler, SingleConvExamples) {
    Rng rng(1);
    const Conv2d c = Conv2d::make(4, 8, 1, rng);
    ParamList p;
    c.collect("conv", p);
    const ProfileReport r = count_params(p);
    EXPECT_EQ(r.total_params, 40u);
    EXPECT_EQ(r.breakdown.at("conv"), 40u);
    EXPECT_EQ(layer_cost(layer::Conv{"conv", 4, 8, 1, 2, 2}).flops(), 256u);
}

TEST(Profiler, BreakdownSumsToTotal) {
    OrderConfig cfg;
    cfg.attn_stages = {0, 1};
    const auto r = profile(OrderNetwork::make(cfg, 0), 64, 64);
    std::size_t sum = 0;
    for (const auto& [k, v] : r.breakdown) sum += v;
    EXPECT_EQ(sum, r.total_params);
    EXPECT_GT(r.flops, 0u);
    EXPECT_TRUE(r.breakdown.count("attn0"));
    const nlohmann::json j = r;
    EXPECT_EQ(j["total_params"], r.total_params);
}

TEST(Profiler, AnalyticMacsMatchExecutedMacs) {
    Rng rng(2);
    for (const std::set<std::size_t>& stages : std::vector<std::set<std::size_t>>{{}, {0, 1}, {0, 1, 2, 3, 4}})
        for (std::size_t cap : {0u, 8u}) {
            OrderConfig cfg;
            cfg.attn_stages = stages;
            cfg.attn_max_side = cap;
            const OrderNetwork net = OrderNetwork::make(cfg, 3);
            const Tensor x = oracle::random_tensor({1, 1, 32, 32}, rng, 0, 1);
            CountingScope scope;
            net(x);
            EXPECT_EQ(profile(net, 32, 32).macs, scope.snapshot().macs) << stages.size() << " stages, cap " << cap;
        }

    const LawState s = LawState::make({}, 100, 0);
    const Tensor z = oracle::random_tensor({1, 1, 16, 16}, rng), m = Tensor::zeros({1, 1, 16, 16});
    CountingScope scope;
    {
        NoGradGuard ng;
        const std::vector<std::size_t> t{5};
        const Tensor f = s.student(z, t, m);
        s.teacher(z, t, m);
        delta_map(f, m, s.phi, 3.0);
    }
    EXPECT_EQ(profile(s, 16, 16).macs, scope.snapshot().macs);
}

TEST(Profiler, RejectsIndivisibleInput) {
    EXPECT_THROW(profile(OrderNetwork::make(OrderConfig{}, 0), 40, 40), ShapeError);
}
