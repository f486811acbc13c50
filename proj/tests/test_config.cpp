#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "asw/checkpoint.hpp"
#include "asw/config.hpp"
#include "asw/experiment.hpp"

using namespace asw;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("asw_cfg_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ResolvedConfig resolve_text(const std::string& text, const std::vector<Override>& ov = {}) {
    const ConfigSource src{"cfg.json", text};
    return resolve_config(json::parse(text), src, ov);
}

std::size_t error_line(const std::string& text, const std::vector<Override>& ov = {}) {
    try {
        resolve_text(text, ov);
    } catch (const ConfigError& e) {
        return e.line();
    }
    ADD_FAILURE() << "no ConfigError for " << text;
    return 0;
}

}  // namespace

TEST(Config, DefaultsResolve) {
    const ResolvedConfig c = resolve_text("{}");
    EXPECT_EQ(c.mode, "train-seg");
    EXPECT_EQ(c.order.channels, (std::vector<std::size_t>{4, 8, 16, 24, 32}));
    EXPECT_TRUE(c.order.attn_stages.empty());
    EXPECT_DOUBLE_EQ(c.law.gamma, 0.2);
    EXPECT_EQ(c.schedule().T(), 100u);
}

TEST(Config, FileValuesAndOverrides) {
    const ResolvedConfig c = resolve_text(R"({"mode": "train-law", "seed": 7, "law": {"tau": 2.0}})",
                                          {parse_override("--law.tau=4"), parse_override("--order.attn_stages=[0,1]")});
    EXPECT_EQ(c.mode, "train-law");
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.synth.seed, 7u);
    EXPECT_EQ(c.law_train.seed, 7u);
    EXPECT_DOUBLE_EQ(c.law.tau, 4.0);
    EXPECT_EQ(c.order.attn_stages, (std::set<std::size_t>{0, 1}));
    EXPECT_DOUBLE_EQ(c.tree["law"]["tau"].get<double>(), 4.0);
}

TEST(Config, OverrideValueParsing) {
    EXPECT_EQ(parse_override("--a.b=3").value, json(3));
    EXPECT_EQ(parse_override("--a.b=true").value, json(true));
    EXPECT_EQ(parse_override("--a.b=hello").value, json("hello"));
    EXPECT_EQ(parse_override("--a.b=[1,2]").value, json({1, 2}));
    EXPECT_EQ(parse_override("--a.b=").value, json(""));
    EXPECT_THROW(parse_override("--novalue"), ConfigError);
}

TEST(Config, UnknownKeyReportsItsLine) {
    const std::string text = "{\n  \"mode\": \"profile\",\n  \"order\": {\n    \"channels\": [4, 8],\n    \"atn_stages\": [0]\n  }\n}\n";
    EXPECT_EQ(error_line(text), 5u);
}

TEST(Config, TypeMismatchReportsItsLine) {
    EXPECT_EQ(error_line("{\n\"seed\": 1,\n\"law\": {\n  \"use_dice\": 1\n}\n}"), 4u);
    EXPECT_EQ(error_line("{\n\"seed\": -1\n}"), 2u);
    EXPECT_EQ(error_line("{\n\"data\": {\"count\": 2.5}\n}"), 2u);
    EXPECT_EQ(error_line("{\n\n\"order\": {\"attn_stages\": [0, \"one\"]}\n}"), 3u);
}

TEST(Config, SignedIntegersFromCodeAreAccepted) {
    json user = {{"seed", 3}, {"data", {{"count", 12}}}, {"order", {{"attn_stages", {0, 1}}}}};
    ASSERT_FALSE(user["seed"].is_number_unsigned());
    const ResolvedConfig c = resolve_config(user, {"code", ""});
    EXPECT_EQ(c.data_count, 12u);
    EXPECT_EQ(c.order.attn_stages, (std::set<std::size_t>{0, 1}));
    EXPECT_TRUE(c.tree["seed"].is_number_unsigned());
    EXPECT_THROW(resolve_config(json{{"seed", -3}}, {"code", ""}), ConfigError);
}

TEST(Config, SemanticErrorsReportTheirLine) {
    EXPECT_EQ(error_line("{\n\"mode\": \"train-law\",\n\"law\": {\n\"w_max\": 2.0,\n\"gamma\": 1.5\n}\n}"), 5u);
    EXPECT_EQ(error_line("{\n\"order\": {\n\"channels\": [8, 4]\n}\n}"), 3u);
    EXPECT_EQ(error_line("{\n\"mode\": \"sample\"\n}"), 2u);
    EXPECT_EQ(error_line("{\n\"mode\": \"eval\"\n}"), 0u);  // missing checkpoint: key absent from file
}

TEST(Config, OverrideErrorsNameTheFlag) {
    try {
        resolve_text("{}", {parse_override("--order.heads=2")});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("--order.heads"), std::string::npos) << e.what();
    }
}

TEST(Config, ChannelMismatchIsRejected) {
    EXPECT_THROW(resolve_text(R"({"data": {"synthetic": {"channels": 3}}})"), ConfigError);
    EXPECT_NO_THROW(resolve_text(R"({"data": {"synthetic": {"channels": 3}}, "order": {"in_channels": 3}})"));
}

TEST(Config, DirectorySourceNeedsExistingPaths) {
    EXPECT_THROW(resolve_text(R"({"data": {"source": "directory", "images_dir": "/nonexistent/a", "masks_dir": "/nonexistent/b"}})"),
                 ConfigError);
}

TEST(Config, OutputRootFromEnvironment) {
    ::setenv(kOutputRootEnv, "/tmp/asw-root", 1);
    EXPECT_EQ(resolve_output_dir("", "profile", 3), fs::path("/tmp/asw-root/profile-seed3"));
    EXPECT_EQ(resolve_output_dir("x", "profile", 3), fs::path("/tmp/asw-root/x"));
    EXPECT_EQ(resolve_output_dir("/abs/x", "profile", 3), fs::path("/abs/x"));
    ::unsetenv(kOutputRootEnv);
    EXPECT_EQ(resolve_output_dir("", "profile", 3), fs::path("runs/profile-seed3"));
    EXPECT_EQ(resolve_output_dir("x", "profile", 3), fs::path("x"));
}

TEST(Config, EmbeddedConfigResolvesToItself) {
    const ResolvedConfig c = resolve_text(R"({"mode": "train-law", "seed": 3, "law": {"use_dice": false}})");
    const ResolvedConfig again = resolve_config(c.tree, {"echo", c.tree.dump(2)});
    EXPECT_EQ(again.tree, c.tree);
}

TEST(Checkpoint, RoundTripIsExact) {
    const fs::path dir = scratch_dir("ckpt");
    OrderConfig oc;
    oc.attn_stages = {0};
    const OrderNetwork a = OrderNetwork::make(oc, 11);
    save_checkpoint(dir, a.params(), {{"note", "x"}});
    EXPECT_EQ(fs::file_size(dir / kCheckpointBin), 8 * param_count(a.params()));
    const OrderNetwork b = OrderNetwork::make(oc, 12);
    ParamList pb = b.params();
    load_checkpoint(dir, pb);
    const ParamList pa = a.params();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.vec(), pb[i].tensor.vec()) << pa[i].name;
    EXPECT_EQ(read_checkpoint_manifest(dir)["config"]["note"], "x");
    fs::remove_all(dir);
}

TEST(Checkpoint, LittleEndianLayout) {
    const fs::path dir = scratch_dir("ckpt_le");
    ParamList p{{"w", Tensor({2}, {1.0, -2.5})}};
    save_checkpoint(dir, p, json::object());
    std::ifstream in(dir / kCheckpointBin, std::ios::binary);
    unsigned char b[16];
    in.read(reinterpret_cast<char*>(b), 16);
    // 1.0 = 0x3FF0000000000000, stored low byte first
    EXPECT_EQ(b[7], 0x3F);
    EXPECT_EQ(b[6], 0xF0);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(b[i], 0);
    EXPECT_EQ(b[15], 0xC0);  // -2.5 = 0xC004000000000000
    EXPECT_EQ(b[14], 0x04);
    fs::remove_all(dir);
}

TEST(Checkpoint, MismatchesAreRejected) {
    const fs::path dir = scratch_dir("ckpt_bad");
    ParamList p{{"w", Tensor({2, 2}, {1, 2, 3, 4})}};
    save_checkpoint(dir, p, json::object());
    ParamList wrong_shape{{"w", Tensor({4}, {0, 0, 0, 0})}};
    EXPECT_THROW(load_checkpoint(dir, wrong_shape), CheckpointError);
    ParamList wrong_name{{"v", Tensor({2, 2}, {0, 0, 0, 0})}};
    EXPECT_THROW(load_checkpoint(dir, wrong_name), CheckpointError);
    std::ofstream(dir / kCheckpointBin, std::ios::binary | std::ios::trunc) << "short";
    EXPECT_THROW(load_checkpoint(dir, p), CheckpointError);
    fs::remove_all(dir);
}

TEST(Sweep, RejectsModeChangesAndBadRuns) {
    const ConfigSource src{"sweep.json", ""};
    EXPECT_THROW(parse_sweep(json::parse(R"({"base": {}, "runs": [{"name": "a", "set": {"mode": "train-law"}}]})"), src),
                 ConfigError);
    EXPECT_THROW(parse_sweep(json::parse(R"({"base": {}, "runs": []})"), src), ConfigError);
    EXPECT_THROW(parse_sweep(json::parse(R"({"base": {}, "runs": [{"name": "a"}, {"name": "a"}]})"), src), ConfigError);
    EXPECT_THROW(parse_sweep(json::parse(R"({"base": {}, "runs": [{"name": "a/b"}]})"), src), ConfigError);
    EXPECT_THROW(parse_sweep(json::parse(R"({"base": {}, "runs": [{"name": "a", "set": {"seed": 2}}]})"), src), ConfigError);
    EXPECT_THROW(parse_sweep(json::parse(R"({"base": {}, "runs": [{"name": "a"}], "extra": 1})"), src), ConfigError);
    const SweepSpec ok = parse_sweep(json::parse(R"({"base": {"seed": 4}, "runs": [{"name": "a"}]})"), src);
    EXPECT_EQ(ok.seeds, std::vector<std::uint64_t>{4});
}

TEST(Sweep, AxisErrorsSurfaceBeforeAnyRun) {
    const fs::path dir = scratch_dir("sweep_bad");
    const ConfigSource src{"sweep.json", ""};
    const SweepSpec s = parse_sweep(
        json::parse(R"({"base": {"mode": "profile"}, "runs": [{"name": "a"}, {"name": "b", "set": {"order.attn_stages": [9]}}]})"),
        src);
    SweepSpec spec = s;
    spec.output_dir = dir.string();
    EXPECT_THROW(run_sweep(spec, src), ConfigError);
    EXPECT_FALSE(fs::exists(dir / "a"));
    fs::remove_all(dir);
}

TEST(Sweep, ProfileSweepSummarizesEveryRun) {
    const fs::path dir = scratch_dir("sweep_prof");
    const ConfigSource src{"sweep.json", ""};
    SweepSpec spec = parse_sweep(json::parse(R"({"base": {"mode": "profile", "profile": {"size": 32}},
        "runs": [{"name": "none"}, {"name": "s01", "set": {"order.attn_stages": [0, 1]}}]})"),
                                 src);
    spec.output_dir = dir.string();
    const json summary = run_sweep(spec, src);
    ASSERT_EQ(summary["rows"].size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "sweep_summary.json"));
    EXPECT_TRUE(fs::exists(dir / "sweep_summary.txt"));
    EXPECT_TRUE(fs::exists(dir / "none" / "seed-0" / "report.json"));
    for (const auto& row : summary["rows"]) {
        EXPECT_EQ(row["runs_ok"], 1);
        const double params = row["mean"]["params"];
        EXPECT_EQ(params, row["name"] == "none" ? 30553.0 : 30947.0);
    }
    fs::remove_all(dir);
}
