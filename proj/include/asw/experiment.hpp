#pragma once

// Runs one configured experiment into its output directory, or a sweep of
// such runs that differ only in a few declared keys.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asw/checkpoint.hpp"
#include "asw/config.hpp"
#include "asw/data.hpp"
#include "asw/diverged.hpp"
#include "asw/law.hpp"
#include "asw/order.hpp"
#include "asw/profiler.hpp"

#ifndef ASW_VERSION
#define ASW_VERSION "0.0.0"
#endif
#ifndef ASW_GIT_HASH
#define ASW_GIT_HASH "unknown"
#endif

namespace asw {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline json version_stamp() { return {{"version", ASW_VERSION}, {"git", ASW_GIT_HASH}}; }

inline void ensure_parent(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    ensure_parent(path);
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    out << j.dump(2) << '\n';
}

template <class Rows>
void write_jsonl(const std::filesystem::path& path, const Rows& rows) {
    ensure_parent(path);
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    for (const auto& r : rows) out << json(r).dump() << '\n';
}

// ------------------------------------------------------------------- data

inline std::vector<SamplePair> load_data(const ResolvedConfig& cfg) {
    if (cfg.data_source == "synthetic") return gen_dataset(cfg.synth, cfg.data_count);
    LoadResult res = load_pair_dir(cfg.images_dir, cfg.masks_dir, cfg.crop, cfg.order.divisor());
    if (!res.errors.empty()) {
        std::string msg = std::to_string(res.errors.size()) + " data file(s) could not be used:";
        for (const auto& e : res.errors) msg += "\n  " + e;
        throw DataError(msg);
    }
    if (res.pairs.empty()) throw DataError("no image/mask pairs found in " + cfg.images_dir.string());
    return std::move(res.pairs);
}

inline std::vector<SamplePair> select_split(std::vector<SamplePair> data, std::uint64_t seed, const std::string& split) {
    if (split == "all") return data;
    auto s = split_dataset(std::move(data), seed);
    if (s.val.empty()) throw DataError("the validation split is empty; use more samples or split \"all\"");
    return std::move(s.val);
}

inline void write_maps(const std::filesystem::path& dir, const std::string& prefix, const Tensor& maps,
                       const std::vector<std::string>& ids) {
    const std::size_t H = maps.dim(2), W = maps.dim(3), hw = H * W;
    for (std::size_t n = 0; n < ids.size(); ++n)
        write_pgm(dir / (prefix + ids[n] + ".pgm"), W, H, std::span<const double>(maps.data().data() + n * hw, hw));
}

// ------------------------------------------------------------------- runs

struct RunOutcome {
    json report;
    bool ok = true;  // false when training diverged; the report is still written
};

namespace detail {

inline double smoothed_final_loss(const std::vector<LawStepLog>& log, std::size_t window = 10) {
    if (log.empty()) return 0.0;
    const std::size_t n = std::min(window, log.size());
    double s = 0.0;
    for (std::size_t i = log.size() - n; i < log.size(); ++i) s += log[i].total;
    return s / static_cast<double>(n);
}

inline json run_gen_data(const ResolvedConfig& cfg, json& report) {
    const auto data = load_data(cfg);
    const auto root = cfg.output_dir / "data";
    std::vector<ManifestEntry> entries;
    double lo = 1.0, hi = 0.0, sum = 0.0;
    for (const auto& p : data) {
        entries.push_back(save_pair(root, p));
        lo = std::min(lo, entries.back().ratio);
        hi = std::max(hi, entries.back().ratio);
        sum += entries.back().ratio;
    }
    ensure_parent(root / "manifest.json");
    write_manifest(root / "manifest.json", entries);
    report["manifest"] = "data/manifest.json";
    return {{"count", data.size()}, {"ratio_mean", sum / static_cast<double>(data.size())}, {"ratio_min", lo}, {"ratio_max", hi}};
}

inline json run_train_seg(const ResolvedConfig& cfg, json& report) {
    auto split = split_dataset(load_data(cfg), cfg.seed);
    if (split.train.empty()) throw DataError("the training split is empty");
    if (split.train.front().image.dim(0) != cfg.order.in_channels)
        throw DataError("images have " + std::to_string(split.train.front().image.dim(0)) +
                        " channels but order.in_channels is " + std::to_string(cfg.order.in_channels));
    const SegRun run = train_seg(split.train, split.val, cfg.order, cfg.seg_train);
    write_jsonl(cfg.output_dir / "logs" / "train_log.jsonl", run.log);
    save_checkpoint(cfg.output_dir / "checkpoint", run.net.params(), cfg.tree);
    const ProfileReport prof = profile(run.net, split.train.front().height(), split.train.front().width());
    report["profile"] = prof;
    report["train_size"] = split.train.size();
    report["val_size"] = split.val.size();
    report["primary"] = {{"key", "val_mdice"}, {"higher_is_better", true}};
    const SegEpochLog last = run.log.empty() ? SegEpochLog{} : run.log.back();
    return {{"val_mdice", last.val_mdice}, {"val_miou", last.val_miou}, {"final_train_loss", last.train_loss},
            {"params", prof.total_params}, {"gflops", prof.gflops()}};
}

inline json run_train_law(const ResolvedConfig& cfg, json& report, bool& ok) {
    auto split = split_dataset(load_data(cfg), cfg.seed);
    if (split.train.empty()) throw DataError("the training split is empty");
    if (split.train.front().image.dim(0) != cfg.law_model.latent_channels)
        throw DataError("images have " + std::to_string(split.train.front().image.dim(0)) +
                        " channels but law.model.latent_channels is " + std::to_string(cfg.law_model.latent_channels));
    const NoiseSchedule sched = cfg.schedule();
    const LawRun run = train_law(split.train, cfg.law, cfg.law_model, sched, cfg.law_train, false);
    write_jsonl(cfg.output_dir / "logs" / "train_log.jsonl", run.log);

    json snaps = json::array();
    std::vector<std::string> probe_ids;
    for (std::size_t i = 0; i < std::min(cfg.law_train.probe_count, split.train.size()); ++i)
        probe_ids.push_back(split.train[i].id);
    for (const auto& s : run.snapshots) {
        snaps.push_back({{"step", s.step}, {"alignment", s.alignment}});
        std::ostringstream prefix;
        prefix << "delta_step" << std::setw(5) << std::setfill('0') << s.step << "_";
        write_maps(cfg.output_dir / "maps", prefix.str(), s.delta, probe_ids);
    }
    report["snapshots"] = snaps;

    const StabilityVerdict verdict = assess_stability(run.log, run.diverged);
    report["stability"] = {{"stable", verdict.stable}, {"reason", verdict.reason}};
    const ProfileReport prof = profile(run.state, split.train.front().height(), split.train.front().width());
    report["profile"] = prof;
    report["train_size"] = split.train.size();
    report["val_size"] = split.val.size();
    report["primary"] = {{"key", "lesion_mse"}, {"higher_is_better", false}};

    json summary = {{"final_loss", run.diverged ? json(nullptr) : json(smoothed_final_loss(run.log))},
                    {"stable", verdict.stable},
                    {"diverged", run.diverged},
                    {"params", prof.total_params}};
    summary["alignment_first"] = run.snapshots.empty() ? json(nullptr) : json(run.snapshots.front().alignment);
    summary["alignment_last"] = run.snapshots.empty() ? json(nullptr) : json(run.snapshots.back().alignment);
    if (run.diverged) {
        ok = false;
        report["divergence"] = run.divergence;
        write_json(cfg.output_dir / "diagnostic.json",
                   {{"error", run.divergence}, {"steps_completed", run.log.size()},
                    {"last_records", json(std::vector<LawStepLog>(run.log.end() - std::min<std::ptrdiff_t>(5, static_cast<std::ptrdiff_t>(run.log.size())), run.log.end()))}});
        summary["lesion_mse"] = summary["mse"] = summary["background_mse"] = nullptr;
        return summary;
    }
    save_checkpoint(cfg.output_dir / "checkpoint", run.state.params(), cfg.tree);
    if (split.val.empty()) throw DataError("the validation split is empty");
    const DenoiseEval ev = evaluate_denoiser(run.state.student, split.val, sched, cfg.seed, cfg.eval_timesteps);
    summary["lesion_mse"] = ev.lesion_mse;
    summary["mse"] = ev.mse;
    summary["background_mse"] = ev.background_mse;
    return summary;
}

// Rebuilds whichever model a checkpoint holds from its embedded config.
struct LoadedModel {
    ResolvedConfig trained;
    std::optional<OrderNetwork> seg;
    std::optional<LawState> law;
};

inline LoadedModel load_model(const std::filesystem::path& ckpt) {
    const json manifest = read_checkpoint_manifest(ckpt);
    const json& embedded = manifest.at("config");
    LoadedModel m{resolve_config(embedded, {(ckpt / kCheckpointManifest).string(), embedded.dump(2)}), {}, {}};
    ParamList params;
    if (m.trained.mode == "train-seg") {
        m.seg = OrderNetwork::make(m.trained.order, m.trained.seed);
        params = m.seg->params();
    } else if (m.trained.mode == "train-law") {
        m.law = LawState::make(m.trained.law_model, m.trained.schedule_T, m.trained.seed);
        params = m.law->params();
    } else {
        throw CheckpointError("checkpoint at " + ckpt.string() + " was written by mode '" + m.trained.mode + "'");
    }
    load_checkpoint(ckpt, params);
    return m;
}

inline json run_eval(const ResolvedConfig& cfg, json& report) {
    const LoadedModel m = load_model(cfg.eval_checkpoint);
    const auto data = select_split(load_data(cfg), cfg.seed, cfg.eval_split);
    report["checkpoint_mode"] = m.trained.mode;
    report["eval_size"] = data.size();
    if (m.seg) {
        report["primary"] = {{"key", "mdice"}, {"higher_is_better", true}};
        const MeanMetrics mm = evaluate_seg(*m.seg, data);
        return {{"mdice", mm.mdice}, {"miou", mm.miou}, {"count", mm.count}};
    }
    report["primary"] = {{"key", "lesion_mse"}, {"higher_is_better", false}};
    const DenoiseEval ev = evaluate_denoiser(m.law->student, data, m.trained.schedule(), cfg.seed, cfg.eval_timesteps);
    return ev;
}

inline json run_export(const ResolvedConfig& cfg, json& report) {
    const LoadedModel m = load_model(cfg.export_checkpoint);
    auto data = select_split(load_data(cfg), cfg.seed, cfg.export_split);
    data.resize(std::min(data.size(), cfg.export_count));
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<std::string> ids;
    for (const auto& p : data) ids.push_back(p.id);
    const auto dir = cfg.output_dir / "maps";
    const Tensor masks = stack_masks(data, idx);
    write_maps(dir, "mask_", masks, ids);
    report["checkpoint_mode"] = m.trained.mode;
    if (m.seg) {
        NoGradGuard ng;
        const Tensor pred = (*m.seg)(stack_images(data, idx));
        write_maps(dir, "pred_", pred, ids);
        const MeanMetrics mm = mean_metrics(per_image_metrics(pred, masks));
        return {{"exported", ids.size()}, {"mdice", mm.mdice}};
    }
    const ProbeSet probe = make_probe(data, data.size(), m.trained.schedule_T, cfg.seed);
    const DeltaSnapshot snap = take_snapshot(0, probe, *m.law, m.trained.law, m.trained.schedule());
    write_maps(dir, "delta_", snap.delta, ids);
    return {{"exported", ids.size()}, {"alignment", snap.alignment}};
}

inline json run_profile(const ResolvedConfig& cfg, json& report) {
    if (cfg.profile_target == "order") {
        const std::size_t size = cfg.profile_size ? cfg.profile_size : cfg.order.input_size;
        const OrderNetwork net = OrderNetwork::make(cfg.order, cfg.seed);
        const ProfileReport r = profile(net, size, size);
        const ProfileReport base = profile(make_mkunet(cfg.order, cfg.seed), size, size);
        report["profile"] = r;
        report["baseline_profile"] = base;
        return {{"params", r.total_params}, {"flops", r.flops}, {"gflops", r.gflops()}, {"macs", r.macs},
                {"baseline_params", base.total_params}, {"baseline_gflops", base.gflops()},
                {"flops_ratio", static_cast<double>(r.flops) / static_cast<double>(base.flops)}};
    }
    const std::size_t size = cfg.profile_size ? cfg.profile_size : cfg.synth.size;
    const LawState s = LawState::make(cfg.law_model, cfg.schedule_T, cfg.seed);
    const ProfileReport r = profile(s, size, size);
    report["profile"] = r;
    return {{"params", r.total_params}, {"flops", r.flops}, {"gflops", r.gflops()}, {"macs", r.macs}};
}

}  // namespace detail

// Writes report.json (and mode-specific logs, checkpoints and maps) under
// cfg.output_dir. Divergence during LAW training is reported through
// RunOutcome::ok; every other failure throws.
inline RunOutcome run_experiment(const ResolvedConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    RunOutcome out;
    json& report = out.report;
    report["mode"] = cfg.mode;
    report["seed"] = cfg.seed;
    report["config"] = cfg.tree;
    report["stamp"] = version_stamp();
    report["timestamp"] = utc_timestamp();
    try {
        if (cfg.mode == "gen-data") report["summary"] = detail::run_gen_data(cfg, report);
        else if (cfg.mode == "train-seg") report["summary"] = detail::run_train_seg(cfg, report);
        else if (cfg.mode == "train-law") report["summary"] = detail::run_train_law(cfg, report, out.ok);
        else if (cfg.mode == "eval") report["summary"] = detail::run_eval(cfg, report);
        else if (cfg.mode == "export-maps") report["summary"] = detail::run_export(cfg, report);
        else report["summary"] = detail::run_profile(cfg, report);
    } catch (const TrainingDiverged& e) {
        write_json(cfg.output_dir / "diagnostic.json", {{"error", e.what()}, {"diagnostic", e.diagnostic}});
        throw;
    }
    report["status"] = out.ok ? "ok" : "diverged";
    write_json(cfg.output_dir / "report.json", report);
    return out;
}

// ------------------------------------------------------------------ sweeps

struct SweepRun {
    std::string name;
    json set;  // dotted key -> value
};

struct SweepSpec {
    json base;
    std::vector<SweepRun> runs;
    std::vector<std::uint64_t> seeds;
    std::string output_dir;
};

inline SweepSpec parse_sweep(const json& j, const ConfigSource& src) {
    auto fail = [&](const std::vector<std::string>& path, const std::string& msg) -> void {
        throw ConfigError(src.name, src.locate(path), msg);
    };
    if (!j.is_object()) fail({}, "sweep file must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (k != "base" && k != "runs" && k != "seeds" && k != "output_dir")
            fail({k}, "unknown key '" + k + "' (expected base, runs, seeds, output_dir)");
    SweepSpec s;
    if (!j.contains("base") || !j["base"].is_object()) fail({"base"}, "sweep needs a 'base' config object");
    s.base = j["base"];
    if (!j.contains("runs") || !j["runs"].is_array() || j["runs"].empty())
        fail({"runs"}, "sweep needs a non-empty 'runs' array");
    std::set<std::string> names;
    for (const auto& r : j["runs"]) {
        if (!r.is_object() || !r.contains("name") || !r["name"].is_string())
            fail({"runs"}, "every run needs a string 'name'");
        const std::string name = r["name"];
        for (const auto& [k, v] : r.items())
            if (k != "name" && k != "set") fail({"runs", k}, "unknown key '" + k + "' in run '" + name + "'");
        if (name.empty() || name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-+") !=
                                std::string::npos)
            fail({"runs"}, "run name '" + name + "' may only use letters, digits, '_', '-' and '+'");
        if (!names.insert(name).second) fail({"runs"}, "duplicate run name '" + name + "'");
        const json set = r.value("set", json::object());
        if (!set.is_object()) fail({"runs", "set"}, "'set' of run '" + name + "' must be an object");
        for (const auto& [k, v] : set.items()) {
            if (k == "mode")
                fail({"runs", "set", k}, "heterogeneous modes in one sweep: run '" + name + "' sets the mode");
            if (k == "output_dir" || k == "seed")
                fail({"runs", "set", k}, "run '" + name + "' may not set '" + k + "'; it is managed by the sweep");
        }
        s.runs.push_back({name, set});
    }
    if (j.contains("seeds")) {
        if (!j["seeds"].is_array() || j["seeds"].empty()) fail({"seeds"}, "'seeds' must be a non-empty array");
        for (const auto& v : j["seeds"]) {
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0) fail({"seeds"}, "seeds must be non-negative integers");
            s.seeds.push_back(v.get<std::uint64_t>());
        }
    } else {
        s.seeds.push_back(s.base.value("seed", std::uint64_t{0}));
    }
    if (j.contains("output_dir")) {
        if (!j["output_dir"].is_string()) fail({"output_dir"}, "'output_dir' must be a string");
        s.output_dir = j["output_dir"];
    }
    return s;
}

namespace detail {

inline std::string fmt_cell(const json& v) {
    if (v.is_null()) return "-";
    if (v.is_number_float()) {
        std::ostringstream ss;
        ss << std::fixed << std::setprecision(std::abs(v.get<double>()) < 0.1 ? 5 : 4) << v.get<double>();
        return ss.str();
    }
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

inline std::string aligned_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
        width[c] = header[c].size();
        for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
    }
    std::ostringstream ss;
    auto line = [&](const std::vector<std::string>& r) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (c) ss << "  ";
            if (c == 0) ss << std::left << std::setw(static_cast<int>(width[c])) << r[c];
            else ss << std::right << std::setw(static_cast<int>(width[c])) << r[c];
        }
        ss << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (std::size_t w : width) total += w;
    ss << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
    return ss.str();
}

}  // namespace detail

// Resolves every run up front (so a bad entry fails before any training),
// then runs them in order under <sweep dir>/<name>/seed-<seed>/ and writes
// sweep_summary.json and sweep_summary.txt into the sweep directory.
inline json run_sweep(const SweepSpec& spec, const ConfigSource& src, const std::vector<Override>& overrides = {},
                      std::ostream* progress = nullptr) {
    json base = spec.base;
    for (const auto& o : overrides) set_dotted(base, o.key, o.value);
    const std::string mode = base.value("mode", std::string("train-seg"));
    const std::filesystem::path dir = std::filesystem::absolute(
        resolve_output_dir(spec.output_dir, "sweep", spec.seeds.front()));

    struct Job {
        std::string name;
        std::uint64_t seed;
        ResolvedConfig cfg;
    };
    std::vector<Job> jobs;
    for (const auto& run : spec.runs)
        for (std::uint64_t seed : spec.seeds) {
            json user = base;
            std::vector<Override> ovs;
            for (const auto& [k, v] : run.set.items()) ovs.push_back({k, v});
            ovs.push_back({"seed", seed});
            ovs.push_back({"output_dir", (dir / run.name / ("seed-" + std::to_string(seed))).string()});
            ConfigSource run_src{src.name + " (run '" + run.name + "')", src.text};
            ResolvedConfig cfg = resolve_config(user, run_src, ovs);
            if (cfg.mode != mode) throw ConfigError(src.name, 0, "heterogeneous modes in one sweep");
            jobs.push_back({run.name, seed, std::move(cfg)});
        }

    std::filesystem::create_directories(dir);
    std::map<std::string, std::map<std::uint64_t, json>> results;  // name -> seed -> report
    json primary;
    std::size_t k = 0;
    for (const auto& job : jobs) {
        ++k;
        if (progress) *progress << "[" << k << "/" << jobs.size() << "] " << job.name << " seed " << job.seed << std::flush;
        json report;
        try {
            report = run_experiment(job.cfg).report;
        } catch (const std::exception& e) {
            report = {{"status", "failed"}, {"error", e.what()}};
        }
        if (report.contains("primary")) primary = report["primary"];
        if (progress) {
            *progress << "  " << report.value("status", std::string("?"));
            if (!primary.is_null() && report.contains("summary"))
                *progress << "  " << primary["key"].get<std::string>() << "=" << detail::fmt_cell(report["summary"][primary["key"].get<std::string>()]);
            *progress << '\n';
        }
        results[job.name][job.seed] = report;
    }

    const std::string pkey = primary.is_null() ? "" : primary["key"].get<std::string>();
    const bool higher = primary.is_null() ? true : primary["higher_is_better"].get<bool>();
    auto better = [&](const json& a, const json& b) {
        if (!a.is_number()) return false;
        if (!b.is_number()) return true;
        return higher ? a.get<double>() > b.get<double>() : a.get<double>() < b.get<double>();
    };

    // Per-seed ranking and the number of seeds in which each run comes first.
    json per_seed = json::object();
    std::map<std::string, std::size_t> top;
    for (std::uint64_t seed : spec.seeds) {
        std::vector<std::string> names;
        for (const auto& run : spec.runs) names.push_back(run.name);
        auto metric = [&](const std::string& n) {
            const json& r = results[n][seed];
            return r.contains("summary") && !pkey.empty() ? r["summary"][pkey] : json(nullptr);
        };
        std::stable_sort(names.begin(), names.end(), [&](const auto& a, const auto& b) { return better(metric(a), metric(b)); });
        if (!pkey.empty() && metric(names.front()).is_number()) ++top[names.front()];
        per_seed[std::to_string(seed)] = names;
    }

    json rows = json::array();
    for (const auto& run : spec.runs) {
        json row = {{"name", run.name}, {"set", run.set}};
        json means = json::object(), seeds = json::object();
        std::map<std::string, std::pair<double, std::size_t>> acc;
        std::size_t ok = 0, stable = 0, failed = 0;
        bool flagged = false;
        for (std::uint64_t seed : spec.seeds) {
            const json& r = results[run.name][seed];
            const std::string status = r.value("status", std::string("failed"));
            ok += status == "ok";
            failed += status == "failed";
            json entry = {{"status", status}};
            if (r.contains("error")) entry["error"] = r["error"];
            if (r.contains("summary")) {
                entry["summary"] = r["summary"];
                for (const auto& [key, v] : r["summary"].items()) {
                    if (v.is_number()) {
                        acc[key].first += v.get<double>();
                        ++acc[key].second;
                    }
                }
                if (r["summary"].contains("stable")) {
                    const bool st = r["summary"]["stable"].get<bool>();
                    stable += st;
                    flagged = flagged || !st;
                }
            }
            seeds[std::to_string(seed)] = entry;
        }
        for (const auto& [key, a] : acc) means[key] = a.first / static_cast<double>(a.second);
        row["mean"] = means;
        row["runs_ok"] = ok;
        row["runs_failed"] = failed;
        if (mode == "train-law") {
            row["stable_count"] = stable;
            row["flagged"] = flagged;
        }
        row["top_count"] = top[run.name];
        row["per_seed"] = seeds;
        rows.push_back(row);
    }
    std::vector<json> sorted(rows.begin(), rows.end());
    std::stable_sort(sorted.begin(), sorted.end(), [&](const json& a, const json& b) {
        return better(a["mean"].value(pkey, json(nullptr)), b["mean"].value(pkey, json(nullptr)));
    });

    json summary = {{"mode", mode},
                    {"seeds", spec.seeds},
                    {"primary", primary},
                    {"rows", sorted},
                    {"per_seed_ranking", per_seed},
                    {"output_dir", dir.string()},
                    {"stamp", version_stamp()},
                    {"timestamp", utc_timestamp()}};
    write_json(dir / "sweep_summary.json", summary);

    std::vector<std::string> cols;
    if (mode == "train-seg") cols = {"val_mdice", "val_miou", "final_train_loss"};
    else if (mode == "train-law") cols = {"lesion_mse", "mse", "final_loss", "alignment_first", "alignment_last"};
    else if (mode == "profile") cols = {"gflops", "flops_ratio"};
    else if (!sorted.empty()) for (const auto& [key, v] : sorted.front()["mean"].items()) cols.push_back(key);
    std::vector<std::string> header{"name", "params"};
    header.insert(header.end(), cols.begin(), cols.end());
    if (mode == "train-law") header.insert(header.end(), {"stable", "flag"});
    header.insert(header.end(), {"top", "ok"});
    std::vector<std::vector<std::string>> table;
    for (const auto& r : sorted) {
        std::vector<std::string> line{r["name"].get<std::string>(), detail::fmt_cell(r["mean"].value("params", json(nullptr)))};
        if (!line[1].empty() && line[1] != "-") line[1] = std::to_string(std::llround(r["mean"]["params"].get<double>()));
        for (const auto& c : cols) line.push_back(detail::fmt_cell(r["mean"].value(c, json(nullptr))));
        if (mode == "train-law") {
            line.push_back(std::to_string(r["stable_count"].get<std::size_t>()) + "/" + std::to_string(spec.seeds.size()));
            line.push_back(r["flagged"].get<bool>() ? "UNSTABLE" : "");
        }
        line.push_back(std::to_string(r["top_count"].get<std::size_t>()) + "/" + std::to_string(spec.seeds.size()));
        line.push_back(std::to_string(r["runs_ok"].get<std::size_t>()) + "/" + std::to_string(spec.seeds.size()));
        table.push_back(line);
    }
    std::ofstream(dir / "sweep_summary.txt") << detail::aligned_table(header, table);
    return summary;
}

inline SweepSpec load_sweep(const std::filesystem::path& file, ConfigSource& src) {
    src = ConfigSource::from_file(file);
    try {
        return parse_sweep(json::parse(src.text), src);
    } catch (const json::parse_error& e) {
        const std::size_t upto = std::min<std::size_t>(e.byte ? e.byte - 1 : 0, src.text.size());
        const auto line = 1 + static_cast<std::size_t>(std::count(src.text.begin(), src.text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
        throw ConfigError(src.name, line, std::string("invalid JSON: ") + e.what());
    }
}

}  // namespace asw
