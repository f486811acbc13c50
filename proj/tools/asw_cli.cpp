// asw: command-line front end for data generation, training, evaluation,
// profiling, map export and sweeps.
//
//   asw <mode> [config.json] [--key.path=value ...] [--print-config]
//   asw sweep sweep.json [--key.path=value ...]
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "asw/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

// A report written by an earlier run can be used as a config: its embedded
// "config" member is what gets resolved.
asw::json unwrap_report(asw::json j) {
    if (j.is_object() && j.contains("config") && j.contains("stamp") && j["config"].is_object()) return j["config"];
    return j;
}

int run_mode(const std::string& mode, const std::string& file, const std::vector<std::string>& extras, bool print_only) {
    std::vector<asw::Override> overrides;
    for (const auto& e : extras) overrides.push_back(asw::parse_override(e));
    asw::ConfigSource src{"<defaults>", "{}"};
    asw::json user = asw::json::object();
    if (!file.empty()) {
        src = asw::ConfigSource::from_file(file);
        try {
            user = unwrap_report(asw::json::parse(src.text));
        } catch (const asw::json::parse_error& e) {
            const std::size_t upto = std::min<std::size_t>(e.byte ? e.byte - 1 : 0, src.text.size());
            const auto line = 1 + std::count(src.text.begin(), src.text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
            throw asw::ConfigError(src.name, static_cast<std::size_t>(line), std::string("invalid JSON: ") + e.what());
        }
    }
    if (user.is_object() && user.contains("mode") && user["mode"] != mode)
        throw asw::ConfigError(src.name, src.locate({"mode"}),
                               "config declares mode " + user["mode"].dump() + " but the command is '" + mode + "'");
    overrides.insert(overrides.begin(), asw::Override{"mode", mode});
    const asw::ResolvedConfig cfg = asw::resolve_config(user, src, overrides);
    if (print_only) {
        std::cout << cfg.tree.dump(2) << '\n';
        return kExitOk;
    }
    std::cerr << "asw " << mode << " -> " << cfg.output_dir.string() << '\n';
    const asw::RunOutcome out = asw::run_experiment(cfg);
    std::cout << out.report["summary"].dump() << '\n';
    if (!out.ok) {
        std::cerr << "error: " << out.report.value("divergence", std::string("training diverged"))
                  << " (see diagnostic.json)\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int run_sweep(const std::string& file, const std::vector<std::string>& extras) {
    std::vector<asw::Override> overrides;
    for (const auto& e : extras) overrides.push_back(asw::parse_override(e));
    asw::ConfigSource src;
    const asw::SweepSpec spec = asw::load_sweep(file, src);
    const asw::json summary = asw::run_sweep(spec, src, overrides, &std::cerr);
    std::ifstream table(std::filesystem::path(summary["output_dir"].get<std::string>()) / "sweep_summary.txt");
    std::cout << table.rdbuf();
    for (const auto& row : summary["rows"])
        if (row["runs_failed"].get<std::size_t>() > 0) return kExitRuntime;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive spatial weighting experiments (LAW / ORDER)"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(ASW_VERSION) + " (" + ASW_GIT_HASH + ")");

    std::string file;
    bool print_only = false;
    std::string chosen;
    for (const auto& mode : asw::experiment_modes()) {
        auto* sub = app.add_subcommand(mode, "run a " + mode + " experiment");
        sub->add_option("config", file, "JSON config file (omit to use defaults)")->check(CLI::ExistingFile);
        sub->add_flag("--print-config", print_only, "print the resolved config and exit");
        sub->allow_extras();
        sub->footer("Any --key.path=value argument overrides the matching config entry.");
        sub->callback([&chosen, mode] { chosen = mode; });
    }
    auto* sweep = app.add_subcommand("sweep", "run every entry of a sweep file and summarize");
    sweep->add_option("sweep_file", file, "JSON sweep file")->required()->check(CLI::ExistingFile);
    sweep->allow_extras();
    sweep->callback([&chosen] { chosen = "sweep"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    std::vector<std::string> extras;
    for (auto* sub : app.get_subcommands())
        for (const auto& x : sub->remaining()) extras.push_back(x);

    try {
        if (chosen == "sweep") return run_sweep(file, extras);
        return run_mode(chosen, file, extras, print_only);
    } catch (const asw::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const asw::TrainingDiverged& e) {
        std::cerr << "error: training diverged: " << e.what() << " (see diagnostic.json)\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}
