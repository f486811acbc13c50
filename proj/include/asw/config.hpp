#pragma once

// Experiment configuration: a JSON document checked against a fixed schema of
// defaults. Unknown keys and mistyped values are rejected with the line they
// appear on; `--a.b=value` overrides are applied on top of the file.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asw/checkpoint.hpp"
#include "asw/data.hpp"
#include "asw/law.hpp"
#include "asw/order.hpp"

namespace asw {

using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "ASW_OUTPUT_ROOT";

inline const std::vector<std::string>& experiment_modes() {
    static const std::vector<std::string> m{"gen-data", "train-seg", "train-law", "eval", "profile", "export-maps"};
    return m;
}

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& source, std::size_t line, const std::string& msg)
        : std::runtime_error(format(source, line, msg)), line_(line) {}
    std::size_t line() const { return line_; }

private:
    static std::string format(const std::string& source, std::size_t line, const std::string& msg) {
        std::string s = source;
        if (line) s += ":" + std::to_string(line);
        return s + ": " + msg;
    }
    std::size_t line_;
};

// ------------------------------------------------------------------ schema

inline json default_config() {
    const SynthSpec synth;
    const LawConfig law;
    const LawModelConfig lm;
    const LawTrainConfig lt;
    const SegTrainConfig st;
    json j;
    j["mode"] = "train-seg";
    j["seed"] = std::uint64_t{0};
    j["output_dir"] = "";
    j["data"] = {{"source", "synthetic"},
                 {"count", std::uint64_t{200}},
                 {"synthetic",
                  {{"size", synth.size},
                   {"channels", synth.channels},
                   {"ratio_min", synth.ratio_min},
                   {"ratio_max", synth.ratio_max},
                   {"blobs_min", synth.blobs_min},
                   {"blobs_max", synth.blobs_max},
                   {"contrast", synth.contrast},
                   {"noise_std", synth.noise_std}}},
                 {"images_dir", ""},
                 {"masks_dir", ""},
                 {"crop", false}};
    j["order"] = OrderConfig{};
    j["law"] = law;
    j["law"]["model"] = lm;
    j["law"]["schedule"] = {{"T", std::uint64_t{100}}, {"beta_start", 1e-4}, {"beta_end", 2e-2}};
    j["seg_train"] = {{"epochs", st.epochs}, {"batch", st.batch}, {"lr", st.lr}, {"flips", st.flips}};
    j["law_train"] = {{"steps", lt.steps},
                      {"batch", lt.batch},
                      {"lr", lt.lr},
                      {"snapshot_every", lt.snapshot_every},
                      {"probe_count", lt.probe_count}};
    j["eval"] = {{"checkpoint", ""}, {"timesteps", std::uint64_t{5}}, {"split", "val"}};
    j["export"] = {{"checkpoint", ""}, {"count", std::uint64_t{4}}, {"split", "val"}};
    j["profile"] = {{"target", "order"}, {"size", std::uint64_t{0}}};
    return j;
}

// ------------------------------------------------------------------ source

// The raw text of a config file, kept for line lookups.
struct ConfigSource {
    std::string name = "<config>";
    std::string text;

    static ConfigSource from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError(path.string(), 0, "cannot open config file");
        std::ostringstream ss;
        ss << in.rdbuf();
        return {path.string(), ss.str()};
    }

    // Line of the deepest key of `path` that can be found by following the
    // keys in order through the text; 0 when even the first is absent.
    std::size_t locate(const std::vector<std::string>& path) const {
        std::size_t pos = 0, found = std::string::npos;
        for (const auto& key : path) {
            const std::string quoted = "\"" + key + "\"";
            std::size_t p = pos;
            for (;;) {
                p = text.find(quoted, p);
                if (p == std::string::npos) break;
                std::size_t q = p + quoted.size();
                while (q < text.size() && std::isspace(static_cast<unsigned char>(text[q]))) ++q;
                if (q < text.size() && text[q] == ':') break;
                p += quoted.size();
            }
            if (p == std::string::npos) break;
            found = pos = p;
        }
        if (found == std::string::npos) return 0;
        return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(found), '\n'));
    }
};

inline std::vector<std::string> split_dotted(const std::string& dotted) {
    std::vector<std::string> out;
    std::stringstream ss(dotted);
    for (std::string part; std::getline(ss, part, '.');) out.push_back(part);
    return out;
}

inline std::string join_dotted(const std::vector<std::string>& path) {
    std::string s;
    for (const auto& p : path) s += (s.empty() ? "" : ".") + p;
    return s;
}

struct Override {
    std::string key;  // dotted path
    json value;
};

// "--a.b=3" -> {a.b, 3}. The value is read as JSON when it parses as JSON and
// as a plain string otherwise.
inline Override parse_override(const std::string& arg) {
    std::string s = arg;
    if (s.rfind("--", 0) == 0) s = s.substr(2);
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(arg, 0, "override must look like --key.path=value");
    Override o{s.substr(0, eq), {}};
    const std::string v = s.substr(eq + 1);
    o.value = json::parse(v, nullptr, false);
    if (o.value.is_discarded()) o.value = v;
    return o;
}

inline void set_dotted(json& j, const std::string& dotted, const json& value) {
    json* cur = &j;
    for (const auto& k : split_dotted(dotted)) {
        if (!cur->is_object()) *cur = json::object();
        cur = &(*cur)[k];
    }
    *cur = value;
}

// ---------------------------------------------------------------- resolved

struct ResolvedConfig {
    json tree;  // defaults merged with the file and overrides
    std::string mode;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;

    std::string data_source;
    std::size_t data_count = 0;
    SynthSpec synth;
    std::filesystem::path images_dir, masks_dir;
    bool crop = false;

    OrderConfig order;
    LawConfig law;
    LawModelConfig law_model;
    std::size_t schedule_T = 100;
    double beta_start = 1e-4, beta_end = 2e-2;

    SegTrainConfig seg_train;
    LawTrainConfig law_train;

    std::filesystem::path eval_checkpoint;
    std::size_t eval_timesteps = 5;
    std::string eval_split = "val";  // "val" or "all"
    std::filesystem::path export_checkpoint;
    std::size_t export_count = 4;
    std::string export_split = "val";
    std::string profile_target;
    std::size_t profile_size = 0;

    NoiseSchedule schedule() const { return NoiseSchedule::linear(schedule_T, beta_start, beta_end); }
};

namespace detail {

class Resolver {
public:
    Resolver(const ConfigSource& src, const std::vector<Override>& overrides) : src_(src) {
        for (const auto& o : overrides) override_keys_.push_back(o.key);
    }

    [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& msg) const {
        const std::string dotted = join_dotted(path);
        for (const auto& k : override_keys_)
            if (dotted == k || dotted.rfind(k + ".", 0) == 0 || k.rfind(dotted + ".", 0) == 0)
                throw ConfigError("--" + k, 0, msg);
        throw ConfigError(src_.name, src_.locate(path), msg);
    }

    // Copies `user` over `defaults`, rejecting keys the schema does not know
    // and values whose JSON type differs from the default's.
    void merge(json& defaults, const json& user, std::vector<std::string>& path) const {
        if (!user.is_object()) fail(path, (path.empty() ? std::string("config") : "'" + join_dotted(path) + "'") + " must be an object");
        for (const auto& [key, value] : user.items()) {
            path.push_back(key);
            if (!defaults.contains(key)) fail(path, "unknown key '" + join_dotted(path) + "'");
            json& d = defaults[key];
            if (d.is_object()) {
                merge(d, value, path);
            } else {
                check_type(d, value, path);
                d = normalized(value);
            }
            path.pop_back();
        }
    }

    template <class T>
    T get(const json& tree, const std::vector<std::string>& path) const {
        const json* cur = &tree;
        for (const auto& k : path) cur = &cur->at(k);
        try {
            return cur->get<T>();
        } catch (const json::exception& e) {
            fail(path, "'" + join_dotted(path) + "': " + e.what());
        }
    }

    // Maps a validation message that starts with a dotted key (for example
    // "order.channels must ...") back to the offending line.
    [[noreturn]] void fail_message(const std::string& msg, const std::vector<std::string>& fallback) const {
        static const std::regex lead(R"(^([A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)+))");
        std::smatch m;
        if (std::regex_search(msg, m, lead)) fail(split_dotted(m[1].str()), msg);
        fail(fallback, msg);
    }

private:
    // Configs built in code carry signed integers where parsed files carry
    // unsigned ones; both are accepted when non-negative.
    static bool non_negative_int(const json& v) {
        return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    }

    static json normalized(const json& v) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
        if (v.is_array()) {
            json out = json::array();
            for (const auto& e : v) out.push_back(normalized(e));
            return out;
        }
        return v;
    }

    static const char* type_label(const json& v) {
        if (v.is_boolean()) return "a boolean";
        if (v.is_number_unsigned()) return "a non-negative integer";
        if (v.is_number()) return "a number";
        if (v.is_string()) return "a string";
        if (v.is_array()) return "an array";
        if (v.is_object()) return "an object";
        return "null";
    }

    void check_type(const json& d, const json& v, const std::vector<std::string>& path) const {
        bool ok;
        const char* want = type_label(d);
        if (d.is_number_unsigned()) ok = non_negative_int(v);
        else if (d.is_number()) ok = v.is_number();
        else if (d.is_array()) {
            ok = v.is_array();
            want = "an array of non-negative integers";
            if (ok)
                for (const auto& e : v) ok = ok && non_negative_int(e);
        } else ok = d.type() == v.type();
        if (!ok) fail(path, "'" + join_dotted(path) + "' must be " + want + ", got " + v.dump());
    }

    const ConfigSource& src_;
    std::vector<std::string> override_keys_;
};

}  // namespace detail

inline std::filesystem::path resolve_output_dir(const std::string& configured, const std::string& mode, std::uint64_t seed) {
    const char* env = std::getenv(kOutputRootEnv);
    const std::filesystem::path root = env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
    if (configured.empty()) return root / (mode + "-seed" + std::to_string(seed));
    const std::filesystem::path p(configured);
    return p.is_absolute() || !(env && *env) ? p : root / p;
}

// `user` is the parsed file (or an embedded config echo); `src` supplies its
// text for line numbers.
inline ResolvedConfig resolve_config(json user, const ConfigSource& src, const std::vector<Override>& overrides = {}) {
    const detail::Resolver r(src, overrides);
    for (const auto& o : overrides) set_dotted(user, o.key, o.value);
    json tree = default_config();
    std::vector<std::string> path;
    r.merge(tree, user, path);

    ResolvedConfig c;
    c.tree = tree;
    c.mode = r.get<std::string>(tree, {"mode"});
    if (std::find(experiment_modes().begin(), experiment_modes().end(), c.mode) == experiment_modes().end())
        r.fail({"mode"}, "unknown mode '" + c.mode + "'");
    c.seed = r.get<std::uint64_t>(tree, {"seed"});
    c.output_dir = resolve_output_dir(r.get<std::string>(tree, {"output_dir"}), c.mode, c.seed);

    c.data_source = r.get<std::string>(tree, {"data", "source"});
    if (c.data_source != "synthetic" && c.data_source != "directory")
        r.fail({"data", "source"}, "data.source must be \"synthetic\" or \"directory\"");
    c.data_count = r.get<std::size_t>(tree, {"data", "count"});
    auto sy = [&](const char* k) { return std::vector<std::string>{"data", "synthetic", k}; };
    c.synth.size = r.get<std::size_t>(tree, sy("size"));
    c.synth.channels = r.get<std::size_t>(tree, sy("channels"));
    c.synth.ratio_min = r.get<double>(tree, sy("ratio_min"));
    c.synth.ratio_max = r.get<double>(tree, sy("ratio_max"));
    c.synth.blobs_min = r.get<std::size_t>(tree, sy("blobs_min"));
    c.synth.blobs_max = r.get<std::size_t>(tree, sy("blobs_max"));
    c.synth.contrast = r.get<double>(tree, sy("contrast"));
    c.synth.noise_std = r.get<double>(tree, sy("noise_std"));
    c.synth.seed = c.seed;
    c.images_dir = r.get<std::string>(tree, {"data", "images_dir"});
    c.masks_dir = r.get<std::string>(tree, {"data", "masks_dir"});
    c.crop = r.get<bool>(tree, {"data", "crop"});
    if (c.data_source == "synthetic") {
        try {
            c.synth.validate();
        } catch (const SpecError& e) {
            r.fail({"data", "synthetic"}, std::string("data.synthetic: ") + e.what());
        }
        if (c.data_count == 0 && c.mode != "profile") r.fail({"data", "count"}, "data.count must be positive");
    }

    auto od = [&](const char* k) { return std::vector<std::string>{"order", k}; };
    c.order.channels = r.get<std::vector<std::size_t>>(tree, od("channels"));
    const auto stages = r.get<std::vector<std::size_t>>(tree, od("attn_stages"));
    c.order.attn_stages = {stages.begin(), stages.end()};
    c.order.in_channels = r.get<std::size_t>(tree, od("in_channels"));
    c.order.heads = r.get<std::size_t>(tree, od("heads"));
    c.order.gate_enabled = r.get<bool>(tree, od("gate_enabled"));
    c.order.attn_max_side = r.get<std::size_t>(tree, od("attn_max_side"));
    c.order.input_size = r.get<std::size_t>(tree, od("input_size"));
    try {
        c.order.validate();
    } catch (const std::invalid_argument& e) {
        r.fail_message(e.what(), {"order"});
    }

    auto ld = [&](const char* k) { return std::vector<std::string>{"law", k}; };
    c.law.gamma = r.get<double>(tree, ld("gamma"));
    c.law.tau = r.get<double>(tree, ld("tau"));
    c.law.w_min = r.get<double>(tree, ld("w_min"));
    c.law.w_max = r.get<double>(tree, ld("w_max"));
    c.law.lambda_dice = r.get<double>(tree, ld("lambda_dice"));
    c.law.beta_T = r.get<double>(tree, ld("beta_T"));
    c.law.beta_D = r.get<double>(tree, ld("beta_D"));
    c.law.eps_s = r.get<double>(tree, ld("eps_s"));
    c.law.use_ratio = r.get<bool>(tree, ld("use_ratio"));
    c.law.use_delta = r.get<bool>(tree, ld("use_delta"));
    c.law.use_norm = r.get<bool>(tree, ld("use_norm"));
    c.law.use_min_clamp = r.get<bool>(tree, ld("use_min_clamp"));
    c.law.use_max_clamp = r.get<bool>(tree, ld("use_max_clamp"));
    c.law.use_dice = r.get<bool>(tree, ld("use_dice"));
    c.law.weights_through_phi = r.get<bool>(tree, ld("weights_through_phi"));
    c.law.per_batch_norm = r.get<bool>(tree, ld("per_batch_norm"));
    c.law.degenerate_fallback = r.get<bool>(tree, ld("degenerate_fallback"));
    try {
        c.law.validate();
    } catch (const std::invalid_argument& e) {
        r.fail_message(e.what(), {"law"});
    }
    auto lm = [&](const char* k) { return std::vector<std::string>{"law", "model", k}; };
    c.law_model.latent_channels = r.get<std::size_t>(tree, lm("latent_channels"));
    c.law_model.student_hidden = r.get<std::size_t>(tree, lm("student_hidden"));
    c.law_model.teacher_hidden = r.get<std::size_t>(tree, lm("teacher_hidden"));
    c.law_model.phi_hidden = r.get<std::size_t>(tree, lm("phi_hidden"));
    c.law_model.emb_channels = r.get<std::size_t>(tree, lm("emb_channels"));
    for (const char* k : {"latent_channels", "student_hidden", "teacher_hidden", "phi_hidden"})
        if (r.get<std::size_t>(tree, lm(k)) == 0) r.fail(lm(k), std::string("law.model.") + k + " must be positive");
    if (c.law_model.emb_channels % 2) r.fail(lm("emb_channels"), "law.model.emb_channels must be even");
    c.schedule_T = r.get<std::size_t>(tree, {"law", "schedule", "T"});
    c.beta_start = r.get<double>(tree, {"law", "schedule", "beta_start"});
    c.beta_end = r.get<double>(tree, {"law", "schedule", "beta_end"});
    try {
        (void)c.schedule();
    } catch (const std::exception& e) {
        r.fail({"law", "schedule"}, std::string("law.schedule: ") + e.what());
    }

    c.seg_train.epochs = r.get<std::size_t>(tree, {"seg_train", "epochs"});
    c.seg_train.batch = r.get<std::size_t>(tree, {"seg_train", "batch"});
    c.seg_train.lr = r.get<double>(tree, {"seg_train", "lr"});
    c.seg_train.flips = r.get<bool>(tree, {"seg_train", "flips"});
    c.seg_train.seed = c.seed;
    if (c.seg_train.batch == 0) r.fail({"seg_train", "batch"}, "seg_train.batch must be positive");
    c.law_train.steps = r.get<std::size_t>(tree, {"law_train", "steps"});
    c.law_train.batch = r.get<std::size_t>(tree, {"law_train", "batch"});
    c.law_train.lr = r.get<double>(tree, {"law_train", "lr"});
    c.law_train.snapshot_every = r.get<std::size_t>(tree, {"law_train", "snapshot_every"});
    c.law_train.probe_count = r.get<std::size_t>(tree, {"law_train", "probe_count"});
    c.law_train.seed = c.seed;
    if (c.law_train.batch == 0) r.fail({"law_train", "batch"}, "law_train.batch must be positive");

    c.eval_checkpoint = r.get<std::string>(tree, {"eval", "checkpoint"});
    c.eval_timesteps = r.get<std::size_t>(tree, {"eval", "timesteps"});
    c.eval_split = r.get<std::string>(tree, {"eval", "split"});
    c.export_checkpoint = r.get<std::string>(tree, {"export", "checkpoint"});
    c.export_count = r.get<std::size_t>(tree, {"export", "count"});
    c.export_split = r.get<std::string>(tree, {"export", "split"});
    for (const char* sec : {"eval", "export"}) {
        const auto split = r.get<std::string>(tree, {sec, "split"});
        if (split != "val" && split != "all") r.fail({sec, "split"}, std::string(sec) + ".split must be \"val\" or \"all\"");
    }
    c.profile_target = r.get<std::string>(tree, {"profile", "target"});
    if (c.profile_target != "order" && c.profile_target != "law")
        r.fail({"profile", "target"}, "profile.target must be \"order\" or \"law\"");
    c.profile_size = r.get<std::size_t>(tree, {"profile", "size"});

    // Cross-section checks that depend on the mode.
    const bool uses_data = c.mode != "profile";
    if (uses_data && c.data_source == "directory") {
        for (const auto& [key, dir] : {std::pair{"images_dir", c.images_dir}, std::pair{"masks_dir", c.masks_dir}}) {
            if (dir.empty()) r.fail({"data", key}, std::string("data.") + key + " is required when data.source is \"directory\"");
            if (!std::filesystem::is_directory(dir)) r.fail({"data", key}, "directory does not exist: " + dir.string());
        }
    }
    const std::size_t data_channels = c.data_source == "synthetic" ? c.synth.channels : 0;
    if (data_channels && (c.mode == "train-seg") && data_channels != c.order.in_channels)
        r.fail({"order", "in_channels"}, "order.in_channels (" + std::to_string(c.order.in_channels) +
                                             ") does not match data.synthetic.channels (" + std::to_string(data_channels) + ")");
    if (data_channels && c.mode == "train-law" && data_channels != c.law_model.latent_channels)
        r.fail({"law", "model", "latent_channels"},
               "law.model.latent_channels (" + std::to_string(c.law_model.latent_channels) +
                   ") does not match data.synthetic.channels (" + std::to_string(data_channels) + ")");
    if (c.mode == "train-seg" && c.data_source == "synthetic" && c.synth.size % c.order.divisor())
        r.fail({"data", "synthetic", "size"}, "data.synthetic.size must be a multiple of " + std::to_string(c.order.divisor()) +
                                                  " for the segmentation network");
    for (const auto& [mode, key, ckpt] : {std::tuple{"eval", "eval", c.eval_checkpoint},
                                          std::tuple{"export-maps", "export", c.export_checkpoint}}) {
        if (c.mode != mode) continue;
        if (ckpt.empty()) r.fail({key, "checkpoint"}, std::string(key) + ".checkpoint is required in " + mode + " mode");
        if (!std::filesystem::exists(ckpt / kCheckpointManifest))
            r.fail({key, "checkpoint"}, "no checkpoint found at " + ckpt.string());
    }
    return c;
}

inline ResolvedConfig load_config(const std::filesystem::path& file, const std::vector<Override>& overrides = {}) {
    const ConfigSource src = ConfigSource::from_file(file);
    json user;
    try {
        user = json::parse(src.text);
    } catch (const json::parse_error& e) {
        // byte offsets are 1-based positions just past the offending character
        const std::size_t upto = std::min<std::size_t>(e.byte ? e.byte - 1 : 0, src.text.size());
        const auto line = 1 + static_cast<std::size_t>(std::count(src.text.begin(), src.text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
        throw ConfigError(src.name, line, std::string("invalid JSON: ") + e.what());
    }
    return resolve_config(std::move(user), src, overrides);
}

}  // namespace asw
