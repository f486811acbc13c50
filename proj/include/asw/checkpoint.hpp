#pragma once

// Checkpoints: parameters as one flat little-endian f64 file plus a JSON
// manifest holding the shape registry and an echo of the producing config.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "asw/nn.hpp"

namespace asw {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointBin = "checkpoint.bin";
inline constexpr const char* kCheckpointManifest = "checkpoint.json";

namespace detail {

inline void put_f64_le(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64_le(const unsigned char* b) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t{b[i]} << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const ParamList& params, const nlohmann::json& config) {
    std::filesystem::create_directories(dir);
    std::ofstream bin(dir / kCheckpointBin, std::ios::binary);
    if (!bin) throw CheckpointError((dir / kCheckpointBin).string() + ": cannot open for writing");
    nlohmann::json registry = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& p : params) {
        for (double v : p.tensor.vec()) detail::put_f64_le(bin, v);
        registry.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}, {"count", p.tensor.numel()}});
        offset += p.tensor.numel();
    }
    nlohmann::json manifest = {{"format", "asw-checkpoint-1"}, {"dtype", "f64-le"}, {"total", offset},
                               {"params", registry}, {"config", config}};
    std::ofstream(dir / kCheckpointManifest) << manifest.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / kCheckpointManifest);
    if (!in) throw CheckpointError((dir / kCheckpointManifest).string() + ": cannot open");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError((dir / kCheckpointManifest).string() + ": " + e.what());
    }
}

// Copies stored values into `params`, matching by name; shapes must agree and
// every parameter must be present.
inline void load_checkpoint(const std::filesystem::path& dir, ParamList& params) {
    const nlohmann::json manifest = read_checkpoint_manifest(dir);
    std::ifstream bin(dir / kCheckpointBin, std::ios::binary);
    if (!bin) throw CheckpointError((dir / kCheckpointBin).string() + ": cannot open");
    const std::vector<unsigned char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    const std::size_t total = manifest.at("total").get<std::size_t>();
    if (raw.size() != 8 * total)
        throw CheckpointError((dir / kCheckpointBin).string() + ": expected " + std::to_string(8 * total) + " bytes, found " +
                              std::to_string(raw.size()));
    std::map<std::string, nlohmann::json> entries;
    for (const auto& e : manifest.at("params")) entries[e.at("name").get<std::string>()] = e;
    for (auto& p : params) {
        auto it = entries.find(p.name);
        if (it == entries.end()) throw CheckpointError("checkpoint has no parameter '" + p.name + "'");
        const Shape shape = it->second.at("shape").get<Shape>();
        if (shape != p.tensor.shape())
            throw CheckpointError("checkpoint parameter '" + p.name + "' has shape " + shape_str(shape) + ", model expects " +
                                  shape_str(p.tensor.shape()));
        const std::size_t offset = it->second.at("offset").get<std::size_t>();
        if (offset + p.tensor.numel() > total) throw CheckpointError("checkpoint parameter '" + p.name + "' overruns the data");
        auto dst = p.tensor.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = detail::get_f64_le(raw.data() + 8 * (offset + i));
    }
    if (entries.size() != params.size())
        throw CheckpointError("checkpoint holds " + std::to_string(entries.size()) + " parameters, model has " +
                              std::to_string(params.size()));
}

}  // namespace asw
