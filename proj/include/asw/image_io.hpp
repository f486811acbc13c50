#pragma once

// Binary PGM (P5) / PPM (P6) reading and writing. Samples are exchanged as
// doubles in [0,1]; files store 8-bit values, or 16-bit big-endian when the
// header's maxval exceeds 255.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace asw {

struct ImageFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<double> planar;  // [channels][height][width], values in [0,1]
};

namespace detail {

inline std::string pnm_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

inline std::size_t pnm_number(std::istream& in, const std::string& path) {
    const std::string tok = pnm_token(in);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
        throw ImageFormatError(path + ": malformed PNM header");
    return std::stoul(tok);
}

}  // namespace detail

inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageFormatError(path.string() + ": cannot open");
    const std::string magic = detail::pnm_token(in);
    std::size_t channels;
    if (magic == "P5")
        channels = 1;
    else if (magic == "P6")
        channels = 3;
    else
        throw ImageFormatError(path.string() + ": unsupported format '" + magic + "' (expected P5 or P6)");
    Image img;
    img.channels = channels;
    img.width = detail::pnm_number(in, path.string());
    img.height = detail::pnm_number(in, path.string());
    const std::size_t maxval = detail::pnm_number(in, path.string());
    if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535)
        throw ImageFormatError(path.string() + ": invalid dimensions or maxval");
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    const std::size_t count = img.width * img.height * channels;
    std::vector<unsigned char> raw(count * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw ImageFormatError(path.string() + ": truncated pixel data");
    img.planar.resize(count);
    const std::size_t hw = img.width * img.height;
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t i = p * channels + c;
            const double v = bytes_per == 1 ? raw[i] : (raw[2 * i] << 8 | raw[2 * i + 1]);
            img.planar[c * hw + p] = v / static_cast<double>(maxval);
        }
    return img;
}

inline unsigned char to_byte(double v) {
    return static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

// Writes P5 for one channel, P6 for three; samples are rounded to round(255*v).
inline void write_pnm(const std::filesystem::path& path, std::size_t width, std::size_t height, std::size_t channels,
                      std::span<const double> planar) {
    if (channels != 1 && channels != 3) throw ImageFormatError("write_pnm: only 1 or 3 channels are supported");
    if (planar.size() != width * height * channels) throw ImageFormatError("write_pnm: sample count mismatch");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageFormatError(path.string() + ": cannot open for writing");
    out << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
    const std::size_t hw = width * height;
    std::vector<unsigned char> raw(hw * channels);
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < channels; ++c) raw[p * channels + c] = to_byte(planar[c * hw + p]);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      std::span<const double> values) {
    write_pnm(path, width, height, 1, values);
}

}  // namespace asw
