#include "aqualoc/serialization.hpp"

#include "aqualoc/error.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace aqualoc {

void to_json(json& j, const Environment& e) {
    j = json{{"depth", e.depth}, {"sound_speed", e.sound_speed}, {"receiver_depth", e.receiver_depth}};
}

void from_json(const json& j, Environment& e) {
    e.depth = j.value("depth", e.depth);
    e.sound_speed = j.value("sound_speed", e.sound_speed);
    e.receiver_depth = j.value("receiver_depth", e.receiver_depth);
}

void to_json(json& j, const TimeGrid& g) {
    j = json{{"sample_rate", g.sample_rate}, {"duration", g.duration}};
}

void from_json(const json& j, TimeGrid& g) {
    g = TimeGrid(j.value("sample_rate", g.sample_rate), j.value("duration", g.duration));
}

void to_json(json& j, const AnalyticPulse& p) {
    j = json{{"center_freq", p.center_freq},
             {"bandwidth", p.bandwidth},
             {"center_time", p.center_time},
             {"envelope_sigma", p.envelope_sigma},
             {"amplitude", p.amplitude}};
}

void from_json(const json& j, AnalyticPulse& p) {
    p = make_pulse(j.value("center_freq", p.center_freq), j.value("bandwidth", p.bandwidth),
                   j.value("center_time", p.center_time));
    if (j.contains("envelope_sigma"))
        p.envelope_sigma = j.at("envelope_sigma").get<double>();
    if (j.contains("amplitude"))
        p.amplitude = j.at("amplitude").get<double>();
}

void to_json(json& j, const Region& r) {
    j = json{{"x_min", r.x_min}, {"x_max", r.x_max}, {"z_min", r.z_min}, {"z_max", r.z_max}};
}

void from_json(const json& j, Region& r) {
    r.x_min = j.value("x_min", r.x_min);
    r.x_max = j.value("x_max", r.x_max);
    r.z_min = j.value("z_min", r.z_min);
    r.z_max = j.value("z_max", r.z_max);
}

void to_json(json& j, const SourceLocation& p) {
    j = json{{"x", p.x}, {"z", p.z}};
}

void from_json(const json& j, SourceLocation& p) {
    p.x = j.value("x", p.x);
    p.z = j.value("z", p.z);
}

std::string encode_f64_hex(const Eigen::VectorXd& v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(static_cast<std::size_t>(v.size()) * 16);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v[i]);
        for (int byte = 0; byte < 8; ++byte) {
            const auto b = static_cast<unsigned>((bits >> (8 * byte)) & 0xffU);
            out.push_back(digits[b >> 4]);
            out.push_back(digits[b & 0xfU]);
        }
    }
    return out;
}

namespace {

int hex_value(char c) {
    if (c >= '0' && c <= '9')
        return c - '0';
    if (c >= 'a' && c <= 'f')
        return c - 'a' + 10;
    if (c >= 'A' && c <= 'F')
        return c - 'A' + 10;
    return -1;
}

} // namespace

Eigen::VectorXd decode_f64_hex(const std::string& hex) {
    if (hex.size() % 16 != 0)
        throw Error(ErrorCode::CorruptPayload, "hex payload length is not a multiple of 16");
    Eigen::VectorXd out(static_cast<Eigen::Index>(hex.size() / 16));
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int byte = 0; byte < 8; ++byte) {
            const int hi = hex_value(hex[static_cast<std::size_t>(i * 16 + 2 * byte)]);
            const int lo = hex_value(hex[static_cast<std::size_t>(i * 16 + 2 * byte + 1)]);
            if (hi < 0 || lo < 0)
                throw Error(ErrorCode::CorruptPayload, "non-hex character in payload");
            bits |= static_cast<std::uint64_t>(hi * 16 + lo) << (8 * byte);
        }
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorCode::IoError, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << text;
    if (!out)
        throw Error(ErrorCode::IoError, "short write to " + path.string());
}

json parse_json_text(const std::string& text, const std::string& origin) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // e.byte is 1-based and points one past the offending character
        const std::size_t offset = e.byte == 0 ? 0 : std::min(e.byte - 1, text.size());
        std::size_t line = 1;
        std::size_t column = 1;
        for (std::size_t i = 0; i < offset; ++i) {
            if (text[i] == '\n') {
                ++line;
                column = 1;
            } else {
                ++column;
            }
        }
        throw Error(ErrorCode::ConfigError, origin + ":" + std::to_string(line) + ":" + std::to_string(column) +
                                                ": invalid JSON (" + e.what() + ")");
    }
}

} // namespace aqualoc
