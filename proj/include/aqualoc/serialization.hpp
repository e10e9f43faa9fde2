#ifndef AQUALOC_SERIALIZATION_HPP
#define AQUALOC_SERIALIZATION_HPP

#include "aqualoc/environment.hpp"
#include "aqualoc/signal.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <filesystem>
#include <string>

namespace aqualoc {

using json = nlohmann::json;

void to_json(json& j, const Environment& e);
void from_json(const json& j, Environment& e);
void to_json(json& j, const TimeGrid& g);
void from_json(const json& j, TimeGrid& g);
void to_json(json& j, const AnalyticPulse& p);
void from_json(const json& j, AnalyticPulse& p);
void to_json(json& j, const Region& r);
void from_json(const json& j, Region& r);
void to_json(json& j, const SourceLocation& p);
void from_json(const json& j, SourceLocation& p);

/// Lower-case hex of the little-endian binary64 bytes, 16 characters per value.
std::string encode_f64_hex(const Eigen::VectorXd& v);
Eigen::VectorXd decode_f64_hex(const std::string& hex);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Parses JSON text; malformed input raises ConfigError naming line and column.
json parse_json_text(const std::string& text, const std::string& origin);

} // namespace aqualoc

#endif
