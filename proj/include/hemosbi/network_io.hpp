#pragma once

#include "hemosbi/vessel.hpp"

#include <filesystem>
#include <json.hpp>

namespace hemosbi {

/// Parses a network definition. Every field carries its unit in the key
/// (e.g. "length_m", "stroke_volume_mL"); unknown keys are rejected with a
/// ConfigError. Topology problems are not errors here: run validate_network.
ArterialNetwork parse_network(const nlohmann::json& j);
ArterialNetwork load_network(const std::filesystem::path& path);
nlohmann::json network_to_json(const ArterialNetwork& net);

nlohmann::json heart_to_json(const HeartFunction& h);
HeartFunction parse_heart(const nlohmann::json& j);

/// Reads a JSON file, allowing // and /* */ comments.
nlohmann::json read_json_file(const std::filesystem::path& path);

} // namespace hemosbi
