#pragma once

#include <json.hpp>

#include "xfernas/archspace.hpp"

namespace xfernas {

// Structured forms of genome_to_json/genome_from_json, used where a genome is
// embedded inside a larger document (history lines, search reports).
nlohmann::json genome_to_json_value(const Genome& g);
Genome genome_from_json_value(const nlohmann::json& doc);

}  // namespace xfernas
