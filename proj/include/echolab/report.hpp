// Canonical JSON emission: sorted keys, every double printed with 17
// significant digits, so identical runs produce byte-identical reports.
#pragma once

#include <string>

#include <json.hpp>

namespace echolab::report {

using json = nlohmann::json;

// Serialize with deterministic formatting. nlohmann::json already keeps
// object keys sorted (std::map); numbers get a fixed %.17g rendering here
// instead of the library's shortest-round-trip format.
std::string dump_canonical(const json& j, int indent = 0);

// Write dump_canonical(j) to path (creates parent directories).
void write_json(const std::string& path, const json& j);

// Format a double exactly as the canonical writer does.
std::string format_double(double x);

}  // namespace echolab::report
