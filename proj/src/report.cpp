#include "echolab/report.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "echolab/common.hpp"

namespace echolab::report {
namespace {

void append_indent(std::string& out, int depth, int indent) {
  if (indent <= 0) return;
  out.push_back('\n');
  out.append(static_cast<std::size_t>(depth) * indent, ' ');
}

void dump_rec(const json& j, std::string& out, int depth, int indent) {
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out.push_back('{');
      bool first = true;
      for (auto it = j.cbegin(); it != j.cend(); ++it) {
        if (!first) out.push_back(',');
        first = false;
        append_indent(out, depth + 1, indent);
        out += json(it.key()).dump();  // reuse library string escaping
        out.push_back(':');
        if (indent > 0) out.push_back(' ');
        dump_rec(it.value(), out, depth + 1, indent);
      }
      append_indent(out, depth, indent);
      out.push_back('}');
      return;
    }
    case json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out.push_back('[');
      bool first = true;
      for (const auto& el : j) {
        if (!first) out.push_back(',');
        first = false;
        append_indent(out, depth + 1, indent);
        dump_rec(el, out, depth + 1, indent);
      }
      append_indent(out, depth, indent);
      out.push_back(']');
      return;
    }
    case json::value_t::number_float:
      out += format_double(j.get<double>());
      return;
    default:
      out += j.dump();
      return;
  }
}

}  // namespace

std::string format_double(double x) {
  if (!std::isfinite(x)) {
    // JSON has no inf/nan literals; reports encode them as strings.
    if (std::isnan(x)) return "\"nan\"";
    return x > 0 ? "\"inf\"" : "\"-inf\"";
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  std::string s(buf);
  // make integral doubles unambiguous as floats
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string dump_canonical(const json& j, int indent) {
  std::string out;
  dump_rec(j, out, 0, indent);
  if (indent > 0) out.push_back('\n');
  return out;
}

void write_json(const std::string& path, const json& j) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  f << dump_canonical(j, 2);
}

}  // namespace echolab::report
