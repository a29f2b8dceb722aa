#pragma once

// Line-delimited JSON records for sources, units and attributions.
//   source      {id, text, meta}
//   unit        {query, issued_at, output, span: [i, j]}
//   attribution {unit_ref, source_id, score}

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrib/core.hpp"

namespace attrib {

using json = nlohmann::json;

inline json to_json(const Source& s) {
  json meta = json::object();
  for (const auto& [k, v] : s.meta()) meta[k] = v;
  return {{"id", s.id()}, {"text", join_tokens(s.text())}, {"meta", meta}};
}

inline json to_json(const AttributableUnit& z) {
  return {{"query", join_tokens(z.query().text())},
          {"issued_at", z.query().issued_at()},
          {"output", join_tokens(z.output().text)},
          {"span", json::array({z.span_start(), z.span_end()})}};
}

inline json to_json(const Attribution& a) {
  return {{"unit_ref", a.unit_ref}, {"source_id", a.source_id}, {"score", a.score}};
}

namespace detail {

inline const json& require_field(const json& j, const char* key, json::value_t type_a,
                                 json::value_t type_b = json::value_t::discarded) {
  auto it = j.find(key);
  if (it == j.end()) throw parameter_error(std::string("missing field '") + key + "'");
  if (it->type() != type_a && it->type() != type_b) {
    throw parameter_error(std::string("field '") + key + "' has the wrong type");
  }
  return *it;
}

}  // namespace detail

inline Source source_from_json(const json& j, const TokenizerConfig& tok = {}) {
  if (!j.is_object()) throw parameter_error("source record must be an object");
  const auto& id = detail::require_field(j, "id", json::value_t::string);
  const auto& text = detail::require_field(j, "text", json::value_t::string);
  Meta meta;
  if (auto it = j.find("meta"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw parameter_error("field 'meta' must be an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) throw parameter_error("meta value for '" + k + "' must be a string");
      meta[k] = v.get<std::string>();
    }
  }
  return Source(id.get<std::string>(), tokenize(text.get<std::string>(), tok), std::move(meta));
}

inline AttributableUnit unit_from_json(const json& j, const TokenizerConfig& tok = {}) {
  if (!j.is_object()) throw parameter_error("unit record must be an object");
  const auto& q = detail::require_field(j, "query", json::value_t::string);
  const auto& at = detail::require_field(j, "issued_at", json::value_t::number_integer,
                                         json::value_t::number_unsigned);
  const auto& out = detail::require_field(j, "output", json::value_t::string);
  const auto& span = detail::require_field(j, "span", json::value_t::array);
  if (span.size() != 2 || !span[0].is_number_unsigned() || !span[1].is_number_unsigned()) {
    throw parameter_error("field 'span' must be [i, j] with non-negative integers");
  }
  Query query(tokenize(q.get<std::string>(), tok), at.get<std::int64_t>());
  ModelOutput output{tokenize(out.get<std::string>(), tok)};
  return AttributableUnit(std::move(query), std::move(output), span[0].get<std::size_t>(),
                          span[1].get<std::size_t>());
}

inline Attribution attribution_from_json(const json& j) {
  if (!j.is_object()) throw parameter_error("attribution record must be an object");
  const auto& u = detail::require_field(j, "unit_ref", json::value_t::number_unsigned);
  const auto& s = detail::require_field(j, "source_id", json::value_t::string);
  const auto& score = detail::require_field(j, "score", json::value_t::number_float,
                                            json::value_t::number_unsigned);
  double value = score.is_number_unsigned() ? static_cast<double>(score.get<std::uint64_t>())
                                            : score.get<double>();
  return {u.get<std::size_t>(), s.get<std::string>(), value};
}

/// Parses one JSON value per non-blank line; errors carry the 1-based line.
template <class Fn>
void for_each_jsonl(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ingestion_error(std::string("malformed JSON: ") + e.what(), lineno);
    }
    try {
      fn(j, lineno);
    } catch (const ingestion_error&) {
      throw;
    } catch (const validation_error& e) {
      throw ingestion_error(e.what(), lineno);
    }
  }
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw parameter_error("cannot open '" + path.string() + "'");
  return in;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw parameter_error("cannot write '" + path.string() + "'");
  return out;
}

inline std::vector<Source> read_sources(std::istream& in, const TokenizerConfig& tok = {}) {
  std::vector<Source> out;
  for_each_jsonl(in, [&](const json& j, std::size_t) { out.push_back(source_from_json(j, tok)); });
  return out;
}

inline std::vector<AttributableUnit> read_units(std::istream& in, const TokenizerConfig& tok = {}) {
  std::vector<AttributableUnit> out;
  for_each_jsonl(in, [&](const json& j, std::size_t) { out.push_back(unit_from_json(j, tok)); });
  return out;
}

inline std::vector<Attribution> read_attributions(std::istream& in) {
  std::vector<Attribution> out;
  for_each_jsonl(in, [&](const json& j, std::size_t) { out.push_back(attribution_from_json(j)); });
  return out;
}

inline void write_jsonl(std::ostream& out, const std::vector<json>& records) {
  for (const auto& r : records) out << r.dump() << '\n';
}

inline void write_sources(std::ostream& out, std::span<const Source> sources) {
  for (const auto& s : sources) out << to_json(s).dump() << '\n';
}

inline void write_units(std::ostream& out, std::span<const AttributableUnit> units) {
  for (const auto& z : units) out << to_json(z).dump() << '\n';
}

inline void write_attributions(std::ostream& out, const AttributionSet& set) {
  for (const auto& a : set.attributions()) out << to_json(a).dump() << '\n';
}

}  // namespace attrib
