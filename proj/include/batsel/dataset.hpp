#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "batsel/common.hpp"
#include "json.hpp"

namespace batsel {

enum class Split { kAdaptation, kBackbone, kValidation };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kAdaptation: return "adaptation";
    case Split::kBackbone: return "backbone";
    case Split::kValidation: return "validation";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "adaptation") return Split::kAdaptation;
  if (s == "backbone") return Split::kBackbone;
  if (s == "validation") return Split::kValidation;
  throw InputError("unknown split '" + std::string(s) + "'");
}

struct LabeledExample {
  std::string id;
  Eigen::VectorXd x;
  double y = 0.0;  // class index for classification heads, target otherwise
  Split split = Split::kAdaptation;
};

/// Non-owning, ordered view over examples. Lets the trainer consume D^A
/// interleaved with selected backbone rows without copying features.
using ExampleRefs = std::vector<const LabeledExample*>;

inline ExampleRefs refs_of(const std::vector<LabeledExample>& xs) {
  ExampleRefs out;
  out.reserve(xs.size());
  for (const auto& e : xs) out.push_back(&e);
  return out;
}

/// Checks the dataset invariants: finite features, equal dimension, unique
/// ids across all splits (which also makes D^A and D^B disjoint).
inline void validate_examples(const std::vector<LabeledExample>& xs) {
  std::unordered_set<std::string> seen;
  seen.reserve(xs.size());
  long dim = -1;
  for (const auto& e : xs) {
    if (!seen.insert(e.id).second) throw InputError("duplicate id '" + e.id + "'");
    if (dim < 0) dim = e.x.size();
    if (e.x.size() != dim) {
      throw InputError("ragged feature dimension at id '" + e.id + "': expected " +
                       std::to_string(dim) + ", got " + std::to_string(e.x.size()));
    }
    if (!e.x.allFinite()) throw InputError("non-finite feature at id '" + e.id + "'");
    if (!std::isfinite(e.y)) throw InputError("non-finite label at id '" + e.id + "'");
  }
}

struct Dataset {
  std::vector<LabeledExample> examples;

  std::vector<LabeledExample> of_split(Split s) const {
    std::vector<LabeledExample> out;
    for (const auto& e : examples)
      if (e.split == s) out.push_back(e);
    return out;
  }

  long dim() const { return examples.empty() ? 0 : examples.front().x.size(); }
};

inline LabeledExample parse_example_line(const std::string& line, std::size_t lineno) {
  const std::string where = "line " + std::to_string(lineno) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(where + "invalid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw InputError(where + "expected a JSON object");
  for (const char* key : {"id", "x", "y", "split"})
    if (!j.contains(key)) throw InputError(where + "missing key '" + key + "'");
  if (!j["id"].is_string()) throw InputError(where + "'id' must be a string");
  if (!j["x"].is_array()) throw InputError(where + "'x' must be an array");
  if (!j["y"].is_number()) throw InputError(where + "'y' must be a number");
  if (!j["split"].is_string()) throw InputError(where + "'split' must be a string");

  LabeledExample e;
  e.id = j["id"].get<std::string>();
  const auto& xs = j["x"];
  e.x.resize(static_cast<long>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i].is_number()) throw InputError(where + "non-numeric feature in 'x'");
    e.x[static_cast<long>(i)] = xs[i].get<double>();
  }
  e.y = j["y"].get<double>();
  e.split = parse_split(j["split"].get<std::string>());
  return e;
}

inline Dataset read_jsonl(std::istream& in) {
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ds.examples.push_back(parse_example_line(line, lineno));
  }
  validate_examples(ds.examples);
  return ds;
}

inline Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset '" + path + "'");
  return read_jsonl(in);
}

inline void write_jsonl(std::ostream& out, const std::vector<LabeledExample>& xs) {
  for (const auto& e : xs) {
    nlohmann::json j;
    j["id"] = e.id;
    j["x"] = std::vector<double>(e.x.data(), e.x.data() + e.x.size());
    if (std::floor(e.y) == e.y && std::abs(e.y) < 9.0e15)
      j["y"] = static_cast<long long>(e.y);
    else
      j["y"] = e.y;
    j["split"] = std::string(to_string(e.split));
    out << j.dump() << '\n';
  }
}

}  // namespace batsel
