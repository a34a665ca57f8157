// Typed tabular data: CSV ingestion, schema sidecars, feature groups and
// model/data consistency checks.
//
// Categorical cells are stored as 0-based level codes in the value matrix;
// the level vocabulary lives in the column spec.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "condshap/coalition.hpp"
#include "condshap/common.hpp"

namespace condshap {

enum class ColumnKind { numeric, categorical };

inline std::string to_string(ColumnKind k) { return k == ColumnKind::numeric ? "numeric" : "categorical"; }

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  std::vector<std::string> levels;  // categorical only

  int level_code(const std::string& level) const {
    auto it = std::find(levels.begin(), levels.end(), level);
    return it == levels.end() ? -1 : static_cast<int>(it - levels.begin());
  }

  friend bool operator==(const ColumnSpec&, const ColumnSpec&) = default;
};

/// Names, kinds and factor levels of a model's features.
struct FeatureSpec {
  std::vector<ColumnSpec> columns;

  std::size_t size() const { return columns.size(); }

  std::optional<std::size_t> index_of(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i].name == name) return i;
    return std::nullopt;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& c : columns) out.push_back(c.name);
    return out;
  }

  bool all_numeric() const {
    return std::all_of(columns.begin(), columns.end(), [](const ColumnSpec& c) { return c.kind == ColumnKind::numeric; });
  }
  bool all_categorical() const {
    return std::all_of(columns.begin(), columns.end(), [](const ColumnSpec& c) { return c.kind == ColumnKind::categorical; });
  }

  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

inline FeatureSpec numeric_spec(const std::vector<std::string>& names) {
  FeatureSpec spec;
  for (const auto& n : names) spec.columns.push_back({n, ColumnKind::numeric, {}});
  return spec;
}

/// Immutable column-typed table.
struct Dataset {
  FeatureSpec schema;
  Matrix values;  // n_rows x n_cols

  Eigen::Index n_rows() const { return values.rows(); }
  Eigen::Index n_cols() const { return values.cols(); }

  Dataset rows(const std::vector<Eigen::Index>& idx) const {
    Dataset out;
    out.schema = schema;
    out.values.resize(static_cast<Eigen::Index>(idx.size()), values.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.values.row(static_cast<Eigen::Index>(i)) = values.row(idx[i]);
    return out;
  }

  std::string cell_text(Eigen::Index r, Eigen::Index c) const {
    const auto& col = schema.columns[static_cast<std::size_t>(c)];
    if (col.kind == ColumnKind::categorical) return col.levels.at(static_cast<std::size_t>(values(r, c)));
    return format_double(values(r, c));
  }
};

inline Dataset make_dataset(FeatureSpec schema, Matrix values) {
  if (static_cast<std::size_t>(values.cols()) != schema.size())
    throw InvalidArgument("value matrix has " + std::to_string(values.cols()) + " columns but schema has " +
                          std::to_string(schema.size()));
  return Dataset{std::move(schema), std::move(values)};
}

// ---------------------------------------------------------------------------
// CSV

/// Column declarations supplied alongside a CSV file.
struct SchemaHints {
  std::vector<ColumnSpec> columns;  // categorical columns (levels optional) or numeric pins
  bool require_all_declared = true; // declared columns must exist in the file

  const ColumnSpec* find(const std::string& name) const {
    for (const auto& c : columns)
      if (c.name == name) return &c;
    return nullptr;
  }

  static SchemaHints from_spec(const FeatureSpec& spec) { return SchemaHints{spec.columns, true}; }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  if (quoted) throw ParseError("line " + std::to_string(line_no) + ": unterminated quoted field");
  out.push_back(cur);
  return out;
}

inline std::string trim(std::string s) {
  auto sp = [](unsigned char c) { return c == ' ' || c == '\t'; };
  while (!s.empty() && sp(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && sp(static_cast<unsigned char>(s[b]))) ++b;
  return s.substr(b);
}

inline std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Parses CSV text with a header row. Numeric columns must parse as reals;
/// columns declared categorical keep their level strings. Missing cells are
/// rejected.
inline Dataset parse_csv(std::istream& in, const SchemaHints& hints = {}, const std::string& source = "<csv>") {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty() && detail::trim(line) != "\r") {
      header = detail::split_csv_line(line, line_no);
      break;
    }
  }
  if (header.empty()) throw ParseError(source + ": empty file (no header row)");
  for (auto& h : header) h = detail::trim(h);
  {
    std::set<std::string> seen;
    for (const auto& h : header)
      if (!seen.insert(h).second) throw ParseError(source + ": duplicate column '" + h + "'");
  }
  if (hints.require_all_declared)
    for (const auto& c : hints.columns)
      if (std::find(header.begin(), header.end(), c.name) == header.end())
        throw ParseError(source + ": declared column '" + c.name + "' is missing");

  FeatureSpec schema;
  for (const auto& h : header) {
    ColumnSpec col{h, ColumnKind::numeric, {}};
    if (const ColumnSpec* hint = hints.find(h)) col = *hint;
    schema.columns.push_back(col);
  }
  std::vector<bool> fixed_levels(header.size());
  for (std::size_t c = 0; c < header.size(); ++c)
    fixed_levels[c] = schema.columns[c].kind == ColumnKind::categorical && !schema.columns[c].levels.empty();

  std::vector<std::vector<std::string>> raw_cat(header.size());
  std::vector<std::vector<double>> cols(header.size());
  std::size_t n_rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line, line_no);
    if (cells.size() != header.size())
      throw ParseError(source + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                       " fields, expected " + std::to_string(header.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      std::string cell = detail::trim(cells[c]);
      if (cell.empty() || cell == "NA")
        throw ParseError(source + ": missing value at line " + std::to_string(line_no) + ", column '" + header[c] +
                         "'");
      if (schema.columns[c].kind == ColumnKind::categorical) {
        raw_cat[c].push_back(cell);
      } else {
        double x;
        if (!parse_double(cell, x) || !std::isfinite(x))
          throw ParseError(source + ": non-numeric value '" + cell + "' at line " + std::to_string(line_no) +
                           ", column '" + header[c] + "'");
        cols[c].push_back(x);
      }
    }
    ++n_rows;
  }

  Matrix values(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(header.size()));
  for (std::size_t c = 0; c < header.size(); ++c) {
    auto& spec = schema.columns[c];
    if (spec.kind == ColumnKind::categorical) {
      if (!fixed_levels[c]) {
        std::set<std::string> lv(raw_cat[c].begin(), raw_cat[c].end());
        spec.levels.assign(lv.begin(), lv.end());
      }
      for (std::size_t r = 0; r < n_rows; ++r) {
        const int code = spec.level_code(raw_cat[c][r]);
        if (code < 0)
          throw ParseError(source + ": unknown level '" + raw_cat[c][r] + "' in column '" + spec.name + "'");
        values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = code;
      }
    } else {
      for (std::size_t r = 0; r < n_rows; ++r)
        values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = cols[c][r];
    }
  }
  return Dataset{std::move(schema), std::move(values)};
}

inline Dataset load_csv(const std::string& path, const SchemaHints& hints = {}) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return parse_csv(in, hints, path);
}

inline void write_csv(std::ostream& out, const Dataset& data) {
  const auto names = data.schema.names();
  for (std::size_t c = 0; c < names.size(); ++c) out << (c ? "," : "") << detail::quote_csv(names[c]);
  out << '\n';
  for (Eigen::Index r = 0; r < data.n_rows(); ++r) {
    for (Eigen::Index c = 0; c < data.n_cols(); ++c) out << (c ? "," : "") << detail::quote_csv(data.cell_text(r, c));
    out << '\n';
  }
}

inline void write_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  write_csv(out, data);
}

// ---------------------------------------------------------------------------
// Schema sidecar: {"columns":[{"name":..., "kind":"numeric|categorical", "levels":[...]}]}

inline FeatureSpec feature_spec_from_json(const nlohmann::json& j) {
  FeatureSpec spec;
  const auto& cols = j.contains("columns") ? j.at("columns") : j;
  if (!cols.is_array()) throw ParseError("schema: expected an array of columns");
  for (const auto& c : cols) {
    ColumnSpec col;
    col.name = c.at("name").get<std::string>();
    const std::string kind = c.value("kind", "numeric");
    if (kind == "numeric") {
      col.kind = ColumnKind::numeric;
    } else if (kind == "categorical") {
      col.kind = ColumnKind::categorical;
      if (c.contains("levels")) col.levels = c.at("levels").get<std::vector<std::string>>();
    } else {
      throw ParseError("schema: unknown column kind '" + kind + "' for '" + col.name + "'");
    }
    spec.columns.push_back(std::move(col));
  }
  return spec;
}

inline nlohmann::json to_json(const FeatureSpec& spec) {
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : spec.columns) {
    nlohmann::json o{{"name", c.name}, {"kind", to_string(c.kind)}};
    if (c.kind == ColumnKind::categorical) o["levels"] = c.levels;
    cols.push_back(o);
  }
  return nlohmann::json{{"columns", cols}};
}

inline SchemaHints load_schema_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open schema '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("schema '" + path + "': " + e.what());
  }
  return SchemaHints{feature_spec_from_json(j).columns, true};
}

// ---------------------------------------------------------------------------
// Feature groups

struct GroupSpec {
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;

  std::size_t size() const { return groups.size(); }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& g : groups) out.push_back(g.first);
    return out;
  }
};

/// Group membership as feature masks, one per group.
struct ResolvedGroups {
  std::vector<std::string> names;
  std::vector<std::uint64_t> feature_masks;

  int size() const { return static_cast<int>(feature_masks.size()); }

  /// Each feature its own group.
  static ResolvedGroups identity(const FeatureSpec& spec) {
    ResolvedGroups g;
    for (std::size_t j = 0; j < spec.size(); ++j) {
      g.names.push_back(spec.columns[j].name);
      g.feature_masks.push_back(std::uint64_t{1} << j);
    }
    return g;
  }
};

inline ResolvedGroups resolve_groups(const GroupSpec& groups, const FeatureSpec& spec) {
  if (spec.size() > static_cast<std::size_t>(kMaxPlayers))
    throw ValidationError("at most 64 features are supported");
  if (groups.groups.empty()) throw ValidationError("group specification is empty");
  ResolvedGroups out;
  std::uint64_t covered = 0;
  for (const auto& [name, features] : groups.groups) {
    if (features.empty()) throw ValidationError("group '" + name + "' is empty");
    std::uint64_t mask = 0;
    for (const auto& f : features) {
      auto idx = spec.index_of(f);
      if (!idx) throw ValidationError("group '" + name + "' refers to unknown feature '" + f + "'");
      const std::uint64_t bit = std::uint64_t{1} << *idx;
      if (covered & bit) throw ValidationError("feature '" + f + "' belongs to more than one group");
      covered |= bit;
      mask |= bit;
    }
    out.names.push_back(name);
    out.feature_masks.push_back(mask);
  }
  std::string missing;
  for (std::size_t j = 0; j < spec.size(); ++j)
    if (!(covered >> j & 1U)) missing += (missing.empty() ? "" : ", ") + spec.columns[j].name;
  if (!missing.empty()) throw ValidationError("features not covered by any group: " + missing);
  return out;
}

/// Feature mask with bit j set iff feature j's group is in the group
/// coalition.
inline Coalition expand_group_coalition(Coalition group_coalition, const ResolvedGroups& groups) {
  std::uint64_t mask = 0;
  for (std::uint64_t g = group_coalition.mask; g; g &= g - 1) {
    const auto k = static_cast<std::size_t>(std::countr_zero(g));
    if (k >= groups.feature_masks.size()) throw InvalidArgument("group coalition is wider than the group count");
    mask |= groups.feature_masks[k];
  }
  return Coalition{mask};
}

// ---------------------------------------------------------------------------
// Consistency checks

struct CheckedTask {
  Dataset train;
  Dataset explain;
};

/// Checks names, kinds and level vocabularies of train, explain and the
/// model's declared features (when given). Both sets are returned with
/// categorical codes mapped into the reference (model, else training)
/// vocabulary.
inline CheckedTask validate_model_data(const std::optional<FeatureSpec>& model_spec, const Dataset& train,
                                       const Dataset& explain) {
  auto diff_names = [](const FeatureSpec& a, const FeatureSpec& b, const std::string& what) {
    std::string extra, missing;
    for (const auto& c : b.columns)
      if (!a.index_of(c.name)) extra += (extra.empty() ? "" : ", ") + c.name;
    for (const auto& c : a.columns)
      if (!b.index_of(c.name)) missing += (missing.empty() ? "" : ", ") + c.name;
    if (!extra.empty() || !missing.empty()) {
      std::string msg = what + " column mismatch";
      if (!extra.empty()) msg += "; extra columns: " + extra;
      if (!missing.empty()) msg += "; missing columns: " + missing;
      throw ValidationError(msg);
    }
    if (a.names() != b.names()) throw ValidationError(what + " columns are in a different order");
  };
  const FeatureSpec& reference = model_spec ? *model_spec : train.schema;
  diff_names(reference, train.schema, "training data");
  diff_names(reference, explain.schema, "explain data");

  CheckedTask task{train, explain};
  for (std::size_t c = 0; c < reference.size(); ++c) {
    const auto& ref = reference.columns[c];
    const auto& tr = train.schema.columns[c];
    const auto& ex = explain.schema.columns[c];
    if (tr.kind != ref.kind || ex.kind != ref.kind)
      throw ValidationError("column '" + ref.name + "' kind mismatch: model " + to_string(ref.kind) + ", train " +
                            to_string(tr.kind) + ", explain " + to_string(ex.kind));
    if (ref.kind != ColumnKind::categorical) continue;
    for (const auto& l : tr.levels)
      if (ref.level_code(l) < 0)
        throw ValidationError("column '" + ref.name + "': training level '" + l + "' unknown to the model");
    std::string unseen;
    for (const auto& l : ex.levels)
      if (tr.level_code(l) < 0) unseen += (unseen.empty() ? "" : ", ") + l;
    if (!unseen.empty())
      throw ValidationError("column '" + ref.name + "': explain levels absent from training data: " + unseen);
    const auto ci = static_cast<Eigen::Index>(c);
    for (Eigen::Index r = 0; r < train.n_rows(); ++r)
      task.train.values(r, ci) = ref.level_code(tr.levels[static_cast<std::size_t>(train.values(r, ci))]);
    for (Eigen::Index r = 0; r < explain.n_rows(); ++r)
      task.explain.values(r, ci) = ref.level_code(ex.levels[static_cast<std::size_t>(explain.values(r, ci))]);
    task.train.schema.columns[c].levels = ref.levels;
    task.explain.schema.columns[c].levels = ref.levels;
  }
  return task;
}

}  // namespace condshap
