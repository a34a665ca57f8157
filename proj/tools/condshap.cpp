// condshap command-line tool: explain, explain-forecast, compare, plot.
//
// Settings come from an optional JSON config file; command-line flags win
// over the file and CONDSHAP_WORKERS overrides the worker count of both.
// Exit codes: 0 ok, 1 user error, 2 internal error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "condshap/condshap.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using namespace condshap;

namespace {

// ---------------------------------------------------------------------------
// Config file plumbing

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void check_keys(const json& cfg, const std::set<std::string>& allowed, const std::string& what) {
  if (!cfg.is_object()) throw ParseError(what + ": expected a JSON object");
  for (const auto& [key, _] : cfg.items())
    if (!allowed.count(key)) throw ParseError(what + ": unknown setting '" + key + "'");
}

// Relative paths in a config file are relative to the file.
std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

std::vector<std::string> string_or_list(const json& j) {
  if (j.is_string()) return {j.get<std::string>()};
  return j.get<std::vector<std::string>>();
}

// Flags collected by CLI11; set ones are written over the config file.
struct CommonFlags {
  std::string config;
  std::string train, explain, model, schema, out, response;
  std::vector<std::string> approach;
  std::string phi0;
  std::optional<std::size_t> max_n_coalitions;
  std::optional<bool> iterative;
  std::optional<double> tol;
  std::optional<int> max_iterations;
  std::optional<int> n_mc_samples;
  std::optional<int> n_boot;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<bool> asymmetric;
  std::string ordering, confounding;
  std::vector<std::string> verbose;
  bool quiet = false;
  bool log_json = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("-c,--config", config, "JSON config file");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--approach", approach, "approach, or one per coalition size (comma separated)")->delimiter(',');
    cmd->add_option("--phi0", phi0, "phi_0: a number, mean_prediction or mean_response");
    cmd->add_option("--max-n-coalitions", max_n_coalitions, "coalition budget");
    cmd->add_option("--iterative", iterative, "iterative estimation (true/false)");
    cmd->add_option("--tol", tol, "convergence threshold");
    cmd->add_option("--max-iterations", max_iterations, "iteration limit");
    cmd->add_option("--n-mc-samples", n_mc_samples, "Monte Carlo samples per v(S)");
    cmd->add_option("--n-boot", n_boot, "bootstrap replicates for standard deviations");
    cmd->add_option("--seed", seed, "random seed");
    cmd->add_option("--workers", workers, "worker threads");
    cmd->add_option("--verbose", verbose, "basic,progress,convergence,shapley,vS_details or none")->delimiter(',');
    cmd->add_flag("-q,--quiet", quiet, "no progress output");
    cmd->add_flag("--log-json", log_json, "progress and errors as JSON lines");
  }

  void add_data(CLI::App* cmd) {
    cmd->add_option("--train", train, "training data CSV");
    cmd->add_option("--explain", explain, "observations to explain (CSV)");
    cmd->add_option("--model", model, "model JSON");
    cmd->add_option("--schema", schema, "column schema JSON");
    cmd->add_option("--response", response, "response column (ignored as a feature)");
    cmd->add_option("--asymmetric", asymmetric, "asymmetric Shapley values (true/false)");
    cmd->add_option("--causal-ordering", ordering, "JSON list of components, e.g. [[\"x1\"],[\"x2\",\"x3\"]]");
    cmd->add_option("--confounding", confounding, "JSON list of booleans, one per component");
  }

  json load() const {
    json cfg = config.empty() ? json::object() : read_json_file(config);
    if (!cfg.is_object()) throw ParseError("config: expected a JSON object");
    const fs::path base = config.empty() ? fs::current_path() : fs::absolute(config).parent_path();
    for (const char* key : {"train", "explain", "model", "schema", "output_dir", "data", "xreg_data"})
      if (cfg.contains(key) && cfg.at(key).is_string()) cfg[key] = resolve(base, cfg.at(key).get<std::string>());
    if (!train.empty()) cfg["train"] = train;
    if (!explain.empty()) cfg["explain"] = explain;
    if (!model.empty()) cfg["model"] = model;
    if (!schema.empty()) cfg["schema"] = schema;
    if (!out.empty()) cfg["output_dir"] = out;
    if (!response.empty()) cfg["response"] = response;
    if (!approach.empty()) cfg["approach"] = approach;
    if (!phi0.empty()) {
      double x;
      if (parse_double(phi0, x)) cfg["phi0"] = x;
      else cfg["phi0"] = phi0;
    }
    if (max_n_coalitions) cfg["max_n_coalitions"] = *max_n_coalitions;
    if (iterative) cfg["iterative"] = *iterative;
    if (tol) cfg["convergence_tol"] = *tol;
    if (max_iterations) cfg["max_iterations"] = *max_iterations;
    if (n_mc_samples) cfg["n_mc_samples"] = *n_mc_samples;
    if (n_boot) cfg["n_boot"] = *n_boot;
    if (seed) cfg["seed"] = *seed;
    if (asymmetric) cfg["asymmetric"] = *asymmetric;
    try {
      if (!ordering.empty()) cfg["causal_ordering"] = json::parse(ordering);
      if (!confounding.empty()) cfg["confounding"] = json::parse(confounding);
    } catch (const json::exception& e) {
      throw ParseError(std::string("causal flags must be JSON lists: ") + e.what());
    }
    if (workers) cfg["workers"] = *workers;
    if (const char* env = std::getenv("CONDSHAP_WORKERS")) {
      double w;
      if (!parse_double(env, w) || w < 1 || std::floor(w) != w)
        throw InvalidArgument("CONDSHAP_WORKERS must be a positive integer, got '" + std::string(env) + "'");
      cfg["workers"] = static_cast<int>(w);
    }
    if (quiet) cfg["verbose"] = json::array();
    else if (!verbose.empty()) cfg["verbose"] = verbose;
    if (log_json) cfg["log_json"] = true;
    return cfg;
  }
};

const std::set<std::string> kEngineKeys{"approach",
                                        "max_n_coalitions",
                                        "iterative",
                                        "convergence_tol",
                                        "initial_n_coalitions",
                                        "max_iterations",
                                        "n_boot",
                                        "paired",
                                        "reweighting",
                                        "semi_deterministic",
                                        "exact_boundary",
                                        "n_mc_samples",
                                        "seed",
                                        "groups",
                                        "asymmetric",
                                        "causal_ordering",
                                        "confounding",
                                        "empirical",
                                        "ctree",
                                        "categorical_smoothing",
                                        "independence_all_rows",
                                        "regression",
                                        "min_n_batches",
                                        "max_batch_size",
                                        "workers",
                                        "verbose",
                                        "log_json",
                                        "output_dir"};

std::set<std::string> with(std::set<std::string> keys, std::initializer_list<const char*> more) {
  for (const char* k : more) keys.insert(k);
  return keys;
}

GroupSpec groups_from_json(const json& j) {
  GroupSpec g;
  if (j.is_array()) {
    for (const auto& e : j) g.groups.push_back({e.at("name").get<std::string>(), e.at("features").get<std::vector<std::string>>()});
  } else {
    for (const auto& [name, feats] : j.items()) g.groups.push_back({name, feats.get<std::vector<std::string>>()});
  }
  return g;
}

/// Engine settings; phi0 is resolved by the caller.
ExplainConfig engine_config(const json& cfg) {
  ExplainConfig c;
  try {
    if (cfg.contains("approach")) c.approach = string_or_list(cfg.at("approach"));
    if (cfg.contains("max_n_coalitions")) c.max_n_coalitions = cfg.at("max_n_coalitions").get<std::size_t>();
    if (cfg.contains("iterative")) c.iterative = cfg.at("iterative").get<bool>();
    c.convergence_tol = cfg.value("convergence_tol", c.convergence_tol);
    if (cfg.contains("initial_n_coalitions")) c.initial_n_coalitions = cfg.at("initial_n_coalitions").get<std::size_t>();
    c.max_iterations = cfg.value("max_iterations", c.max_iterations);
    c.n_boot = cfg.value("n_boot", c.n_boot);
    c.paired = cfg.value("paired", c.paired);
    if (cfg.contains("reweighting")) {
      const auto r = cfg.at("reweighting").get<std::string>();
      if (r == "c_kernel") c.reweighting = Reweighting::c_kernel;
      else if (r == "none") c.reweighting = Reweighting::none;
      else throw ParseError("reweighting must be c_kernel or none");
    }
    c.semi_deterministic = cfg.value("semi_deterministic", c.semi_deterministic);
    c.exact_boundary = cfg.value("exact_boundary", c.exact_boundary);
    c.n_mc_samples = cfg.value("n_mc_samples", c.n_mc_samples);
    c.seed = cfg.value("seed", c.seed);
    if (cfg.contains("groups")) c.groups = groups_from_json(cfg.at("groups"));
    c.asymmetric = cfg.value("asymmetric", c.asymmetric);
    if (cfg.contains("causal_ordering")) {
      std::vector<std::vector<std::string>> ordering;
      for (const auto& comp : cfg.at("causal_ordering")) {
        std::vector<std::string> names;
        for (const auto& p : comp) names.push_back(p.is_string() ? p.get<std::string>() : std::to_string(p.get<int>()));
        ordering.push_back(std::move(names));
      }
      c.causal_ordering = std::move(ordering);
    }
    if (cfg.contains("confounding")) {
      const auto& cj = cfg.at("confounding");
      c.confounding = cj.is_boolean() ? std::vector<bool>{cj.get<bool>()} : cj.get<std::vector<bool>>();
    }
    if (cfg.contains("empirical")) {
      const auto& e = cfg.at("empirical");
      check_keys(e, {"sigma", "eta"}, "empirical");
      c.empirical.sigma = e.value("sigma", c.empirical.sigma);
      c.empirical.eta = e.value("eta", c.empirical.eta);
    }
    if (cfg.contains("ctree")) {
      const auto& t = cfg.at("ctree");
      check_keys(t, {"alpha", "minbucket", "minsplit", "n_permutations", "max_depth", "sample"}, "ctree");
      c.ctree.alpha = t.value("alpha", c.ctree.alpha);
      c.ctree.minbucket = t.value("minbucket", c.ctree.minbucket);
      c.ctree.minsplit = t.value("minsplit", c.ctree.minsplit);
      c.ctree.n_permutations = t.value("n_permutations", c.ctree.n_permutations);
      c.ctree.max_depth = t.value("max_depth", c.ctree.max_depth);
      c.ctree.sample = t.value("sample", c.ctree.sample);
    }
    c.categorical_smoothing = cfg.value("categorical_smoothing", c.categorical_smoothing);
    c.independence_all_rows = cfg.value("independence_all_rows", c.independence_all_rows);
    if (cfg.contains("regression")) {
      const auto& r = cfg.at("regression");
      check_keys(r, {"learner", "max_depth", "min_leaf", "surrogate_n_comb"}, "regression");
      c.regression_learner = r.value("learner", c.regression_learner);
      c.cart.max_depth = r.value("max_depth", c.cart.max_depth);
      c.cart.min_leaf = r.value("min_leaf", c.cart.min_leaf);
      c.surrogate_n_comb = r.value("surrogate_n_comb", c.surrogate_n_comb);
    }
    c.min_n_batches = cfg.value("min_n_batches", c.min_n_batches);
    c.max_batch_size = cfg.value("max_batch_size", c.max_batch_size);
    c.workers = cfg.value("workers", c.workers);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (c.workers < 1) throw InvalidArgument("workers must be at least 1");
  return c;
}

ojson engine_json(const ExplainConfig& c) {
  ojson j;
  j["approach"] = c.approach;
  if (c.max_n_coalitions) j["max_n_coalitions"] = *c.max_n_coalitions;
  if (c.iterative) j["iterative"] = *c.iterative;
  j["convergence_tol"] = c.convergence_tol;
  if (c.initial_n_coalitions) j["initial_n_coalitions"] = *c.initial_n_coalitions;
  j["max_iterations"] = c.max_iterations;
  j["n_boot"] = c.n_boot;
  j["paired"] = c.paired;
  j["reweighting"] = c.reweighting == Reweighting::c_kernel ? "c_kernel" : "none";
  j["semi_deterministic"] = c.semi_deterministic;
  j["exact_boundary"] = c.exact_boundary;
  j["n_mc_samples"] = c.n_mc_samples;
  j["seed"] = c.seed;
  if (c.groups) {
    ojson g = ojson::array();
    for (const auto& [name, feats] : c.groups->groups) g.push_back({{"name", name}, {"features", feats}});
    j["groups"] = g;
  }
  j["asymmetric"] = c.asymmetric;
  if (c.causal_ordering) j["causal_ordering"] = *c.causal_ordering;
  if (c.confounding) j["confounding"] = *c.confounding;
  j["empirical"] = {{"sigma", c.empirical.sigma}, {"eta", c.empirical.eta}};
  j["ctree"] = {{"alpha", c.ctree.alpha},         {"minbucket", c.ctree.minbucket}, {"minsplit", c.ctree.minsplit},
                {"n_permutations", c.ctree.n_permutations}, {"max_depth", c.ctree.max_depth}, {"sample", c.ctree.sample}};
  j["categorical_smoothing"] = c.categorical_smoothing;
  j["independence_all_rows"] = c.independence_all_rows;
  j["regression"] = {{"learner", c.regression_learner},
                     {"max_depth", c.cart.max_depth},
                     {"min_leaf", c.cart.min_leaf},
                     {"surrogate_n_comb", c.surrogate_n_comb}};
  j["min_n_batches"] = c.min_n_batches;
  j["max_batch_size"] = c.max_batch_size;
  j["workers"] = c.workers;
  return j;
}

std::set<Verbosity> verbosity_of(const json& cfg) {
  std::set<Verbosity> out{Verbosity::basic};
  if (!cfg.contains("verbose")) return out;
  out.clear();
  for (const auto& v : string_or_list(cfg.at("verbose")))
    if (v != "none" && !v.empty()) out.insert(parse_verbosity(v));
  return out;
}

std::string output_dir(const json& cfg) {
  const std::string dir = cfg.value("output_dir", std::string("condshap_output"));
  fs::create_directories(dir);
  return dir;
}

std::string required_path(const json& cfg, const char* key) {
  if (!cfg.contains(key) || !cfg.at(key).is_string() || cfg.at(key).get<std::string>().empty())
    throw InvalidArgument(std::string("missing setting '") + key + "' (config file or --" + key + ")");
  return cfg.at(key).get<std::string>();
}

// ---------------------------------------------------------------------------
// Artifacts

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write '" + path.string() + "'");
  out << text;
}

/// Header plus rows of numbers; leading columns are integer ids.
void write_table(const fs::path& path, const std::vector<std::string>& header, const Matrix& m) {
  std::ostringstream os;
  for (std::size_t c = 0; c < header.size(); ++c) os << (c ? "," : "") << header[c];
  os << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? "," : "") << format_double(m(r, c));
    os << '\n';
  }
  write_text(path, os.str());
}

Matrix with_id(const Matrix& m) {
  Matrix out(m.rows(), m.cols() + 1);
  for (Eigen::Index r = 0; r < m.rows(); ++r) out(r, 0) = static_cast<double>(r + 1);
  out.rightCols(m.cols()) = m;
  return out;
}

ojson real(double x) { return std::isfinite(x) ? ojson(x) : ojson(std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf")); }

ojson matrix_rows(const Matrix& m) {
  ojson rows = ojson::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    ojson row = ojson::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(real(m(r, c)));
    rows.push_back(row);
  }
  return rows;
}

ojson msev_json(const Explanation& e) {
  if (!e.msev) return ojson(nullptr);
  ojson j;
  j["msev"] = real(e.msev->score);
  j["msev_sd"] = real(e.msev->sd);
  j["n_coalitions"] = e.msev->coalitions.size();
  j["per_explicand"] = std::vector<double>(e.msev->per_explicand.data(), e.msev->per_explicand.data() + e.msev->per_explicand.size());
  return j;
}

ojson trace_json(const Explanation& e) {
  ojson t = ojson::array();
  for (const auto& it : e.trace)
    t.push_back({{"iteration", it.iteration},
                 {"n_coalitions", it.n_coalitions},
                 {"criterion", real(it.criterion)},
                 {"converged", it.converged},
                 {"phi", matrix_rows(it.phi)},
                 {"sd", matrix_rows(it.sd)}});
  return t;
}

ojson timing_json(const Explanation& e, double wall) {
  ojson t;
  for (const auto& [name, secs] : e.timings) t[name] = secs;
  t["wall_clock"] = wall;
  return t;
}

void print_summary(std::ostream& os, const Explanation& e, const std::vector<std::string>& id_cols, const Matrix& ids) {
  os << "Shapley values (" << e.framework << ", approach " << e.approach[0];
  for (std::size_t i = 1; i < e.approach.size(); ++i) os << "/" << e.approach[i];
  os << ", " << e.coalitions.size() << " coalitions";
  if (e.iterative) os << ", " << e.trace.size() << " iterations, " << (e.converged ? "converged" : "not converged");
  os << ")\n";
  const int w = 12;
  for (const auto& c : id_cols) os << std::setw(w) << c;
  for (const auto& n : e.player_names) os << std::setw(w) << n;
  os << '\n';
  const Eigen::Index shown = std::min<Eigen::Index>(e.phi.rows(), 20);
  for (Eigen::Index r = 0; r < shown; ++r) {
    for (Eigen::Index c = 0; c < ids.cols(); ++c) os << std::setw(w) << ids(r, c);
    for (Eigen::Index c = 0; c < e.phi.cols(); ++c) {
      std::ostringstream cell;
      cell << std::setprecision(5) << e.phi(r, c);
      os << std::setw(w) << cell.str();
    }
    os << '\n';
  }
  if (e.phi.rows() > shown) os << "... " << e.phi.rows() - shown << " more rows in shapley_values_est.csv\n";
  if (e.msev) os << "MSEv: " << format_double(e.msev->score) << " (sd " << format_double(e.msev->sd) << ")\n";
}

// ---------------------------------------------------------------------------
// Tabular tasks

struct TabularTask {
  std::unique_ptr<Predictor> model;
  Dataset train, explain;
  std::optional<Vector> response;
  ExplainConfig config;
  ojson effective;
};

Dataset select_features(const Dataset& d, const FeatureSpec& spec, const std::string& what) {
  Matrix m(d.n_rows(), static_cast<Eigen::Index>(spec.size()));
  for (std::size_t j = 0; j < spec.size(); ++j) {
    const auto idx = d.schema.index_of(spec.columns[j].name);
    if (!idx) throw ValidationError(what + " has no column '" + spec.columns[j].name + "' required by the model");
    if (d.schema.columns[*idx].kind != spec.columns[j].kind)
      throw ValidationError(what + ": column '" + spec.columns[j].name + "' is " + to_string(d.schema.columns[*idx].kind) +
                            ", the model expects " + to_string(spec.columns[j].kind));
    m.col(static_cast<Eigen::Index>(j)) = d.values.col(static_cast<Eigen::Index>(*idx));
  }
  return Dataset{spec, m};
}

TabularTask load_tabular(const json& cfg) {
  TabularTask t;
  t.model = load_model(required_path(cfg, "model"));
  const FeatureSpec& spec = t.model->feature_spec();
  SchemaHints hints{spec.columns, false};
  if (cfg.contains("schema")) hints = load_schema_sidecar(cfg.at("schema").get<std::string>());
  const Dataset train_raw = load_csv(required_path(cfg, "train"), hints);
  const Dataset explain_raw = load_csv(required_path(cfg, "explain"), hints);
  t.train = select_features(train_raw, spec, "training data");
  t.explain = select_features(explain_raw, spec, "explain data");
  if (cfg.contains("response")) {
    const std::string name = cfg.at("response").get<std::string>();
    const auto idx = train_raw.schema.index_of(name);
    if (!idx) throw ValidationError("training data has no response column '" + name + "'");
    t.response = train_raw.values.col(static_cast<Eigen::Index>(*idx));
  }
  t.config = engine_config(cfg);

  const json phi0 = cfg.value("phi0", json("mean_prediction"));
  std::string source = "value";
  if (phi0.is_number()) {
    t.config.phi0 = phi0.get<double>();
  } else if (phi0 == "mean_prediction") {
    t.config.phi0 = predict_batch(*t.model, t.train).mean();
    source = "mean_prediction";
  } else if (phi0 == "mean_response") {
    if (!t.response) throw InvalidArgument("phi0 = mean_response needs a 'response' column");
    t.config.phi0 = phi0_from_response({t.response->data(), static_cast<std::size_t>(t.response->size())});
    source = "mean_response";
  } else {
    throw InvalidArgument("phi0 must be a number, mean_prediction or mean_response");
  }

  t.effective["command"] = "explain";
  t.effective["train"] = required_path(cfg, "train");
  t.effective["explain"] = required_path(cfg, "explain");
  t.effective["model"] = required_path(cfg, "model");
  if (cfg.contains("schema")) t.effective["schema"] = cfg.at("schema");
  if (cfg.contains("response")) t.effective["response"] = cfg.at("response");
  t.effective["phi0"] = t.config.phi0;
  t.effective["phi0_source"] = source;
  const ojson engine = engine_json(t.config);
  for (const auto& [k, v] : engine.items()) t.effective[k] = v;
  return t;
}

void write_explanation(const fs::path& dir, const Explanation& e, const ojson& effective, double wall) {
  std::vector<std::string> header{"explain_id"};
  header.insert(header.end(), e.player_names.begin(), e.player_names.end());
  write_table(dir / "shapley_values_est.csv", header, with_id(e.phi));
  write_table(dir / "shapley_values_sd.csv", header, with_id(e.phi_sd));
  write_table(dir / "pred_explain.csv", {"explain_id", "pred"}, with_id(Matrix(e.predictions)));
  write_text(dir / "msev.json", msev_json(e).dump(2) + "\n");
  write_text(dir / "convergence_trace.json", trace_json(e).dump(2) + "\n");
  write_text(dir / "timing.json", timing_json(e, wall).dump(2) + "\n");
  write_text(dir / "effective_config.json", effective.dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_explain(const CommonFlags& flags, const std::string& continue_from) {
  const auto t0 = std::chrono::steady_clock::now();
  const json cfg = flags.load();
  check_keys(cfg, with(kEngineKeys, {"train", "explain", "model", "schema", "response", "phi0"}), "config");
  TabularTask t = load_tabular(cfg);
  const fs::path dir = output_dir(cfg);
  Reporter reporter(verbosity_of(cfg), std::cerr, cfg.value("log_json", false));
  t.config.reporter = &reporter;
  t.config.saving_path = (dir / "state.json").string();
  write_csv((dir / "x_explain.csv").string(), t.explain);
  Explanation e = continue_from.empty() ? explain(*t.model, t.train, t.explain, t.config)
                                        : continue_explain(continue_from, *t.model, t.train, t.explain, t.config);
  t.effective["state_file"] = t.config.saving_path;
  if (!continue_from.empty()) t.effective["continued_from"] = continue_from;
  write_explanation(dir, e, t.effective, seconds_since(t0));
  Matrix ids(e.phi.rows(), 1);
  for (Eigen::Index r = 0; r < ids.rows(); ++r) ids(r, 0) = static_cast<double>(r + 1);
  print_summary(std::cout, e, {"explain_id"}, ids);
  return 0;
}

std::string approach_label(const std::vector<std::string>& a) {
  std::string s;
  for (const auto& x : a) s += (s.empty() ? "" : "+") + x;
  return s;
}

int cmd_compare(const CommonFlags& flags, const std::vector<std::string>& approaches, const std::string& svg) {
  const json cfg = flags.load();
  check_keys(cfg, with(kEngineKeys, {"train", "explain", "model", "schema", "response", "phi0", "approaches"}), "config");
  std::vector<std::vector<std::string>> runs;
  if (!approaches.empty()) {
    for (const auto& a : approaches) {
      std::vector<std::string> parts;
      std::stringstream ss(a);
      for (std::string p; std::getline(ss, p, '+');) parts.push_back(p);
      runs.push_back(parts);
    }
  } else if (cfg.contains("approaches")) {
    for (const auto& a : cfg.at("approaches")) runs.push_back(string_or_list(a));
  }
  if (runs.size() < 2)
    throw InvalidArgument("compare needs at least two approaches (--approaches a,b or \"approaches\" in the config)");

  TabularTask t = load_tabular(cfg);
  const fs::path dir = output_dir(cfg);
  Reporter reporter(verbosity_of(cfg), std::cerr, cfg.value("log_json", false));
  std::vector<NamedMsev> results;
  for (const auto& a : runs) {
    ExplainConfig c = t.config;
    c.approach = a;
    c.reporter = &reporter;
    const Explanation e = explain(*t.model, t.train, t.explain, c);
    if (!e.msev) throw ValidationError("approach " + approach_label(a) + " produced no MSEv (no interior coalitions)");
    results.push_back({approach_label(a), *e.msev});
  }
  const Comparison cmp = compare_approaches(results);

  std::ostringstream csv;
  csv << "rank,approach,msev,msev_sd\n";
  ojson j;
  j["ranking"] = ojson::array();
  std::vector<PlotBar> bars;
  for (std::size_t r = 0; r < cmp.ranked.size(); ++r) {
    const auto& n = cmp.ranked[r];
    csv << r + 1 << "," << n.name << "," << format_double(n.result.score) << "," << format_double(n.result.sd) << "\n";
    j["ranking"].push_back({{"rank", r + 1}, {"approach", n.name}, {"msev", n.result.score}, {"msev_sd", n.result.sd}});
    bars.push_back({n.name, 0.0, n.result.score});
  }
  j["warnings"] = cmp.warnings;
  write_text(dir / "msev_comparison.csv", csv.str());
  write_text(dir / "msev_comparison.json", j.dump(2) + "\n");
  ojson effective = t.effective;
  effective["command"] = "compare";
  effective["approaches"] = ojson::array();
  for (const auto& a : runs) effective["approaches"].push_back(a);
  write_text(dir / "effective_config.json", effective.dump(2) + "\n");
  if (!svg.empty()) write_text(svg, render_bars_svg(bars, "MSEv by approach"));

  std::cout << "MSEv ranking\n";
  for (std::size_t r = 0; r < cmp.ranked.size(); ++r)
    std::cout << "  " << r + 1 << ". " << std::left << std::setw(30) << cmp.ranked[r].name << std::right
              << format_double(cmp.ranked[r].result.score) << " (sd " << format_double(cmp.ranked[r].result.sd) << ")\n";
  for (const auto& w : cmp.warnings) std::cout << "warning: " << w << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Forecasts

std::vector<double> column_of(const Dataset& d, const std::string& name, const std::string& file) {
  const auto idx = d.schema.index_of(name);
  if (!idx) throw ValidationError(file + " has no column '" + name + "'");
  const Vector c = d.values.col(static_cast<Eigen::Index>(*idx));
  return {c.data(), c.data() + c.size()};
}

int cmd_forecast(const CommonFlags& flags) {
  const auto t0 = std::chrono::steady_clock::now();
  json cfg = flags.load();
  check_keys(cfg,
             with(kEngineKeys, {"data", "xreg_data", "y", "xreg", "lags", "horizon", "explain_idx", "train_idx",
                                "group_lags", "phi0", "model"}),
             "config");
  const std::string data_path = required_path(cfg, "data");
  TimeSeriesData data;
  const Dataset raw = load_csv(data_path);
  LagSpec lags;
  ForecastTask task;
  try {
    for (const auto& n : string_or_list(cfg.at("y"))) data.y.push_back({n, column_of(raw, n, data_path)});
    if (cfg.contains("xreg")) {
      const std::string xpath = cfg.value("xreg_data", data_path);
      const Dataset xraw = xpath == data_path ? raw : load_csv(xpath);
      for (const auto& n : string_or_list(cfg.at("xreg"))) data.xreg.push_back({n, column_of(xraw, n, xpath)});
    }
    const auto& lj = cfg.at("lags");
    lags.y = lj.at("y").get<std::vector<int>>();
    if (lj.contains("xreg")) lags.xreg = lj.at("xreg").get<std::vector<int>>();
    lags.horizon = cfg.value("horizon", 1);
    task.lags = lags;
    task.explain_idx = cfg.at("explain_idx").get<std::vector<int>>();
    if (cfg.contains("train_idx")) task.train_idx = cfg.at("train_idx").get<std::vector<int>>();
    task.group_lags = cfg.value("group_lags", true);
  } catch (const json::exception& e) {
    throw ParseError(std::string("forecast config: ") + e.what());
  }
  if (task.explain_idx.empty()) throw InvalidArgument("explain_idx is empty");
  check_lags(data, lags);

  // model: {"type":"arx","n_fit":N} or an external model description
  json mj = cfg.value("model", json{{"type", "arx"}});
  if (mj.is_string()) mj = read_json_file(mj.get<std::string>());
  std::unique_ptr<ForecastPredictor> model;
  const int first = *std::min_element(task.explain_idx.begin(), task.explain_idx.end());
  int n_fit = first - 1;
  const std::string type = mj.value("type", std::string("arx"));
  if (type == "arx") {
    n_fit = mj.value("n_fit", n_fit);
    model = std::make_unique<ArxPredictor>(data, lags, n_fit);
  } else if (type == "external") {
    const Dataset probe = build_lagged_design(data, {task.explain_idx.front()}, lags);
    model = std::make_unique<ExternalForecastPredictor>(probe.schema, external_spec_from_json(mj), lags.horizon);
  } else {
    throw InvalidArgument("forecast model type must be arx or external, got '" + type + "'");
  }

  const json phi0 = cfg.value("phi0", json("mean_response"));
  if (phi0.is_array()) {
    task.phi0 = phi0.get<std::vector<double>>();
  } else if (phi0.is_number()) {
    task.phi0.assign(static_cast<std::size_t>(lags.horizon), phi0.get<double>());
  } else if (phi0 == "mean_response") {
    // mean of the first endogenous series over the observations before the first explained index
    const auto& y = data.y.front().second;
    const int n = std::min<int>(first - 1, static_cast<int>(y.size()));
    if (n < 1) throw InvalidArgument("no observations before the first explained index for phi0 = mean_response");
    task.phi0.assign(static_cast<std::size_t>(lags.horizon), phi0_from_response({y.data(), static_cast<std::size_t>(n)}));
  } else {
    throw InvalidArgument("forecast phi0 must be a number, a list (one per horizon) or mean_response");
  }

  ExplainConfig c = engine_config(cfg);
  const fs::path dir = output_dir(cfg);
  Reporter reporter(verbosity_of(cfg), std::cerr, cfg.value("log_json", false));
  c.reporter = &reporter;
  c.saving_path = (dir / "state.json").string();
  const ForecastExplanation fe = explain_forecast(*model, data, task, c);

  std::vector<std::string> header{"explain_idx", "horizon"};
  header.insert(header.end(), fe.player_names.begin(), fe.player_names.end());
  const Matrix table = fe.table();
  write_table(dir / "shapley_values_est.csv", header, table);
  Matrix sd = table;
  Matrix pred(table.rows(), 3);
  ojson msev = ojson::array(), trace = ojson::array(), timing = ojson::array();
  const Eigen::Index n = static_cast<Eigen::Index>(fe.explain_idx.size());
  for (std::size_t q = 0; q < fe.per_horizon.size(); ++q) {
    const auto& e = fe.per_horizon[q];
    const Eigen::Index r0 = static_cast<Eigen::Index>(q) * n;
    sd.block(r0, 2, n, e.phi_sd.cols()) = e.phi_sd;
    pred.block(r0, 0, n, 2) = table.block(r0, 0, n, 2);
    pred.block(r0, 2, n, 1) = e.predictions;
    ojson m = msev_json(e);
    if (!m.is_null()) m["horizon"] = q + 1;
    msev.push_back(m);
    trace.push_back({{"horizon", q + 1}, {"trace", trace_json(e)}});
    ojson tj = timing_json(e, 0.0);
    tj.erase("wall_clock");
    timing.push_back({{"horizon", q + 1}, {"timings", tj}});
  }
  write_table(dir / "shapley_values_sd.csv", header, sd);
  write_table(dir / "pred_explain.csv", {"explain_idx", "horizon", "pred"}, pred);
  write_text(dir / "msev.json", msev.dump(2) + "\n");
  write_text(dir / "convergence_trace.json", trace.dump(2) + "\n");
  write_text(dir / "timing.json", ojson{{"per_horizon", timing}, {"wall_clock", seconds_since(t0)}}.dump(2) + "\n");

  ojson eff;
  eff["command"] = "explain-forecast";
  eff["data"] = data_path;
  if (cfg.contains("xreg_data")) eff["xreg_data"] = cfg.at("xreg_data");
  eff["y"] = series_names(data.y);
  eff["xreg"] = series_names(data.xreg);
  eff["lags"] = {{"y", lags.y}, {"xreg", lags.xreg}};
  eff["horizon"] = lags.horizon;
  eff["explain_idx"] = fe.explain_idx;
  eff["train_idx"] = fe.train_idx;
  eff["group_lags"] = task.group_lags;
  eff["phi0"] = task.phi0;
  eff["model"] = type == "arx" ? ojson{{"type", "arx"}, {"n_fit", n_fit}} : ojson::parse(mj.dump());
  const ojson engine = engine_json(c);
  for (const auto& [k, v] : engine.items()) eff[k] = v;
  write_text(dir / "effective_config.json", eff.dump(2) + "\n");

  std::cout << "Forecast Shapley values (" << fe.per_horizon.size() << " horizons, " << n << " explained indices)\n";
  const int w = 12;
  for (const auto& h : header) std::cout << std::setw(w) << h;
  std::cout << '\n';
  for (Eigen::Index r = 0; r < std::min<Eigen::Index>(table.rows(), 30); ++r) {
    for (Eigen::Index col = 0; col < table.cols(); ++col) {
      std::ostringstream cell;
      cell << std::setprecision(5) << table(r, col);
      std::cout << std::setw(w) << cell.str();
    }
    std::cout << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Plots from explanation artifacts

int cmd_plot(const std::string& from, const std::string& kind_name, int row, const std::string& feature, int top_k,
             const std::string& out) {
  const PlotKind kind = parse_plot_kind(kind_name);
  const fs::path dir(from);
  const Dataset est = load_csv((dir / "shapley_values_est.csv").string());
  const auto names = est.schema.names();
  const auto none = std::find(names.begin(), names.end(), "none");
  if (none == names.end()) throw ValidationError("shapley_values_est.csv has no 'none' column");
  const Eigen::Index c0 = none - names.begin();
  const std::vector<std::string> players(none + 1, names.end());
  std::string svg;
  if (kind == PlotKind::scatter) {
    if (feature.empty()) throw InvalidArgument("scatter plots need --feature");
    const auto p = std::find(players.begin(), players.end(), feature);
    if (p == players.end()) throw InvalidArgument("no Shapley values for feature '" + feature + "'");
    const Dataset x = load_csv((dir / "x_explain.csv").string());
    const auto xi = x.schema.index_of(feature);
    if (!xi) throw ValidationError("x_explain.csv has no column '" + feature + "' (grouped or forecast runs cannot be scattered)");
    if (x.n_rows() != est.n_rows()) throw ValidationError("x_explain.csv and shapley_values_est.csv differ in length");
    const Vector fx = x.values.col(static_cast<Eigen::Index>(*xi));
    const Vector phi = est.values.col(c0 + 1 + (p - players.begin()));
    svg = render_scatter_svg(scatter_layout({fx.data(), fx.data() + fx.size()}, {phi.data(), phi.data() + phi.size()}),
                             feature, "Shapley values of " + feature);
  } else {
    if (row < 1 || row > est.n_rows())
      throw InvalidArgument("--row must be between 1 and " + std::to_string(est.n_rows()));
    const RowVector r = est.values.row(row - 1);
    std::vector<double> phi(r.data() + c0 + 1, r.data() + r.size());
    const std::string title = "explicand " + std::to_string(row);
    svg = kind == PlotKind::bar ? render_bars_svg(bar_layout(players, phi, top_k), title)
                                : render_bars_svg(waterfall_layout(players, r[c0], phi), title);
  }
  const std::string path = out.empty() ? (dir / (kind_name + ".svg")).string() : out;
  write_text(path, svg);
  std::cout << "wrote " << path << "\n";
  return 0;
}

std::string error_kind(const Error& e) {
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid_argument";
  if (dynamic_cast<const ParseError*>(&e)) return "parse_error";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation_error";
  if (dynamic_cast<const SingularSystemError*>(&e)) return "singular_system";
  if (dynamic_cast<const ModelError*>(&e)) return "model_error";
  if (dynamic_cast<const EstimationError*>(&e)) return "estimation_error";
  if (dynamic_cast<const StateError*>(&e)) return "state_error";
  return "error";
}

void report_error(bool as_json, const std::string& kind, const std::string& message) {
  if (as_json) std::cerr << json{{"event", "error"}, {"kind", kind}, {"message", message}}.dump() << std::endl;
  else std::cerr << "error (" << kind << "): " << message << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional Shapley value explanations"};
  app.require_subcommand(1);

  CommonFlags explain_flags, forecast_flags, compare_flags;
  std::string continue_from;
  auto* cmd_e = app.add_subcommand("explain", "explain predictions of a tabular model");
  explain_flags.add_to(cmd_e);
  explain_flags.add_data(cmd_e);
  cmd_e->add_option("--continue-from", continue_from, "resume from a state file");

  auto* cmd_f = app.add_subcommand("explain-forecast", "explain forecasts of a time series model");
  forecast_flags.add_to(cmd_f);

  std::vector<std::string> approaches;
  std::string compare_svg;
  auto* cmd_c = app.add_subcommand("compare", "rank approaches by MSEv on shared coalitions");
  compare_flags.add_to(cmd_c);
  compare_flags.add_data(cmd_c);
  cmd_c->add_option("--approaches", approaches, "approaches to compare (comma separated; a+b+c for combined)")->delimiter(',');
  cmd_c->add_option("--svg", compare_svg, "write an MSEv bar chart");

  std::string plot_from, plot_kind = "bar", plot_feature, plot_out;
  int plot_row = 1, plot_top_k = 0;
  auto* cmd_p = app.add_subcommand("plot", "SVG plot from explain artifacts");
  cmd_p->add_option("--from", plot_from, "output directory of an explain run")->required();
  cmd_p->add_option("--kind", plot_kind, "bar, waterfall or scatter");
  cmd_p->add_option("--row", plot_row, "explicand (1-based) for bar and waterfall plots");
  cmd_p->add_option("--feature", plot_feature, "feature for scatter plots");
  cmd_p->add_option("--top-k", plot_top_k, "bar plot: keep the k largest |phi|, sum the rest");
  cmd_p->add_option("-o,--output", plot_out, "SVG file (default <from>/<kind>.svg)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const bool as_json = explain_flags.log_json || forecast_flags.log_json || compare_flags.log_json;
  try {
    if (cmd_e->parsed()) return cmd_explain(explain_flags, continue_from);
    if (cmd_f->parsed()) return cmd_forecast(forecast_flags);
    if (cmd_c->parsed()) return cmd_compare(compare_flags, approaches, compare_svg);
    if (cmd_p->parsed()) return cmd_plot(plot_from, plot_kind, plot_row, plot_feature, plot_top_k, plot_out);
  } catch (const Error& e) {
    report_error(as_json, error_kind(e), e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error(as_json, "internal", e.what());
    return 2;
  }
  return 0;
}
