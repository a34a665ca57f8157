// Console progress reporting. One Reporter owns the stream; calls from
// worker threads are serialized.

#pragma once

#include <cmath>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condshap/common.hpp"

namespace condshap {

enum class Verbosity { basic, progress, convergence, shapley, vS_details };

inline Verbosity parse_verbosity(const std::string& s) {
  if (s == "basic") return Verbosity::basic;
  if (s == "progress") return Verbosity::progress;
  if (s == "convergence") return Verbosity::convergence;
  if (s == "shapley") return Verbosity::shapley;
  if (s == "vS_details") return Verbosity::vS_details;
  throw InvalidArgument("unknown verbosity '" + s + "' (basic, progress, convergence, shapley, vS_details)");
}

inline std::string to_string(Verbosity v) {
  switch (v) {
    case Verbosity::basic: return "basic";
    case Verbosity::progress: return "progress";
    case Verbosity::convergence: return "convergence";
    case Verbosity::shapley: return "shapley";
    case Verbosity::vS_details: return "vS_details";
  }
  return "?";
}

class Reporter {
 public:
  Reporter() = default;
  Reporter(std::set<Verbosity> levels, std::ostream& out, bool json = false)
      : levels_(std::move(levels)), out_(&out), json_(json) {}

  bool enabled(Verbosity v) const { return out_ && levels_.count(v) > 0; }

  /// Free-form message under a verbosity level.
  void message(Verbosity v, const std::string& event, const std::string& text, nlohmann::json fields = {}) {
    if (!enabled(v)) return;
    std::lock_guard<std::mutex> lock(mutex_);
    if (json_) {
      fields["event"] = event;
      fields["level"] = to_string(v);
      fields["message"] = text;
      *out_ << fields.dump() << '\n';
    } else {
      *out_ << text << '\n';
    }
    out_->flush();
  }

  void phase(const std::string& text) { message(Verbosity::basic, "phase", text); }

  void batch_done(int iteration, int done, int total) {
    message(Verbosity::progress, "batch",
            "  batch " + std::to_string(done) + "/" + std::to_string(total) + " (iteration " + std::to_string(iteration) + ")",
            {{"iteration", iteration}, {"done", done}, {"total", total}});
  }

  void iteration(int iteration, std::size_t n_coal, double criterion, bool converged) {
    message(Verbosity::convergence, "iteration",
            "iteration " + std::to_string(iteration) + ": n_coalitions = " + std::to_string(n_coal) +
                ", convergence criterion = " + format_double(criterion) + (converged ? " (converged)" : ""),
            {{"iteration", iteration}, {"n_coalitions", n_coal},
             {"criterion", std::isfinite(criterion) ? nlohmann::json(criterion) : nlohmann::json("inf")},
             {"converged", converged}});
  }

  void shapley(int iteration, const std::vector<std::string>& names, const Matrix& phi) {
    if (!enabled(Verbosity::shapley)) return;
    std::ostringstream os;
    os << "  intermediate Shapley values (iteration " << iteration << ")\n";
    for (Eigen::Index i = 0; i < phi.rows(); ++i) {
      os << "   ";
      for (Eigen::Index j = 0; j < phi.cols(); ++j)
        os << ' ' << (j < static_cast<Eigen::Index>(names.size()) ? names[static_cast<std::size_t>(j)] + "=" : "")
           << format_double(phi(i, j));
      if (i + 1 < phi.rows()) os << '\n';
    }
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < phi.rows(); ++i) {
      std::vector<double> r;
      for (Eigen::Index j = 0; j < phi.cols(); ++j) r.push_back(phi(i, j));
      rows.push_back(r);
    }
    message(Verbosity::shapley, "shapley", os.str(), {{"iteration", iteration}, {"phi", rows}});
  }

  void vs_detail(const std::string& text, nlohmann::json fields = {}) {
    message(Verbosity::vS_details, "vS", text, std::move(fields));
  }

 private:
  std::set<Verbosity> levels_;
  std::ostream* out_ = nullptr;
  bool json_ = false;
  std::mutex mutex_;
};

}  // namespace condshap
