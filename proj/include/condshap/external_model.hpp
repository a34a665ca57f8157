// Subprocess prediction protocol and the model-file loader.
//
// The parent writes
//     CONDSHAP/1 <M> <comma-joined feature names>[ horizon=<h>]
// followed by one CSV row per observation (categorical cells as level
// strings) and a final line `END`. The child answers with one line per row
// (a single float, or h comma-separated floats when a horizon was announced)
// and a final `END`.

#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condshap/common.hpp"
#include "condshap/data.hpp"
#include "condshap/model.hpp"

namespace condshap {

struct ExternalModelSpec {
  std::vector<std::string> command;  // argv; command[0] resolved via PATH
  double timeout_seconds = 60.0;
};

namespace detail {

struct ChildResult {
  int exit_code = -1;
  std::string out;
  std::string err;
  bool timed_out = false;
};

inline void close_fd(int& fd) {
  if (fd >= 0) ::close(fd);
  fd = -1;
}

/// Runs argv, feeds `input` to stdin and collects stdout/stderr, all
/// multiplexed with poll() so neither side can block on a full pipe.
inline ChildResult run_child(const std::vector<std::string>& argv, const std::string& input, double timeout_s) {
  if (argv.empty()) throw ModelError("external model: empty command");
  int in_pipe[2], out_pipe[2], err_pipe[2];
  if (::pipe(in_pipe) || ::pipe(out_pipe) || ::pipe(err_pipe))
    throw ModelError(std::string("external model: pipe failed: ") + std::strerror(errno));

  const pid_t pid = ::fork();
  if (pid < 0) throw ModelError(std::string("external model: fork failed: ") + std::strerror(errno));
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::dup2(err_pipe[1], STDERR_FILENO);
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) ::close(fd);
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    const char msg[] = "external model: exec failed\n";
    [[maybe_unused]] auto w = ::write(STDERR_FILENO, msg, sizeof(msg) - 1);
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  ::close(err_pipe[1]);
  int to_child = in_pipe[1], from_child = out_pipe[0], err_child = err_pipe[0];
  ::fcntl(to_child, F_SETFL, O_NONBLOCK);
  ::signal(SIGPIPE, SIG_IGN);

  ChildResult res;
  std::size_t written = 0;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  char buf[65536];
  while (from_child >= 0 || err_child >= 0) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      res.timed_out = true;
      ::kill(pid, SIGKILL);
      break;
    }
    std::vector<pollfd> fds;
    if (to_child >= 0) fds.push_back({to_child, POLLOUT, 0});
    if (from_child >= 0) fds.push_back({from_child, POLLIN, 0});
    if (err_child >= 0) fds.push_back({err_child, POLLIN, 0});
    const int rc = ::poll(fds.data(), fds.size(), static_cast<int>(std::min<long long>(left.count(), 1000)));
    if (rc < 0 && errno != EINTR) break;
    for (const auto& p : fds) {
      if (!p.revents) continue;
      if (p.fd == to_child) {
        if (p.revents & (POLLERR | POLLHUP)) {
          close_fd(to_child);
          continue;
        }
        const ssize_t n = ::write(to_child, input.data() + written, input.size() - written);
        if (n > 0) written += static_cast<std::size_t>(n);
        if (n < 0 && errno != EAGAIN) close_fd(to_child);
        if (written == input.size()) close_fd(to_child);
      } else {
        const ssize_t n = ::read(p.fd, buf, sizeof(buf));
        if (n > 0) {
          (p.fd == from_child ? res.out : res.err).append(buf, static_cast<std::size_t>(n));
        } else if (n == 0 || errno != EAGAIN) {
          if (p.fd == from_child) close_fd(from_child);
          else close_fd(err_child);
        }
      }
    }
  }
  close_fd(to_child);
  close_fd(from_child);
  close_fd(err_child);
  int status = 0;
  ::waitpid(pid, &status, 0);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
  return res;
}

inline std::string protocol_request(const Dataset& rows, int horizon) {
  std::ostringstream os;
  os << "CONDSHAP/1 " << rows.n_cols() << ' ';
  const auto names = rows.schema.names();
  for (std::size_t c = 0; c < names.size(); ++c) os << (c ? "," : "") << names[c];
  if (horizon > 0) os << " horizon=" << horizon;
  os << '\n';
  for (Eigen::Index r = 0; r < rows.n_rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.n_cols(); ++c) os << (c ? "," : "") << quote_csv(rows.cell_text(r, c));
    os << '\n';
  }
  os << "END\n";
  return os.str();
}

/// Parses the child's reply into rows x width values.
inline Matrix protocol_reply(const std::string& text, Eigen::Index n_rows, int width) {
  std::istringstream is(text);
  std::string line;
  std::vector<std::vector<double>> vals;
  bool ended = false;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "END") {
      ended = true;
      break;
    }
    if (trim(line).empty()) continue;
    std::vector<double> row;
    for (const auto& cell : split_csv_line(line, line_no)) {
      double x;
      if (!parse_double(cell, x)) throw ModelError("external model: malformed reply line " + std::to_string(line_no) + ": '" + line + "'");
      row.push_back(x);
    }
    if (static_cast<int>(row.size()) != width)
      throw ModelError("external model: reply line " + std::to_string(line_no) + " has " + std::to_string(row.size()) +
                       " values, expected " + std::to_string(width));
    vals.push_back(std::move(row));
  }
  if (!ended) throw ModelError("external model: reply not terminated by END");
  if (static_cast<Eigen::Index>(vals.size()) != n_rows)
    throw ModelError("external model: " + std::to_string(vals.size()) + " predictions for " + std::to_string(n_rows) + " rows");
  Matrix out(n_rows, width);
  for (Eigen::Index r = 0; r < n_rows; ++r)
    for (int c = 0; c < width; ++c) out(r, c) = vals[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  return out;
}

}  // namespace detail

/// Runs the child for one batch; `horizon` 0 means the plain protocol.
inline Matrix external_predict(const ExternalModelSpec& spec, const Dataset& rows, int horizon = 0) {
  const auto res = detail::run_child(spec.command, detail::protocol_request(rows, horizon), spec.timeout_seconds);
  if (res.timed_out) throw ModelError("external model timed out after " + format_double(spec.timeout_seconds) + " s");
  if (res.exit_code != 0)
    throw ModelError("external model exited with status " + std::to_string(res.exit_code) +
                     (res.err.empty() ? std::string() : ": " + res.err));
  return detail::protocol_reply(res.out, rows.n_rows(), horizon > 0 ? horizon : 1);
}

/// Spawns one child per prediction batch.
class ExternalPredictor : public Predictor {
 public:
  ExternalPredictor(FeatureSpec spec, ExternalModelSpec cmd) : spec_(std::move(spec)), cmd_(std::move(cmd)) {}

  const FeatureSpec& feature_spec() const override { return spec_; }

  Vector predict(const Matrix& rows) const override {
    return external_predict(cmd_, Dataset{spec_, rows}).col(0);
  }

 private:
  FeatureSpec spec_;
  ExternalModelSpec cmd_;
};

inline ExternalModelSpec external_spec_from_json(const nlohmann::json& j) {
  ExternalModelSpec s;
  if (j.at("command").is_string()) s.command = {"/bin/sh", "-c", j.at("command").get<std::string>()};
  else s.command = j.at("command").get<std::vector<std::string>>();
  s.timeout_seconds = j.value("timeout_s", 60.0);
  return s;
}

/// Loads a linear, tree-ensemble or external model description.
inline std::unique_ptr<Predictor> load_model(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "linear") return linear_from_json(j);
  if (type == "tree_ensemble") return tree_ensemble_from_json(j);
  if (type == "external")
    return std::make_unique<ExternalPredictor>(feature_spec_from_json(j.at("features")), external_spec_from_json(j));
  throw ModelError("unknown model type '" + type + "'");
}

inline std::unique_ptr<Predictor> load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open model '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
    return load_model(j);
  } catch (const nlohmann::json::exception& e) {
    throw ModelError("model '" + path + "': " + e.what());
  }
}

}  // namespace condshap
