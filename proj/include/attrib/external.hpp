#pragma once

// Adapter for out-of-process evaluators (NLI models, human-in-the-loop
// tools, contradiction detectors). The plugin is spawned through /bin/sh and
// speaks line-delimited JSON on its standard streams:
//   request  {"unit": {...}, "source": {...}}
//   response {"score": <number in [0, 1]>}
// A handle is a serial channel; use one instance per worker thread.

#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <memory>
#include <string>
#include <string_view>

#include "attrib/core.hpp"
#include "attrib/serialize.hpp"

namespace attrib {

namespace detail {

class PluginProcess {
 public:
  PluginProcess(const std::string& command, std::chrono::milliseconds timeout)
      : command_(command), timeout_(timeout) {
    ::signal(SIGPIPE, SIG_IGN);
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw_errno("pipe");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw_errno("pipe");
    }
    pid_ = ::fork();
    if (pid_ < 0) {
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
      throw_errno("fork");
    }
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
  }

  PluginProcess(const PluginProcess&) = delete;
  PluginProcess& operator=(const PluginProcess&) = delete;

  ~PluginProcess() {
    if (write_fd_ >= 0) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    if (pid_ > 0) {
      int status = 0;
      for (int k = 0; k < 50; ++k) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
        ::usleep(2000);
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
    }
  }

  std::string exchange(const std::string& request) {
    std::string line = request + "\n";
    std::string_view pending = line;
    while (!pending.empty()) {
      ssize_t n = ::write(write_fd_, pending.data(), pending.size());
      if (n < 0) {
        if (errno == EINTR) continue;
        throw external_evaluator_error("plugin '" + command_ + "' closed its input: " +
                                           std::strerror(errno),
                                       request);
      }
      pending.remove_prefix(static_cast<std::size_t>(n));
    }
    return read_line(request);
  }

 private:
  [[noreturn]] static void throw_errno(const char* what) {
    throw runtime_failure(std::string("cannot start plugin: ") + what + ": " + std::strerror(errno));
  }

  std::string read_line(const std::string& request) {
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + timeout_;
    for (;;) {
      if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string out = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return out;
      }
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
      if (left.count() <= 0) {
        throw external_evaluator_error("plugin '" + command_ + "' timed out", request);
      }
      pollfd pfd{read_fd_, POLLIN, 0};
      int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw external_evaluator_error(std::string("poll failed: ") + std::strerror(errno), request);
      }
      if (rc == 0) continue;
      char chunk[4096];
      ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw external_evaluator_error(std::string("read failed: ") + std::strerror(errno), request);
      }
      if (n == 0) {
        throw external_evaluator_error("plugin '" + command_ + "' exited without replying",
                                       request);
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  std::string command_;
  std::chrono::milliseconds timeout_;
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  std::string buffer_;
};

}  // namespace detail

class ExternalEvaluator {
 public:
  explicit ExternalEvaluator(std::string command,
                             std::chrono::milliseconds timeout = std::chrono::seconds(30))
      : process_(std::make_shared<detail::PluginProcess>(command, timeout)) {}

  static constexpr std::string_view name() { return "external"; }

  double score(const AttributableUnit& z, const Source& s) const {
    json request = {{"unit", to_json(z)}, {"source", to_json(s)}};
    std::string payload = process_->exchange(request.dump());
    json response;
    try {
      response = json::parse(payload);
    } catch (const json::parse_error&) {
      throw external_evaluator_error("malformed plugin response", payload);
    }
    if (!response.is_object() || !response.contains("score") || !response["score"].is_number()) {
      throw external_evaluator_error("plugin response lacks a numeric 'score'", payload);
    }
    double value = response["score"].get<double>();
    if (!(value >= 0.0 && value <= 1.0)) {
      throw external_evaluator_error("plugin score outside [0, 1]", payload);
    }
    return value;
  }

  double operator()(const AttributableUnit& z, const Source& s) const { return score(z, s); }

 private:
  std::shared_ptr<detail::PluginProcess> process_;
};

inline double eval_external(const AttributableUnit& z, const Source& s,
                            const ExternalEvaluator& plugin) {
  return plugin.score(z, s);
}

}  // namespace attrib
