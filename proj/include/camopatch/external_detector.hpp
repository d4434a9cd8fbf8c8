#pragma once

// Client for detectors that live in another process. The worker is started
// with /bin/sh -c <command> and speaks newline-delimited JSON over its
// stdin/stdout: one request line, one response line, in order. Images and
// gradients travel as base64 of row-major little-endian float32 H x W x 3.
//
// Handshake: the client sends {"op":"handshake","protocol":"1"}; the worker
// answers {"ok":true,"protocol":"1","model":...} or an error and exits.

#include <fcntl.h>
#include <openssl/evp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "camopatch/detector.hpp"
#include "camopatch/io.hpp"

namespace camo::ext {

using nlohmann::json;

inline constexpr const char* kProtocolVersion = "1";
inline constexpr const char* kTimeoutEnv = "CAMOPATCH_WORKER_TIMEOUT";
inline constexpr double kDefaultTimeoutSeconds = 120.0;

/// The worker answered, but not in a way the protocol allows.
struct ProtocolError : TransportError {
  using TransportError::TransportError;
};

/// The worker reported {"ok": false, "error": ...}.
struct WorkerError : TransportError {
  using TransportError::TransportError;
};

// ---------------------------------------------------------------------------
// Encoding.

inline std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), int(bytes.size()));
  out.resize(std::size_t(n));
  return out;
}

/// Strict: no whitespace, length a multiple of 4, padding only at the end.
inline std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw InvalidArgument("base64: length is not a multiple of 4");
  std::size_t pad = 0;
  while (pad < 2 && pad < text.size() && text[text.size() - 1 - pad] == '=') ++pad;
  for (std::size_t i = 0; i + pad < text.size(); ++i) {
    const char c = text[i];
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '/'))
      throw InvalidArgument("base64: invalid character");
  }
  std::string out(3 * (text.size() / 4), '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), int(text.size()));
  if (n < 0) throw InvalidArgument("base64: malformed input");
  out.resize(std::size_t(n) - pad);
  return out;
}

static_assert(std::endian::native == std::endian::little, "float32 wire format assumes a little-endian host");

inline std::string encode_raster(const RgbRaster& r) {
  std::string bytes(r.size() * 4, '\0');
  for (std::size_t i = 0; i < r.size(); ++i) {
    const float f = static_cast<float>(r.values()[i]);
    std::memcpy(bytes.data() + 4 * i, &f, 4);
  }
  return base64_encode(bytes);
}

inline RgbRaster decode_raster(std::string_view b64, int height, int width) {
  const std::string bytes = base64_decode(b64);
  const std::size_t expected = std::size_t(height) * std::size_t(width) * 3 * 4;
  if (bytes.size() != expected)
    throw InvalidArgument("raster payload has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(expected));
  RgbRaster r(height, width);
  for (std::size_t i = 0; i < r.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 4 * i, 4);
    r.values()[i] = f;
  }
  return r;
}

inline json targets_json(std::span<const Detection> targets) {
  json arr = json::array();
  for (const auto& t : targets)
    arr.push_back({{"x_min", t.box.x_min}, {"y_min", t.box.y_min}, {"x_max", t.box.x_max}, {"y_max", t.box.y_max},
                   {"class_id", t.class_id}});
  return arr;
}

/// Request line (without the newline) for one operation.
inline json request_json(const std::string& op, const RgbRaster& image, std::span<const Detection> targets,
                         double confidence_threshold) {
  json j{{"op", op}, {"image", encode_raster(image)}, {"h", image.height()}, {"w", image.width()}};
  if (op == "detect") j["confidence_threshold"] = confidence_threshold;
  else j["targets"] = targets_json(targets);
  return j;
}

/// Seconds to wait for the worker; CAMOPATCH_WORKER_TIMEOUT overrides.
inline double worker_timeout_seconds() {
  const char* env = std::getenv(kTimeoutEnv);
  if (!env || !*env) return kDefaultTimeoutSeconds;
  char* end = nullptr;
  const double v = std::strtod(env, &end);
  if (end == env || *end || !(v > 0.0)) throw InvalidArgument(std::string(kTimeoutEnv) + " must be a positive number of seconds");
  return v;
}

// ---------------------------------------------------------------------------
// One worker process.

class WorkerProcess {
 public:
  /// Starts the worker and completes the handshake.
  WorkerProcess(const std::string& command, double timeout_seconds) : timeout_(timeout_seconds) {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
      throw TransportError(std::string("socketpair: ") + std::strerror(errno));
    pid_ = ::fork();
    if (pid_ < 0) {
      ::close(sv[0]);
      ::close(sv[1]);
      throw TransportError(std::string("fork: ") + std::strerror(errno));
    }
    if (pid_ == 0) {
      ::setpgid(0, 0);  // own group, so the shell and anything it starts die together
      ::dup2(sv[1], STDIN_FILENO);
      ::dup2(sv[1], STDOUT_FILENO);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::setpgid(pid_, pid_);  // also from this side, whichever runs first
    ::close(sv[1]);
    fd_ = sv[0];
    try {
      const json hello = request({{"op", "handshake"}, {"protocol", kProtocolVersion}});
      if (hello.value("protocol", "") != kProtocolVersion)
        throw ProtocolError("worker speaks protocol '" + hello.value("protocol", "?") + "', client speaks '" +
                            kProtocolVersion + "'");
      model_ = hello.value("model", "unknown");
      loss_ = hello.value("loss", "");
    } catch (const WorkerError& e) {
      shutdown();
      throw ProtocolError(std::string("handshake rejected: ") + e.what());
    } catch (...) {
      shutdown();
      throw;
    }
  }

  WorkerProcess(const WorkerProcess&) = delete;
  WorkerProcess& operator=(const WorkerProcess&) = delete;
  ~WorkerProcess() { shutdown(); }

  const std::string& model() const { return model_; }
  const std::string& loss_description() const { return loss_; }

  /// Sends one request and waits for its response. Any failure leaves the
  /// worker unusable; later calls fail fast.
  json request(const json& req) {
    if (fd_ < 0) throw TransportError("worker is no longer running");
    try {
      const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(timeout_));
      send_all(req.dump() + "\n", deadline);
      const std::string line = read_line(deadline);
      json resp;
      try {
        resp = json::parse(line);
      } catch (const json::parse_error&) {
        throw ProtocolError("worker sent a line that is not JSON: " + line.substr(0, 120));
      }
      if (!resp.is_object() || !resp.contains("ok") || !resp["ok"].is_boolean())
        throw ProtocolError("worker response lacks a boolean 'ok'");
      if (!resp["ok"].get<bool>()) {
        const auto err = resp.value("error", std::string("unspecified error"));
        throw WorkerError("worker error: " + err);
      }
      return resp;
    } catch (const WorkerError&) {
      throw;  // the worker is still in step with us
    } catch (...) {
      shutdown();
      throw;
    }
  }

 private:
  using Clock = std::chrono::steady_clock;

  int wait_ready(short events, Clock::time_point deadline) {
    for (;;) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      if (left <= 0) throw TransportError("worker timed out after " + io::num(timeout_) + " s");
      pollfd p{fd_, events, 0};
      const int r = ::poll(&p, 1, int(std::min<long long>(left, 1 << 30)));
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw TransportError(std::string("poll: ") + std::strerror(errno));
      if (r > 0) return p.revents;
    }
  }

  void send_all(const std::string& data, Clock::time_point deadline) {
    std::size_t sent = 0;
    while (sent < data.size()) {
      wait_ready(POLLOUT, deadline);
      const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL | MSG_DONTWAIT);
      if (n < 0 && (errno == EAGAIN || errno == EINTR)) continue;
      if (n < 0) throw TransportError(std::string("worker connection lost: ") + std::strerror(errno) + exit_note());
      sent += std::size_t(n);
    }
  }

  std::string read_line(Clock::time_point deadline) {
    for (;;) {
      if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      wait_ready(POLLIN, deadline);
      char chunk[65536];
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, MSG_DONTWAIT);
      if (n < 0 && (errno == EAGAIN || errno == EINTR)) continue;
      if (n < 0) throw TransportError(std::string("worker connection lost: ") + std::strerror(errno));
      if (n == 0) throw TransportError("worker closed its output" + exit_note());
      buffer_.append(chunk, std::size_t(n));
    }
  }

  /// Reaps the child if it has already exited and describes how.
  std::string exit_note() {
    if (pid_ <= 0) return "";
    int status = 0;
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = -1;
        if (WIFEXITED(status)) return " (exit status " + std::to_string(WEXITSTATUS(status)) + ")";
        if (WIFSIGNALED(status)) return " (killed by signal " + std::to_string(WTERMSIG(status)) + ")";
        return "";
      }
      ::usleep(2000);
    }
    return "";
  }

  void shutdown() {
    if (fd_ >= 0) {
      ::close(fd_);  // EOF on the worker's stdin asks it to leave
      fd_ = -1;
    }
    if (pid_ > 0) {
      int status = 0;
      bool gone = false;
      for (int i = 0; i < 100 && !gone; ++i) {
        gone = ::waitpid(pid_, &status, WNOHANG) == pid_;
        if (!gone) ::usleep(2000);
      }
      ::kill(-pid_, SIGKILL);  // stragglers in the group, if any
      if (!gone) ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  double timeout_;
  pid_t pid_ = -1;
  int fd_ = -1;
  std::string buffer_;
  std::string model_;
  std::string loss_;
};

// ---------------------------------------------------------------------------
// Detector over a pool of workers. Each worker serves one request at a time;
// concurrent callers take whichever worker is free.

class ExternalDetector final : public Detector {
 public:
  explicit ExternalDetector(std::string command, int pool_size = 1, double timeout_seconds = worker_timeout_seconds())
      : command_(std::move(command)) {
    if (pool_size < 1) throw InvalidArgument("ExternalDetector: pool_size must be >= 1");
    if (!(timeout_seconds > 0.0)) throw InvalidArgument("ExternalDetector: timeout must be > 0");
    for (int i = 0; i < pool_size; ++i) {
      workers_.push_back(std::make_unique<WorkerProcess>(command_, timeout_seconds));
      free_.push_back(workers_.back().get());
    }
  }

  std::vector<Detection> detect(const RgbImage& image, double confidence_threshold) const override {
    require_threshold(confidence_threshold);
    const json resp = call(request_json("detect", image, {}, confidence_threshold));
    if (!resp.contains("detections") || !resp["detections"].is_array())
      throw ProtocolError("detect response lacks a detections array");
    std::vector<Detection> out;
    try {
      for (const auto& d : resp["detections"]) {
        Detection det{{d.at("x_min").get<double>(), d.at("y_min").get<double>(), d.at("x_max").get<double>(),
                       d.at("y_max").get<double>()},
                      d.at("class_id").get<int>(),
                      d.at("confidence").get<double>()};
        if (!det.box.valid() || !det.box.within(image.height(), image.width()))
          throw ProtocolError("worker returned a box outside the image");
        if (!(det.confidence >= confidence_threshold && det.confidence <= 1.0))
          throw ProtocolError("worker returned a confidence outside [threshold, 1]");
        out.push_back(det);
      }
    } catch (const json::exception& e) {
      throw ProtocolError(std::string("malformed detection: ") + e.what());
    }
    return out;
  }

  double loss(const RgbImage& image, std::span<const Detection> targets) const override {
    return read_loss(call(request_json("loss", image, targets, 0.0)));
  }

  LossAndGradient loss_gradient(const RgbImage& image, std::span<const Detection> targets) const override {
    const json resp = call(request_json("loss_gradient", image, targets, 0.0));
    LossAndGradient out;
    out.loss = read_loss(resp);
    if (!resp.contains("gradient") || !resp["gradient"].is_string())
      throw ProtocolError("loss_gradient response lacks a gradient");
    try {
      out.gradient = decode_raster(resp["gradient"].get<std::string>(), image.height(), image.width());
    } catch (const InvalidArgument& e) {
      throw ProtocolError(std::string("bad gradient: ") + e.what());
    }
    for (double v : out.gradient.values())
      if (!std::isfinite(v)) throw ProtocolError("worker returned a non-finite gradient");
    return out;
  }

  std::string identity() const override { return "external(" + workers_.front()->model() + ")"; }
  const std::string& loss_description() const { return workers_.front()->loss_description(); }

 private:
  static double read_loss(const json& resp) {
    if (!resp.contains("loss") || !resp["loss"].is_number()) throw ProtocolError("response lacks a numeric loss");
    const double v = resp["loss"].get<double>();
    if (!std::isfinite(v) || v < 0.0) throw ProtocolError("worker returned a loss that is negative or not finite");
    return v;
  }

  json call(const json& req) const {
    WorkerProcess* w;
    {
      std::unique_lock lock(mutex_);
      ready_.wait(lock, [&] { return !free_.empty(); });
      w = free_.back();
      free_.pop_back();
    }
    struct Return {
      const ExternalDetector* self;
      WorkerProcess* w;
      ~Return() {
        {
          std::lock_guard lock(self->mutex_);
          self->free_.push_back(w);
        }
        self->ready_.notify_one();
      }
    } give_back{this, w};
    return w->request(req);
  }

  std::string command_;
  std::vector<std::unique_ptr<WorkerProcess>> workers_;
  mutable std::mutex mutex_;
  mutable std::condition_variable ready_;
  mutable std::vector<WorkerProcess*> free_;
};

}  // namespace camo::ext
