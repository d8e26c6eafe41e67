#include "diffreg/csd.hpp"

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "diffreg/error.hpp"
#include "diffreg/io.hpp"
#include "diffreg/random.hpp"
#include "diffreg/synth.hpp"

namespace diffreg {

using ojson = nlohmann::ordered_json;

void CSDConfig::validate() const {
  if (!(t_min > 0.0 && t_min < t_max && t_max < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "timestep range needs 0 < t_min < t_max < 1");
  }
  if (samples < 1) throw Error(ErrorCode::InvalidArgument, "samples must be >= 1");
  if (max_backtracks < 1) throw Error(ErrorCode::InvalidArgument, "max_backtracks must be >= 1");
  if (patience < 0) throw Error(ErrorCode::InvalidArgument, "patience must be >= 0");
  if (chain.latent_height < 0 || chain.latent_width < 0) {
    throw Error(ErrorCode::InvalidArgument, "latent dims must be >= 1 (0 for the default)");
  }
}

double CSDConfig::weight(double t) const {
  if (weighting == TimestepWeighting::Constant) return 1.0;
  const double s = std::sin(0.5 * std::numbers::pi * t);
  return s * s;
}

namespace {

void require_latent(const ScoreRequest& r) {
  if (r.latent_height < 1 || r.latent_width < 1) throw Error(ErrorCode::BadDims, "latent dims must be >= 1");
}

class ZeroProvider final : public ScoreProvider {
 public:
  ScoreResidual score(const ScoreRequest& r) override {
    require_latent(r);
    return {Eigen::MatrixXd::Zero(r.latent_height, r.latent_width)};
  }
};

class RandomSeededProvider final : public ScoreProvider {
 public:
  ScoreResidual score(const ScoreRequest& r) override {
    require_latent(r);
    std::mt19937_64 rng(splitmix64(r.seed ^ splitmix64(std::bit_cast<std::uint64_t>(r.t))));
    Eigen::MatrixXd v(r.latent_height, r.latent_width);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = standard_normal(rng);
    }
    return {v};
  }
};

class DepthTargetProvider final : public ScoreProvider {
 public:
  explicit DepthTargetProvider(DepthMap target) : target_(std::move(target)) {}

  ScoreResidual score(const ScoreRequest& r) override {
    require_latent(r);
    if (r.latent_height != target_.height || r.latent_width != target_.width) {
      throw Error(ErrorCode::DimMismatch, "target depth is " + std::to_string(target_.height) + "x" +
                                              std::to_string(target_.width) + ", request asks for " +
                                              std::to_string(r.latent_height) + "x" +
                                              std::to_string(r.latent_width));
    }
    const DepthMap d = resize_to_latent(r.depth, r.latent_height, r.latent_width);
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(d.height, d.width);
    for (int y = 0; y < d.height; ++y) {
      for (int x = 0; x < d.width; ++x) {
        if (d.occupied(x, y) && target_.occupied(x, y)) v(y, x) = d.at(x, y) - target_.at(x, y);
      }
    }
    return {v};
  }

 private:
  DepthMap target_;
};

void check_mask(const ScoreResidual& residual, const std::vector<std::uint8_t>& mask) {
  if (static_cast<std::size_t>(residual.values.size()) != mask.size()) {
    throw Error(ErrorCode::DimMismatch, "mask has " + std::to_string(mask.size()) + " cells, residual has " +
                                            std::to_string(residual.values.size()));
  }
}

}  // namespace

std::unique_ptr<ScoreProvider> make_mock_provider(MockKind kind, std::optional<DepthMap> target) {
  switch (kind) {
    case MockKind::Zero:
      return std::make_unique<ZeroProvider>();
    case MockKind::RandomSeeded:
      return std::make_unique<RandomSeededProvider>();
    case MockKind::DepthTarget:
      if (!target) throw Error(ErrorCode::MissingTarget, "depth_target needs a reference depth");
      target->validate();
      return std::make_unique<DepthTargetProvider>(std::move(*target));
  }
  throw Error(ErrorCode::InvalidArgument, "unknown mock kind");
}

double surrogate_csd_loss(const ScoreResidual& residual, const std::vector<std::uint8_t>& mask, double w_t) {
  check_mask(residual, mask);
  const Eigen::Index w = residual.values.cols();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < residual.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      if (mask[static_cast<std::size_t>(i * w + j)]) sum += residual.values(i, j) * residual.values(i, j);
    }
  }
  return w_t * sum;
}

DepthGradients csd_gradient(const ScoreResidual& residual, const std::vector<std::uint8_t>& mask, double w_t,
                            const DepthProvenance& provenance, const Pose& current) {
  if (!provenance.valid) throw Error(ErrorCode::ProvenanceMissing, "no forward pass recorded");
  if (residual.values.rows() != provenance.latent_height || residual.values.cols() != provenance.latent_width) {
    throw Error(ErrorCode::DimMismatch, "residual is " + std::to_string(residual.values.rows()) + "x" +
                                            std::to_string(residual.values.cols()) + ", latent grid is " +
                                            std::to_string(provenance.latent_height) + "x" +
                                            std::to_string(provenance.latent_width));
  }
  check_mask(residual, mask);
  if (provenance.pose.matrix() != current.matrix()) {
    throw Error(ErrorCode::StaleProvenance, "depth was rendered at a different pose");
  }
  const Eigen::Index w = residual.values.cols();
  Eigen::MatrixXd up = Eigen::MatrixXd::Zero(residual.values.rows(), w);
  for (Eigen::Index i = 0; i < up.rows(); ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      if (mask[static_cast<std::size_t>(i * w + j)]) up(i, j) = w_t * residual.values(i, j);
    }
  }
  return depth_backward(up, provenance);
}

namespace {

struct Draw {
  double t = 0.0;
  std::uint64_t seed = 0;
};

struct Evaluation {
  DepthChainResult chain;
  std::vector<ScoreResidual> residuals;
  double surrogate = 0.0;
};

std::vector<Vec3> offset_points(const std::vector<Vec3>& points, const std::vector<Vec3>& offsets) {
  std::vector<Vec3> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = points[i] + offsets[i];
  return out;
}

void score_chain(Evaluation& ev, const std::vector<Draw>& draws, ScoreProvider& provider,
                 const std::string& image_ref, const CSDConfig& config, std::uint64_t& next_id) {
  ev.residuals.clear();
  ev.surrogate = 0.0;
  const int h = ev.chain.provenance.latent_height;
  const int w = ev.chain.provenance.latent_width;
  for (const Draw& d : draws) {
    ScoreRequest req;
    req.id = next_id++;
    req.depth = ev.chain.dense;
    req.image_ref = image_ref;
    req.t = d.t;
    req.seed = d.seed;
    req.latent_height = h;
    req.latent_width = w;
    ScoreResidual r = provider.score(req);
    if (r.values.rows() != h || r.values.cols() != w) {
      throw Error(ErrorCode::ProviderFailure, "residual is " + std::to_string(r.values.rows()) + "x" +
                                                  std::to_string(r.values.cols()) + ", expected " +
                                                  std::to_string(h) + "x" + std::to_string(w));
    }
    if (!r.values.allFinite()) throw Error(ErrorCode::ProviderFailure, "residual has non-finite values");
    ev.surrogate += surrogate_csd_loss(r, ev.chain.latent.mask, config.weight(d.t));
    ev.residuals.push_back(std::move(r));
  }
  ev.surrogate /= static_cast<double>(draws.size());
}

std::string strip_code(const Error& e) {
  const std::string what = e.what();
  const auto pos = what.find(": ");
  return pos == std::string::npos ? what : what.substr(pos + 2);
}

}  // namespace

CSDTrajectory csd_optimize(const Pose& initial_pose, const std::vector<Vec3>& points, const std::string& image_ref,
                           const CameraIntrinsics& K, ScoreProvider& provider, const CSDConfig& config, int steps,
                           double lr) {
  config.validate();
  K.validate();
  if (steps < 1) throw Error(ErrorCode::InvalidArgument, "steps must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::InvalidArgument, "lr must be positive");
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "no points to render");

  std::mt19937_64 t_rng(derive_seed(config.seed, "csd-timestep"));
  std::mt19937_64 noise_rng(derive_seed(config.seed, "csd-noise"));
  std::uint64_t next_id = 1;

  CSDTrajectory traj;
  Pose pose = initial_pose;
  std::vector<Vec3> offsets(points.size(), Vec3::Zero());
  std::optional<DepthChainResult> cached;
  double final_surrogate = 0.0;
  int rejected_run = 0;

  for (int k = 0; k < steps; ++k) {
    try {
      std::vector<Draw> draws(static_cast<std::size_t>(config.samples));
      for (Draw& d : draws) {
        d.t = uniform(t_rng, config.t_min, config.t_max);
        d.seed = noise_rng();
      }
      Evaluation cur;
      cur.chain = cached ? std::move(*cached) : render_depth_chain(offset_points(points, offsets), pose, K, config.chain);
      cached.reset();
      score_chain(cur, draws, provider, image_ref, config, next_id);

      Vec6 g_pose = Vec6::Zero();
      Eigen::MatrixX3d g_pts = Eigen::MatrixX3d::Zero(static_cast<Eigen::Index>(points.size()), 3);
      for (std::size_t s = 0; s < draws.size(); ++s) {
        const auto g = csd_gradient(cur.residuals[s], cur.chain.latent.mask, config.weight(draws[s].t),
                                    cur.chain.provenance, pose);
        g_pose += g.pose;
        g_pts += g.points;
      }
      g_pose /= static_cast<double>(draws.size());
      g_pts /= static_cast<double>(draws.size());

      CSDStep rec;
      rec.step = k;
      rec.surrogate = cur.surrogate;
      rec.t = draws.front().t;
      rec.w_t = config.weight(draws.front().t);
      rec.lr = lr;
      final_surrogate = cur.surrogate;

      const bool moving = !g_pose.isZero(0.0) || (config.optimize_offsets && !g_pts.isZero(0.0));
      if (moving) {
        const double lr0 = lr;
        for (int b = 0; b < config.max_backtracks; ++b) {
          const Pose trial_pose = Pose::from_tangent(pose.tangent() - lr * g_pose);
          std::vector<Vec3> trial_offsets = offsets;
          if (config.optimize_offsets) {
            for (std::size_t i = 0; i < offsets.size(); ++i) {
              trial_offsets[i] -= lr * g_pts.row(static_cast<Eigen::Index>(i)).transpose();
            }
          }
          Evaluation trial;
          trial.chain = render_depth_chain(offset_points(points, trial_offsets), trial_pose, K, config.chain);
          score_chain(trial, draws, provider, image_ref, config, next_id);
          if (trial.surrogate < cur.surrogate) {
            rec.accepted = true;
            rec.lr = lr;
            pose = trial_pose;
            offsets = std::move(trial_offsets);
            final_surrogate = trial.surrogate;
            cached = std::move(trial.chain);
            lr *= 1.5;
            break;
          }
          lr *= 0.5;
        }
        if (!rec.accepted) lr = lr0;
      }
      rec.pose = pose;
      traj.steps.push_back(rec);
      rejected_run = rec.accepted ? 0 : rejected_run + 1;
      if (config.patience > 0 && rejected_run >= config.patience) break;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ProviderFailure) throw;
      throw Error(ErrorCode::ProviderFailure, "step " + std::to_string(k) + ": " + strip_code(e));
    }
  }
  traj.final_pose = pose;
  traj.offsets = std::move(offsets);
  traj.final_surrogate = final_surrogate;
  return traj;
}

TranslationLossResult translation_loss(const CorrespondenceSet& corr, const Pose& pose, const CameraIntrinsics& K) {
  if (corr.empty()) throw Error(ErrorCode::EmptyCorrespondences, "no pairs");
  TranslationLossResult out;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const auto& c = corr.pairs[i];
    if (!c.pixel_depth) throw Error(ErrorCode::MissingDepth, "pair " + std::to_string(i) + " has no pixel depth");
    const Vec3 r = pose.apply(c.point) - unproject(c.pixel, *c.pixel_depth, K);
    out.loss += r.squaredNorm();
    out.grad_pose += 2.0 * pose.point_jacobian(c.point).transpose() * r;
  }
  return out;
}

// Wire protocol.

namespace {

std::uint64_t get_u64(const ojson& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_unsigned()) {
    throw Error(ErrorCode::ParseError, std::string("field '") + key + "' must be an unsigned integer");
  }
  return j[key].get<std::uint64_t>();
}

std::string get_string(const ojson& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw Error(ErrorCode::ParseError, std::string("field '") + key + "' must be a string");
  }
  return j[key].get<std::string>();
}

ojson parse_object(const std::string& line) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const ojson::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("not JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::ParseError, "message must be a JSON object");
  return j;
}

}  // namespace

std::string encode_score_request(const ScoreRequest& r) {
  ojson j;
  j["id"] = r.id;
  j["depth_pfm_b64"] = base64_encode(encode_pfm(r.depth));
  j["image_ref"] = r.image_ref;
  j["t"] = r.t;
  j["seed"] = r.seed;
  j["latent"] = {r.latent_height, r.latent_width};
  return j.dump();
}

ScoreRequest decode_score_request(const std::string& line) {
  const ojson j = parse_object(line);
  ScoreRequest r;
  r.id = get_u64(j, "id");
  r.depth = decode_pfm(base64_decode(get_string(j, "depth_pfm_b64")));
  r.image_ref = get_string(j, "image_ref");
  if (!j.contains("t") || !j["t"].is_number()) throw Error(ErrorCode::ParseError, "field 't' must be a number");
  r.t = j["t"].get<double>();
  if (!(r.t > 0.0 && r.t < 1.0)) throw Error(ErrorCode::ParseError, "t must lie in (0,1)");
  r.seed = get_u64(j, "seed");
  const auto it = j.find("latent");
  if (it == j.end() || !it->is_array() || it->size() != 2 || !(*it)[0].is_number_unsigned() ||
      !(*it)[1].is_number_unsigned()) {
    throw Error(ErrorCode::ParseError, "field 'latent' must be [h, w]");
  }
  const auto h = (*it)[0].get<std::uint64_t>();
  const auto w = (*it)[1].get<std::uint64_t>();
  if (h < 1 || w < 1 || h > 1u << 20 || w > 1u << 20) throw Error(ErrorCode::ParseError, "latent dims out of range");
  r.latent_height = static_cast<int>(h);
  r.latent_width = static_cast<int>(w);
  return r;
}

std::string encode_score_response(const ScoreResponse& r) {
  ojson j;
  j["id"] = r.id;
  j["residual_b64"] = r.residual_b64.value_or("");
  if (r.err) {
    j["err"] = *r.err;
  } else {
    j["err"] = nullptr;
  }
  return j.dump();
}

ScoreResponse decode_score_response(const std::string& line) {
  const ojson j = parse_object(line);
  ScoreResponse r;
  r.id = get_u64(j, "id");
  if (j.contains("err") && !j["err"].is_null()) {
    if (!j["err"].is_string()) throw Error(ErrorCode::ParseError, "field 'err' must be null or a string");
    r.err = j["err"].get<std::string>();
  }
  if (j.contains("residual_b64") && !j["residual_b64"].is_null()) {
    if (!j["residual_b64"].is_string()) throw Error(ErrorCode::ParseError, "field 'residual_b64' must be a string");
    r.residual_b64 = j["residual_b64"].get<std::string>();
  }
  if (!r.err && !r.residual_b64) throw Error(ErrorCode::ParseError, "response carries neither residual nor err");
  return r;
}

ScoreResidual residual_from_response(const ScoreResponse& response, int height, int width) {
  if (response.err) throw Error(ErrorCode::ProviderFailure, "bridge reported: " + *response.err);
  std::vector<double> flat;
  try {
    flat = decode_f32_le(base64_decode(response.residual_b64.value_or("")));
  } catch (const Error& e) {
    throw Error(ErrorCode::ProviderFailure, "bad residual payload: " + strip_code(e));
  }
  if (flat.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw Error(ErrorCode::ProviderFailure, "residual has " + std::to_string(flat.size()) + " values, expected " +
                                                std::to_string(height) + "x" + std::to_string(width));
  }
  ScoreResidual out{Eigen::MatrixXd(height, width)};
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) out.values(i, j) = flat[static_cast<std::size_t>(i) * width + j];
  }
  if (!out.values.allFinite()) throw Error(ErrorCode::ProviderFailure, "residual has non-finite values");
  return out;
}

ScoreResponse response_from_residual(std::uint64_t id, const ScoreResidual& residual) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(residual.values.size()));
  for (Eigen::Index i = 0; i < residual.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < residual.values.cols(); ++j) flat.push_back(residual.values(i, j));
  }
  ScoreResponse r;
  r.id = id;
  r.residual_b64 = base64_encode(encode_f32_le(flat));
  return r;
}

// Bridge transport.

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error(ErrorCode::ProviderFailure, what); }

std::string errno_text() { return std::strerror(errno); }

int remaining_ms(std::chrono::steady_clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
  return left.count() > 0 ? static_cast<int>(left.count()) : 0;
}

void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  if (flags < 0 || ::fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0) fail("fcntl: " + errno_text());
}

int connect_tcp(const std::string& address, std::chrono::milliseconds timeout) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
    fail("bridge address must be host:port or stdio:<command>, got '" + address + "'");
  }
  std::string host = address.substr(0, colon);
  if (host.size() > 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  const std::string port = address.substr(colon + 1);

  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    fail("cannot resolve " + address + ": " + ::gai_strerror(rc));
  }
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  std::string last = "no addresses";
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) {
      last = errno_text();
      continue;
    }
    set_nonblocking(fd);
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      pollfd p{fd, POLLOUT, 0};
      rc = ::poll(&p, 1, remaining_ms(deadline));
      if (rc == 0) {
        ::close(fd);
        ::freeaddrinfo(res);
        fail("timed out connecting to " + address);
      }
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      if (rc > 0 && err == 0) {
        ::freeaddrinfo(res);
        return fd;
      }
      last = std::strerror(err != 0 ? err : errno);
    } else if (rc == 0) {
      ::freeaddrinfo(res);
      return fd;
    } else {
      last = errno_text();
    }
    ::close(fd);
  }
  ::freeaddrinfo(res);
  fail("cannot reach bridge at " + address + ": " + last);
}

}  // namespace

BridgeProvider::BridgeProvider(const std::string& address, std::chrono::milliseconds timeout) : timeout_(timeout) {
  if (timeout.count() <= 0) throw Error(ErrorCode::InvalidArgument, "bridge timeout must be positive");
  const std::string stdio_prefix = "stdio:";
  if (address.rfind(stdio_prefix, 0) == 0) {
    const std::string command = address.substr(stdio_prefix.size());
    if (command.empty()) fail("empty bridge command");
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) < 0) fail("socketpair: " + errno_text());
    const pid_t pid = ::fork();
    if (pid < 0) {
      ::close(sv[0]);
      ::close(sv[1]);
      fail("fork: " + errno_text());
    }
    if (pid == 0) {
      ::dup2(sv[1], STDIN_FILENO);
      ::dup2(sv[1], STDOUT_FILENO);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(sv[1]);
    child_ = pid;
    read_fd_ = write_fd_ = sv[0];
    set_nonblocking(read_fd_);
    return;
  }
  const std::string tcp_prefix = "tcp:";
  const std::string hostport = address.rfind(tcp_prefix, 0) == 0 ? address.substr(tcp_prefix.size()) : address;
  read_fd_ = write_fd_ = connect_tcp(hostport, timeout);
}

BridgeProvider::~BridgeProvider() {
  if (read_fd_ >= 0) ::close(read_fd_);
  if (child_ > 0) {
    // Closing the stream lets a well-behaved bridge exit on EOF.
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(500);
    while (::waitpid(child_, nullptr, WNOHANG) == 0) {
      if (std::chrono::steady_clock::now() >= deadline) {
        ::kill(child_, SIGKILL);
        ::waitpid(child_, nullptr, 0);
        break;
      }
      ::usleep(5000);
    }
  }
}

void BridgeProvider::send_line(const std::string& line) {
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  std::string data = line + "\n";
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(write_fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n > 0) {
      sent += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      pollfd p{write_fd_, POLLOUT, 0};
      const int rc = ::poll(&p, 1, remaining_ms(deadline));
      if (rc == 0) fail("timed out sending a request");
      if (rc < 0 && errno != EINTR) fail("poll: " + errno_text());
      continue;
    }
    fail("bridge write failed: " + errno_text());
  }
}

std::string BridgeProvider::read_line(std::chrono::steady_clock::time_point deadline) {
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    pollfd p{read_fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc == 0) fail("no response within " + std::to_string(timeout_.count()) + " ms");
    if (rc < 0) {
      if (errno == EINTR) continue;
      fail("poll: " + errno_text());
    }
    char chunk[65536];
    const ssize_t n = ::recv(read_fd_, chunk, sizeof chunk, 0);
    if (n == 0) fail("bridge closed the stream");
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN || errno == EWOULDBLOCK) continue;
      fail("bridge read failed: " + errno_text());
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

ScoreResidual BridgeProvider::score(const ScoreRequest& request) {
  require_latent(request);
  ScoreRequest wire = request;
  wire.id = next_id_++;
  send_line(encode_score_request(wire));
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  for (;;) {
    if (const auto it = early_.find(wire.id); it != early_.end()) {
      const ScoreResponse r = it->second;
      early_.erase(it);
      return residual_from_response(r, request.latent_height, request.latent_width);
    }
    const std::string line = read_line(deadline);
    if (line.empty()) continue;
    ScoreResponse r;
    try {
      r = decode_score_response(line);
    } catch (const Error& e) {
      fail("malformed response: " + strip_code(e));
    }
    early_[r.id] = std::move(r);
  }
}

}  // namespace diffreg
