#include "twinbed/learning.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>

#include <Eigen/QR>

#include "twinbed/learning_kernels.hpp"
#include "twinbed/messages.hpp"

namespace twinbed {
namespace {

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

constexpr std::size_t kSnapshotDoubles = 3 * kFeatureCount + 1;  // W + loss
constexpr std::size_t kDoublesPerChunk = 3;
constexpr std::size_t kSnapshotChunks = (kSnapshotDoubles + kDoublesPerChunk - 1) / kDoublesPerChunk;

std::array<double, kSnapshotDoubles> flatten(const ModelParams& p) {
  std::array<double, kSnapshotDoubles> out{};
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) out[k * kFeatureCount + j] = p.W(k, j);
  }
  out.back() = p.train_loss;
  return out;
}

}  // namespace

FeatureVector featurize(const Twist2D& v, const Twist2D& u) {
  return {v.vx,      v.vy,      v.omega,  u.vx, u.vy, u.omega, sign(v.vx), sign(v.vy),
          v.vx * std::abs(v.vx), v.vy * std::abs(v.vy), 1.0};
}

Twist2D ModelParams::predict_residual(const Twist2D& twist, const Twist2D& command) const {
  const FeatureVector f = featurize(twist, command);
  const Eigen::Map<const Eigen::Matrix<double, 11, 1>> x(f.data());
  const Eigen::Vector3d r = W * x;
  return {r(0), r(1), r(2)};
}

std::uint32_t ModelParams::checksum() const {
  std::uint32_t h = 2166136261u;
  auto mix = [&h](std::uint64_t word) {
    for (int i = 0; i < 8; ++i) {
      h ^= static_cast<std::uint8_t>(word >> (8 * i));
      h *= 16777619u;
    }
  };
  for (double d : flatten(*this)) mix(std::bit_cast<std::uint64_t>(d));
  mix(version);
  mix(converged ? 1u : 0u);
  return h;
}

Twist2D NominalModel::step(WheelSpeeds& wheels, const Twist2D& command, std::int64_t dt_ms) const {
  const DriveCommand target = inverse_kinematics_clamped(command, geometry);
  const double lag = 1.0 - std::exp(-static_cast<double>(dt_ms) / motor_tau_ms);
  const int motors = motor_count(geometry.kind);
  for (int i = 0; i < motors; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double goal = std::clamp(target.wheels[k], -wheel_speed_max, wheel_speed_max);
    wheels[k] = std::clamp(wheels[k] + lag * (goal - wheels[k]), -wheel_speed_max, wheel_speed_max);
  }
  return forward_kinematics(wheels, geometry, target.steering);
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw ConfigInvalid("replay capacity must be >= 1");
}

void ReplayBuffer::push(const Transition& t) {
  items_.push_back(t);
  while (items_.size() > capacity_) items_.pop_front();
}

Dataset Dataset::from(const ReplayBuffer& buffer) {
  Dataset d;
  d.x.reserve(buffer.size());
  d.y.reserve(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    d.x.push_back(featurize(buffer[i].twist, buffer[i].command));
    d.y.push_back(buffer[i].target());
  }
  return d;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0)) throw ConfigInvalid("learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigInvalid("batch_size must be >= 1");
  if (!(ridge >= 0)) throw ConfigInvalid("ridge must be >= 0");
  if (retrain_every < 1) throw ConfigInvalid("retrain_every must be >= 1");
  if (replay_capacity < 1) throw ConfigInvalid("replay_capacity must be >= 1");
}

// ---------------------------------------------------------------------------

double evaluate_mse(const ModelParams& params, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("evaluate_mse: empty dataset");
  return kernels::mse_omp(params.W, data.x, data.y);
}

Weights mse_gradient(const ModelParams& params, const Dataset& data) {
  return kernels::gradient_omp(params.W, data.x, data.y);
}

ModelParams fit_least_squares(const Dataset& data, double ridge) {
  if (!(ridge >= 0)) throw std::invalid_argument("fit_least_squares: ridge must be >= 0");
  const std::size_t n = data.size();
  if (n < kFeatureCount) {
    throw RankDeficient(std::to_string(n) + " samples for " + std::to_string(kFeatureCount) +
                        " features");
  }
  // A ridge penalty is appended as sqrt(n * ridge) * I rows with zero targets.
  const std::size_t rows = ridge > 0 ? n + kFeatureCount : n;
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows),
                                            static_cast<Eigen::Index>(kFeatureCount));
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < kFeatureCount; ++j) X(r, static_cast<Eigen::Index>(j)) = data.x[i][j];
    for (std::size_t k = 0; k < 3; ++k) Y(r, static_cast<Eigen::Index>(k)) = data.y[i][k];
  }
  if (ridge > 0) {
    const double w = std::sqrt(static_cast<double>(n) * ridge);
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      X(static_cast<Eigen::Index>(n + j), static_cast<Eigen::Index>(j)) = w;
    }
  }
  // Column equilibration keeps the rank decision scale-free.
  Eigen::VectorXd scale = X.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < scale.size(); ++j) {
    if (scale(j) == 0.0) throw RankDeficient("feature " + std::to_string(j) + " is identically zero");
    X.col(j) /= scale(j);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < static_cast<Eigen::Index>(kFeatureCount)) {
    throw RankDeficient("design matrix rank " + std::to_string(qr.rank()) + " < 11");
  }
  const Eigen::MatrixXd B = qr.solve(Y);  // 11 x 3, scaled coordinates
  ModelParams out;
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      out.W(static_cast<Eigen::Index>(k), jj) = B(jj, static_cast<Eigen::Index>(k)) / scale(jj);
    }
  }
  out.train_loss = evaluate_mse(out, data);
  return out;
}

ModelParams fit_least_squares(const ReplayBuffer& buffer, double ridge) {
  return fit_least_squares(Dataset::from(buffer), ridge);
}

ModelParams sgd_epoch(const ModelParams& params, const Dataset& data, const TrainConfig& config,
                      NoiseSource& rng) {
  const std::size_t n = data.size();
  if (n == 0) throw std::invalid_argument("sgd_epoch: empty dataset");

  using Mat11 = Eigen::Matrix<double, 11, 11>;
  const Mat11 full = kernels::moments_omp(data.x, data.y).xx;
  const double start_loss = kernels::mse_omp(params.W, data.x, data.y);

  // Each step is preconditioned by (M + M_b + ridge I)^-1, M the dataset and
  // M_b the batch second-moment matrix. Since M_b <= M + M_b the
  // preconditioned batch curvature stays below 2/3 in every direction, so
  // any learning rate below 3 is stable no matter how unrepresentative a
  // batch is.
  auto precondition = [&](const Mat11& batch) -> Mat11 {
    Mat11 A = full + batch;
    A.diagonal().array() += config.ridge;
    Eigen::LDLT<Mat11> ldlt(A);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
      const Mat11 P = ldlt.solve(Mat11::Identity());
      if (P.allFinite()) return P;
    }
    // Singular: fall back to the diagonal.
    Mat11 P = Mat11::Zero();
    for (Eigen::Index j = 0; j < 11; ++j) P(j, j) = A(j, j) > 0 ? 1.0 / A(j, j) : 1.0;
    return P;
  };
  auto step = [&](Weights& W, const Weights& grad, const Mat11& P) {
    Weights G = grad;
    if (config.ridge > 0) G += (2.0 * config.ridge / 3.0) * W;
    W -= config.learning_rate * (G * P);
  };

  ModelParams out = params;
  if (config.batch_size >= n) {
    step(out.W, kernels::gradient_omp(out.W, data.x, data.y), precondition(full));
  } else {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.next_u64() % (i + 1));
      std::swap(order[i], order[j]);
    }
    std::vector<FeatureVector> bx;
    std::vector<Target> by;
    bx.reserve(config.batch_size);
    by.reserve(config.batch_size);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      bx.clear();
      by.clear();
      for (std::size_t i = start; i < end; ++i) {
        bx.push_back(data.x[order[i]]);
        by.push_back(data.y[order[i]]);
      }
      const Mat11 batch = kernels::moments_serial(bx, by).xx;
      step(out.W, kernels::gradient_serial(out.W, bx, by), precondition(batch));
    }
  }

  out.train_loss = kernels::mse_omp(out.W, data.x, data.y);
  // A warm start can begin above the threshold; only a loss that is large
  // and not falling means the step size is wrong.
  const bool large = !std::isfinite(out.train_loss) || out.train_loss > kDivergenceLoss;
  if (!out.W.allFinite() || (large && !(out.train_loss < start_loss))) {
    throw Diverged("training loss " + std::to_string(out.train_loss) +
                   " exceeds 1e6; lower the learning rate");
  }
  return out;
}

ModelParams sgd_epoch(const ModelParams& params, const ReplayBuffer& buffer,
                      const TrainConfig& config, NoiseSource& rng) {
  return sgd_epoch(params, Dataset::from(buffer), config, rng);
}

// ---------------------------------------------------------------------------

std::vector<Frame> encode_snapshot(const ModelParams& p, Timestamp t) {
  const auto values = flatten(p);
  const auto version_lo = static_cast<std::int16_t>(static_cast<std::uint16_t>(p.version & 0xFFFF));
  std::vector<Frame> frames;
  for (std::size_t c = 0; c < kSnapshotChunks; ++c) {
    Frame f;
    f.msg_type = static_cast<std::uint8_t>(MsgType::SnapshotChunk);
    f.timestamp = static_cast<std::uint32_t>(t.ms);
    f.fields.push_back(static_cast<std::int16_t>(c));
    f.fields.push_back(version_lo);
    for (std::size_t d = 0; d < kDoublesPerChunk; ++d) {
      const std::size_t idx = c * kDoublesPerChunk + d;
      const std::uint64_t bits = idx < values.size() ? std::bit_cast<std::uint64_t>(values[idx]) : 0;
      for (int w = 3; w >= 0; --w) {
        f.fields.push_back(static_cast<std::int16_t>(static_cast<std::uint16_t>(bits >> (16 * w))));
      }
    }
    frames.push_back(f.seal());
  }
  const std::uint32_t cks = p.checksum();
  Frame h;
  h.msg_type = static_cast<std::uint8_t>(MsgType::SnapshotHeader);
  h.timestamp = static_cast<std::uint32_t>(t.ms);
  auto word = [](std::uint64_t v) { return static_cast<std::int16_t>(static_cast<std::uint16_t>(v)); };
  h.fields = {word(p.version >> 16), word(p.version), static_cast<std::int16_t>(p.converged),
              static_cast<std::int16_t>(kSnapshotChunks), word(cks >> 16), word(cks)};
  frames.push_back(h.seal());
  return frames;
}

std::optional<ModelParams> SnapshotAssembler::feed(const Frame& f) {
  auto u16 = [](std::int16_t v) { return static_cast<std::uint16_t>(v); };
  if (f.msg_type == static_cast<std::uint8_t>(MsgType::SnapshotChunk)) {
    if (f.fields.size() != 2 + 4 * kDoublesPerChunk) return std::nullopt;
    const std::uint16_t vlo = u16(f.fields[1]);
    if (chunks_.empty() || vlo != version_lo_) {
      chunks_.assign(kSnapshotChunks, std::nullopt);
      version_lo_ = vlo;
    }
    const auto idx = static_cast<std::size_t>(f.fields[0]);
    if (idx >= kSnapshotChunks) return std::nullopt;
    std::array<std::int16_t, 12> words{};
    std::copy(f.fields.begin() + 2, f.fields.end(), words.begin());
    chunks_[idx] = words;
    return std::nullopt;
  }
  if (f.msg_type != static_cast<std::uint8_t>(MsgType::SnapshotHeader) || f.fields.size() != 6) {
    return std::nullopt;
  }
  const std::uint64_t version = (std::uint64_t{u16(f.fields[0])} << 16) | u16(f.fields[1]);
  const std::uint32_t expected = (std::uint32_t{u16(f.fields[4])} << 16) | u16(f.fields[5]);
  if (chunks_.size() != kSnapshotChunks || version_lo_ != (version & 0xFFFF)) return std::nullopt;
  std::array<double, kSnapshotDoubles> values{};
  for (std::size_t c = 0; c < kSnapshotChunks; ++c) {
    if (!chunks_[c]) return std::nullopt;
    for (std::size_t d = 0; d < kDoublesPerChunk; ++d) {
      const std::size_t idx = c * kDoublesPerChunk + d;
      if (idx >= values.size()) break;
      std::uint64_t bits = 0;
      for (std::size_t w = 0; w < 4; ++w) bits = (bits << 16) | u16((*chunks_[c])[d * 4 + w]);
      values[idx] = std::bit_cast<double>(bits);
    }
  }
  ModelParams p;
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) p.W(k, j) = values[k * kFeatureCount + j];
  }
  p.train_loss = values.back();
  p.version = version;
  p.converged = f.fields[2] != 0;
  chunks_.clear();
  if (p.checksum() != expected) return std::nullopt;
  return p;
}

bool SnapshotSubscriber::poll(Bus& bus) {
  bool fresh = false;
  while (true) {
    std::optional<Frame> f;
    try {
      f = bus.consume(topics::kModelSnapshot, cursor_);
    } catch (const CursorLagged&) {
      // Skip to the oldest retained frame; a partial snapshot is dropped by
      // the assembler.
      cursor_.position = bus.topic(topics::kModelSnapshot).first_retained() - 1;
      assembler_ = SnapshotAssembler{};
      continue;
    }
    if (!f) break;
    if (auto p = assembler_.feed(*f)) {
      if (!latest_ || p->version > latest_->version) {
        latest_ = *p;
        fresh = true;
        if (p->converged) converged_ = *p;
      }
    }
  }
  return fresh;
}

// ---------------------------------------------------------------------------

LearningServer::LearningServer(TrainConfig config, NominalModel nominal, std::uint64_t seed)
    : config_(config), nominal_(nominal), rng_(seed), buffer_(config.replay_capacity) {
  config_.validate();
}

void LearningServer::add_transition(const Transition& t) {
  buffer_.push(t);
  ++fresh_;
}

void LearningServer::ingest(Bus& bus) {
  while (auto f = bus.consume(topics::kPlantState, state_cursor_)) pending_states_.push_back(*f);
  while (auto f = bus.consume(topics::kPlantCommand, command_cursor_)) {
    pending_commands_.push_back(*f);
  }

  while (!pending_states_.empty()) {
    const StateMsg s = unpack_state(pending_states_.front());
    while (!pending_commands_.empty() && pending_commands_.front().timestamp < s.t.ms) {
      pending_commands_.pop_front();
    }
    if (pending_commands_.empty()) break;  // wait for the matching command
    std::optional<Twist2D> u;
    if (pending_commands_.front().timestamp == s.t.ms) {
      u = unpack_command(pending_commands_.front()).command;
      pending_commands_.pop_front();
    }
    pending_states_.pop_front();

    const Twist2D v = world_to_body(s.twist, s.pose.theta);
    const bool contiguous = last_twist_ && s.t.ms - last_t_ == kTickMs;
    if (contiguous && u) {
      const Twist2D before = forward_kinematics(shadow_wheels_, nominal_.geometry);
      const Twist2D nominal = nominal_.step(shadow_wheels_, *u, s.t.ms - last_t_);
      add_transition({before, *u, v, nominal});
    } else {
      // New episode: assume the actuators are in the state that produces v.
      shadow_wheels_ = inverse_kinematics_clamped(v, nominal_.geometry).wheels;
    }
    last_twist_ = v;
    last_t_ = s.t.ms;
  }
}

bool LearningServer::ready() const {
  return fresh_ >= config_.retrain_every && buffer_.size() >= kFeatureCount;
}

bool LearningServer::converged_from(const std::vector<double>& losses, double tol) {
  if (losses.size() < static_cast<std::size_t>(kConvergenceRounds) + 1) return false;
  for (std::size_t i = losses.size() - kConvergenceRounds; i < losses.size(); ++i) {
    if (!(std::abs(losses[i] - losses[i - 1]) < tol)) return false;
  }
  return true;
}

const ModelParams& LearningServer::train_round() {
  const Dataset data = Dataset::from(buffer_);
  if (config_.solver == Solver::LeastSquares) {
    try {
      ModelParams fitted = fit_least_squares(data, config_.ridge);
      fitted.version = params_.version;
      params_ = fitted;
    } catch (const RankDeficient&) {
      // Not enough excitation yet; keep the previous model.
    }
  } else {
    for (std::size_t e = 0; e < config_.epochs_per_round; ++e) {
      params_ = sgd_epoch(params_, data, config_, rng_);
    }
  }
  params_.train_loss = evaluate_mse(params_, data);
  losses_.push_back(params_.train_loss);
  params_.converged = converged_from(losses_, config_.convergence_tol);
  fresh_ = 0;
  return params_;
}

ModelParams LearningServer::publish_snapshot(Bus& bus, Timestamp t) {
  if (!params_.finite()) throw NonFiniteState("refusing to publish a non-finite model");
  params_.version = next_version_++;
  bus.publish_batch(topics::kModelSnapshot, encode_snapshot(params_, t));
  return params_;
}

bool LearningServer::step(Bus& bus, Timestamp t) {
  ingest(bus);
  if (!ready()) return false;
  train_round();
  publish_snapshot(bus, t);
  return true;
}

}  // namespace twinbed
