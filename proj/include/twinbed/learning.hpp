#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "twinbed/bus.hpp"
#include "twinbed/core.hpp"
#include "twinbed/kinematics.hpp"
#include "twinbed/noise.hpp"

namespace twinbed {

inline constexpr std::size_t kFeatureCount = 11;
inline constexpr std::size_t kOutputCount = 3;

/// [vx, vy, w, ux, uy, uw, sign(vx), sign(vy), vx|vx|, vy|vy|, 1]
using FeatureVector = std::array<double, kFeatureCount>;
/// Residual twist delta (vx, vy, omega) for one tick.
using Target = std::array<double, kOutputCount>;
using Weights = Eigen::Matrix<double, 3, 11, Eigen::RowMajor>;

FeatureVector featurize(const Twist2D& twist, const Twist2D& command);

/// The learned black-box residual dynamics.
struct ModelParams {
  Weights W = Weights::Zero();
  std::uint64_t version = 0;
  double train_loss = 0.0;
  bool converged = false;

  Twist2D predict_residual(const Twist2D& twist, const Twist2D& command) const;
  bool finite() const { return W.allFinite() && std::isfinite(train_loss); }
  /// FNV-1a over the weights, loss, version and flag.
  std::uint32_t checksum() const;
};

/// The analytic part of the twin: wheels lag toward the inverse kinematics
/// of the commanded body twist, clamp at the nominal wheel limit, and the
/// body twist follows from forward kinematics. Slip and friction are absent.
struct NominalModel {
  ChassisGeometry geometry;
  double motor_tau_ms = 40.0;
  double wheel_speed_max = 12.0;

  /// Advances the actuator state by dt and returns the nominal body twist.
  Twist2D step(WheelSpeeds& wheels, const Twist2D& command, std::int64_t dt_ms) const;
};

/// One tick of telemetry. `twist` is the nominal actuator twist before the
/// step (forward kinematics of the nominal wheel state), `next_twist` the
/// measured twist after it and `nominal_next` the nominal prediction for it.
/// Twists are body frame; the regression target is next - nominal.
///
/// Featurizing the nominal rather than the measured twist keeps the twin's
/// recursion open-loop in the residual, so a fitted model cannot make it
/// unstable.
struct Transition {
  Twist2D twist;
  Twist2D command;
  Twist2D next_twist;
  Twist2D nominal_next;

  Target target() const {
    return {next_twist.vx - nominal_next.vx, next_twist.vy - nominal_next.vy,
            next_twist.omega - nominal_next.omega};
  }
};

/// Bounded FIFO of transitions; the oldest entry is evicted when full.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 4096);

  void push(const Transition& t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const Transition& operator[](std::size_t i) const { return items_[i]; }
  void clear() { items_.clear(); }

 private:
  std::size_t capacity_;
  std::deque<Transition> items_;
};

/// Design matrix and targets materialized from a buffer.
struct Dataset {
  std::vector<FeatureVector> x;
  std::vector<Target> y;

  std::size_t size() const { return x.size(); }
  static Dataset from(const ReplayBuffer& buffer);
};

enum class Solver { Sgd, LeastSquares };

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t batch_size = 64;
  std::size_t epochs_per_round = 40;
  double convergence_tol = 1.0;  // (mm/s)^2, MSE change between rounds
  std::size_t retrain_every = 120;
  std::size_t replay_capacity = 4096;
  Solver solver = Solver::Sgd;
  std::uint64_t seed = 7;
  // L2 penalty: both solvers minimize MSE + ridge / 3 * |W|^2, the same
  // objective as a per-output ridge regression.
  double ridge = 0.0;

  void validate() const;
};

inline constexpr double kDivergenceLoss = 1e6;
inline constexpr int kConvergenceRounds = 5;

/// Ordinary least squares on the buffer (ridge regression when ridge > 0).
/// Throws RankDeficient when the features do not span all 11 directions.
ModelParams fit_least_squares(const ReplayBuffer& buffer, double ridge = 0.0);
ModelParams fit_least_squares(const Dataset& data, double ridge = 0.0);

/// One shuffled pass of minibatch gradient descent on the MSE (plus the
/// ridge term). Steps are preconditioned by the inverse of the dataset plus
/// batch second-moment matrix, which keeps them stable for learning rates
/// below 3 and makes convergence insensitive to feature scaling.
/// Throws Diverged when the loss is above 1e6 and did not fall.
ModelParams sgd_epoch(const ModelParams& params, const Dataset& data, const TrainConfig& config,
                      NoiseSource& rng);
ModelParams sgd_epoch(const ModelParams& params, const ReplayBuffer& buffer,
                      const TrainConfig& config, NoiseSource& rng);

/// Mean over samples and the three outputs of the squared residual error.
double evaluate_mse(const ModelParams& params, const Dataset& data);
/// Gradient of evaluate_mse with respect to W.
Weights mse_gradient(const ModelParams& params, const Dataset& data);

/// Wire form of a snapshot: chunk frames carrying the raw IEEE-754 words of
/// every coefficient, followed by a header frame with version, flag and
/// checksum. Publish all of them with Bus::publish_batch.
std::vector<Frame> encode_snapshot(const ModelParams& params, Timestamp t);

/// Reassembles snapshots from a model.snapshot stream. Only snapshots whose
/// checksum verifies are returned, so a consumer never sees a partial one.
class SnapshotAssembler {
 public:
  std::optional<ModelParams> feed(const Frame& frame);

 private:
  std::uint16_t version_lo_ = 0;
  std::vector<std::optional<std::array<std::int16_t, 12>>> chunks_;
};

/// Reads model.snapshot from a bus and keeps the newest verified snapshot
/// plus the newest one flagged converged.
class SnapshotSubscriber {
 public:
  /// Returns true when a newer snapshot arrived.
  bool poll(Bus& bus);

  const std::optional<ModelParams>& latest() const { return latest_; }
  const std::optional<ModelParams>& latest_converged() const { return converged_; }

 private:
  Cursor cursor_;
  SnapshotAssembler assembler_;
  std::optional<ModelParams> latest_;
  std::optional<ModelParams> converged_;
};

/// The learning server: turns plant telemetry into transitions, retrains
/// every `retrain_every` new transitions and publishes versioned snapshots.
class LearningServer {
 public:
  LearningServer(TrainConfig config, NominalModel nominal, std::uint64_t seed);

  /// Drains plant.state / plant.command from the bus into the replay buffer.
  /// A timestamp gap longer than one tick starts a new episode.
  void ingest(Bus& bus);
  void add_transition(const Transition& t);

  bool ready() const;
  /// Runs one training round on the replay buffer and updates the
  /// convergence flag. Does not publish.
  const ModelParams& train_round();
  /// Stamps the next version onto the current params and publishes them on
  /// model.snapshot. Returns the published params.
  ModelParams publish_snapshot(Bus& bus, Timestamp t);
  /// Trains and publishes if enough new data arrived. Returns true if a
  /// snapshot went out.
  bool step(Bus& bus, Timestamp t);

  const ModelParams& params() const { return params_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const std::vector<double>& loss_history() const { return losses_; }
  std::size_t rounds() const { return losses_.size(); }

  /// Updates the flag from the loss history: converged once the last
  /// kConvergenceRounds round-to-round changes are all below tolerance.
  static bool converged_from(const std::vector<double>& losses, double tol);

 private:
  TrainConfig config_;
  NominalModel nominal_;
  NoiseSource rng_;
  ReplayBuffer buffer_;
  ModelParams params_;
  std::vector<double> losses_;
  std::size_t fresh_ = 0;
  std::uint64_t next_version_ = 1;

  Cursor state_cursor_;
  Cursor command_cursor_;
  std::deque<Frame> pending_states_;
  std::deque<Frame> pending_commands_;
  std::optional<Twist2D> last_twist_;
  std::int64_t last_t_ = -1;
  WheelSpeeds shadow_wheels_;
};

}  // namespace twinbed
