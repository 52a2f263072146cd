#pragma once

#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "twinbed/core.hpp"
#include "twinbed/kinematics.hpp"
#include "twinbed/learning.hpp"
#include "twinbed/plant.hpp"

namespace twinbed {

// ---------------------------------------------------------------------------
// Command fusion estimator
// ---------------------------------------------------------------------------

struct EstimatedState {
  double x = 0.0;   // mm
  double y = 0.0;   // mm
  double vx = 0.0;  // mm/s, world
  double vy = 0.0;  // mm/s, world
  double theta = 0.0;
  double omega = 0.0;

  Pose2D pose() const { return Pose2D(x, y, theta); }
  Twist2D world_twist() const { return {vx, vy, omega}; }
  PointPx position_px() const { return {x / kMmPerPixel, y / kMmPerPixel}; }
};

struct FusionConfig {
  double camera_gain = 0.3;   // alpha, fraction of the camera innovation applied
  double mag_weight = 0.02;   // complementary filter weight on the M-sensor
  std::size_t history = 64;   // ticks kept for latency compensation
};

/// Single-step fusion without history. The camera detection is moved
/// forward from its capture time to sensors.t along the current velocity
/// estimate before the fixed-gain correction.
EstimatedState fuse_estimate(const EstimatedState& prev, const SensorFrame& sensors,
                             const std::optional<CameraObservation>& camera, std::int64_t dt_ms,
                             const ChassisGeometry& geometry, const FusionConfig& config = {},
                             double steering = 0.0);

/// Dead reckoning from the wheel encoders, a gyro/magnetometer
/// complementary filter for heading, and a fixed-gain correction toward
/// overhead-camera detections.
///
/// Detections arrive late. Each one is compared with the estimate recorded
/// at its capture time, and the correction is applied to that estimate and
/// everything dead-reckoned after it.
class StateEstimator {
 public:
  StateEstimator(ChassisGeometry geometry, FusionConfig config, EstimatedState initial = {},
                 Timestamp t0 = {});

  /// One tick: sensors always, camera detections when any arrived.
  const EstimatedState& update(const SensorFrame& sensors,
                               std::span<const CameraObservation> camera, std::int64_t dt_ms,
                               double steering = 0.0);

  const EstimatedState& state() const { return state_; }
  void reset(const EstimatedState& s, Timestamp t);

 private:
  struct Past {
    Timestamp t;
    double x, y, theta;
  };
  void correct(const CameraObservation& obs);

  ChassisGeometry geometry_;
  FusionConfig config_;
  EstimatedState state_;
  std::deque<Past> history_;
};

// ---------------------------------------------------------------------------
// Waypoint controller
// ---------------------------------------------------------------------------

struct WaypointPlan {
  std::vector<PointPx> targets;
  double threshold = 30.0;  // px, per axis
  double epsilon_p = 0.2;
  std::size_t index = 0;

  bool complete() const { return index >= targets.size(); }
  const PointPx& target() const;
  void validate() const;
};

/// The proportional setpoint update x + eps * (target - x) on both axes.
/// Throws PlanExhausted when every target has been consumed.
PointPx waypoint_setpoint(const PointPx& position, const WaypointPlan& plan);

/// Moves to the next target once |x - target|_inf <= threshold.
WaypointPlan advance_waypoint(const PointPx& position, WaypointPlan plan);

/// World-frame velocity set point -> per-wheel set points q_d. Propagates
/// NonholonomicViolation.
DriveCommand allocate_dynamic(const Twist2D& world_velocity, const EstimatedState& est,
                              const ChassisGeometry& geometry);

// ---------------------------------------------------------------------------
// Motor layer
// ---------------------------------------------------------------------------

struct PidGains {
  double kp = 0.4;
  double ki = 8.0;   // 1/s
  double kd = 0.0;   // s
  double integral_limit = 2.0;  // rad
  double output_limit = 12.0;   // rad/s
};

struct PidState {
  double integral = 0.0;
  double prev_error = 0.0;
  bool primed = false;
};

/// Discrete PID with a clamped integral; output saturated to +-output_limit.
double motor_pid(double setpoint, double measured, const PidGains& gains, PidState& state,
                 std::int64_t dt_ms);

/// Per-motor control on the robot: feed-forward of q_d plus PID trim against
/// the encoder reading, saturated to the wheel limit.
class MotorLayer {
 public:
  MotorLayer(PidGains gains, double wheel_speed_max);
  DriveCommand drive(const DriveCommand& q_d, const WheelSpeeds& encoders, std::int64_t dt_ms);
  void reset();

  /// q_i^m: the last encoder feedback seen per motor.
  const WheelSpeeds& feedback() const { return feedback_; }

 private:
  PidGains gains_;
  double wheel_speed_max_;
  std::array<PidState, 4> pid_{};
  WheelSpeeds feedback_;
};

/// q^c, q^d and q^m of the three-layer architecture, per motor.
struct CommandLayers {
  WheelSpeeds q_c;  // fusion layer: wheel speeds for the unallocated set point
  WheelSpeeds q_d;  // dynamic layer output
  WheelSpeeds q_m;  // motor feedback
};

// ---------------------------------------------------------------------------
// Twin-feedback command correction
// ---------------------------------------------------------------------------

struct CorrectorConfig {
  double gamma = 0.5;
  int iterations = 20;
  double jacobian_step = 1e-3;  // mm/s (rad/s for omega)
};

/// Replaces a nominal world velocity with the command that the learned model
/// predicts will produce it. Iterates
///   u <- u + gamma * J^-1 (desired - g(u))
/// where g is the twin's settled response to a held command and J its
/// finite-difference Jacobian at the nominal command. Returns the nominal
/// command when no iterate predicts a smaller error.
///
/// Throws ModelUnavailable if there is no model or it is not converged.
Twist2D twin_correct(const Twist2D& nominal_world, const EstimatedState& est,
                     const ModelParams* model, const NominalModel& twin_nominal,
                     const CorrectorConfig& config = {});

/// twin_correct with the fallback contract: nominal in, nominal out when no
/// converged model is available.
Twist2D twin_correct_or_nominal(const Twist2D& nominal_world, const EstimatedState& est,
                                const ModelParams* model, const NominalModel& twin_nominal,
                                const CorrectorConfig& config = {});

struct ControllerConfig {
  double setpoint_period_ms = 250.0;  // time allotted to reach the next set point
  double max_speed = 300.0;           // mm/s
  double heading_gain = 2.0;          // 1/s
  double heading_ref = 0.0;           // rad
  CorrectorConfig corrector;
};

struct ControlOutput {
  PointPx setpoint;
  Twist2D nominal_world;
  Twist2D command_world;
  Twist2D body_command;
  DriveCommand q_d;
  bool corrected = false;
  std::size_t target_index = 0;
  bool complete = false;
};

/// The server-side loop for one robot: waypoint bookkeeping, the
/// proportional set point, velocity shaping, optional twin correction and
/// wheel allocation.
class WaypointController {
 public:
  WaypointController(WaypointPlan plan, ControllerConfig config, ChassisGeometry geometry,
                     NominalModel twin_nominal);

  /// A model pointer enables twin correction; pass nullptr for nominal control.
  ControlOutput decide(const EstimatedState& est, const ModelParams* model);

  const WaypointPlan& plan() const { return plan_; }
  void reset_plan();

 private:
  WaypointPlan plan_;
  ControllerConfig config_;
  ChassisGeometry geometry_;
  NominalModel twin_nominal_;
};

}  // namespace twinbed
