#include "twinbed/control.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "twinbed/twin.hpp"

namespace twinbed {
namespace {

// Dead-reckoning step shared by the stateless and the history-keeping fusion.
EstimatedState dead_reckon(const EstimatedState& prev, const SensorFrame& sensors,
                           std::int64_t dt_ms, const ChassisGeometry& geometry,
                           const FusionConfig& config, double steering) {
  const double dt = static_cast<double>(dt_ms) * 1e-3;
  const Twist2D body = forward_kinematics(sensors.encoders, geometry, steering);
  const Twist2D world = body_to_world(body, prev.theta);

  EstimatedState next = prev;
  next.vx = world.vx;
  next.vy = world.vy;
  next.x = prev.x + world.vx * dt;
  next.y = prev.y + world.vy * dt;

  const double predicted = prev.theta + sensors.gyro * dt;
  next.theta = wrap_angle(predicted + config.mag_weight * wrap_angle(sensors.mag_theta - predicted));
  next.omega = sensors.gyro;
  return next;
}

double twist_error(const Twist2D& a, const Twist2D& b, double lever) {
  const double dx = a.vx - b.vx;
  const double dy = a.vy - b.vy;
  const double dw = (a.omega - b.omega) * lever;
  return std::sqrt(dx * dx + dy * dy + dw * dw);
}

Eigen::Vector3d as_vec(const Twist2D& t) { return {t.vx, t.vy, t.omega}; }
Twist2D as_twist(const Eigen::Vector3d& v) { return {v(0), v(1), v(2)}; }

}  // namespace

EstimatedState fuse_estimate(const EstimatedState& prev, const SensorFrame& sensors,
                             const std::optional<CameraObservation>& camera, std::int64_t dt_ms,
                             const ChassisGeometry& geometry, const FusionConfig& config,
                             double steering) {
  if (dt_ms <= 0) throw std::invalid_argument("fuse_estimate: dt must be positive");
  EstimatedState next = dead_reckon(prev, sensors, dt_ms, geometry, config, steering);
  if (camera) {
    const double lag = static_cast<double>(sensors.t.ms - camera->t.ms) * 1e-3;
    const double ox = px_to_mm(static_cast<double>(camera->pixel_pose.u)) + next.vx * lag;
    const double oy = px_to_mm(static_cast<double>(camera->pixel_pose.v)) + next.vy * lag;
    const double oth = camera->pixel_pose.theta + next.omega * lag;
    const double a = config.camera_gain;
    next.x += a * (ox - next.x);
    next.y += a * (oy - next.y);
    next.theta = wrap_angle(next.theta + a * wrap_angle(oth - next.theta));
  }
  return next;
}

StateEstimator::StateEstimator(ChassisGeometry geometry, FusionConfig config,
                               EstimatedState initial, Timestamp t0)
    : geometry_(geometry), config_(config) {
  reset(initial, t0);
}

void StateEstimator::reset(const EstimatedState& s, Timestamp t) {
  state_ = s;
  state_.theta = wrap_angle(s.theta);
  history_.clear();
  history_.push_back({t, state_.x, state_.y, state_.theta});
}

const EstimatedState& StateEstimator::update(const SensorFrame& sensors,
                                             std::span<const CameraObservation> camera,
                                             std::int64_t dt_ms, double steering) {
  if (dt_ms <= 0) throw std::invalid_argument("StateEstimator: dt must be positive");
  state_ = dead_reckon(state_, sensors, dt_ms, geometry_, config_, steering);
  history_.push_back({sensors.t, state_.x, state_.y, state_.theta});
  while (history_.size() > std::max<std::size_t>(config_.history, 1)) history_.pop_front();
  for (const auto& obs : camera) correct(obs);
  return state_;
}

void StateEstimator::correct(const CameraObservation& obs) {
  // Newest history entry not later than the capture time.
  auto it = std::find_if(history_.rbegin(), history_.rend(),
                         [&](const Past& p) { return p.t <= obs.t; });
  if (it == history_.rend()) return;  // older than anything we remember

  const double a = config_.camera_gain;
  const double dx = a * (px_to_mm(static_cast<double>(obs.pixel_pose.u)) - it->x);
  const double dy = a * (px_to_mm(static_cast<double>(obs.pixel_pose.v)) - it->y);
  const double dth = a * wrap_angle(obs.pixel_pose.theta - it->theta);

  for (auto p = it.base() - 1; p != history_.end(); ++p) {
    p->x += dx;
    p->y += dy;
    p->theta = wrap_angle(p->theta + dth);
  }
  state_.x += dx;
  state_.y += dy;
  state_.theta = wrap_angle(state_.theta + dth);
}

const PointPx& WaypointPlan::target() const {
  if (complete()) throw PlanExhausted("all waypoints consumed");
  return targets[index];
}

void WaypointPlan::validate() const {
  if (!(epsilon_p > 0.0 && epsilon_p <= 1.0)) throw ConfigInvalid("epsilon_p must be in (0, 1]");
  if (!(threshold > 0.0)) throw ConfigInvalid("waypoint threshold must be positive");
}

PointPx waypoint_setpoint(const PointPx& x, const WaypointPlan& plan) {
  const PointPx& target = plan.target();
  return {x.x + plan.epsilon_p * (target.x - x.x), x.y + plan.epsilon_p * (target.y - x.y)};
}

WaypointPlan advance_waypoint(const PointPx& x, WaypointPlan plan) {
  if (plan.complete()) return plan;
  const PointPx& target = plan.targets[plan.index];
  const double dist = std::max(std::abs(x.x - target.x), std::abs(x.y - target.y));
  if (dist <= plan.threshold) ++plan.index;
  return plan;
}

DriveCommand allocate_dynamic(const Twist2D& world_velocity, const EstimatedState& est,
                              const ChassisGeometry& geometry) {
  return inverse_kinematics(world_to_body(world_velocity, est.theta), geometry);
}

double motor_pid(double setpoint, double measured, const PidGains& g, PidState& s,
                 std::int64_t dt_ms) {
  const double dt = static_cast<double>(dt_ms) * 1e-3;
  const double e = setpoint - measured;
  s.integral = std::clamp(s.integral + e * dt, -g.integral_limit, g.integral_limit);
  const double derivative = (s.primed && dt > 0) ? (e - s.prev_error) / dt : 0.0;
  s.prev_error = e;
  s.primed = true;
  const double out = g.kp * e + g.ki * s.integral + g.kd * derivative;
  return std::clamp(out, -g.output_limit, g.output_limit);
}

MotorLayer::MotorLayer(PidGains gains, double wheel_speed_max)
    : gains_(gains), wheel_speed_max_(wheel_speed_max) {}

DriveCommand MotorLayer::drive(const DriveCommand& q_d, const WheelSpeeds& encoders,
                               std::int64_t dt_ms) {
  feedback_ = encoders;
  DriveCommand out = q_d;
  for (std::size_t i = 0; i < 4; ++i) {
    const double trim = motor_pid(q_d.wheels[i], encoders[i], gains_, pid_[i], dt_ms);
    out.wheels[i] = std::clamp(q_d.wheels[i] + trim, -wheel_speed_max_, wheel_speed_max_);
  }
  return out;
}

void MotorLayer::reset() {
  pid_ = {};
  feedback_ = {};
}

Twist2D twin_correct(const Twist2D& nominal_world, const EstimatedState& est,
                     const ModelParams* model, const NominalModel& twin_nominal,
                     const CorrectorConfig& config) {
  if (model == nullptr) throw ModelUnavailable("no model snapshot");
  if (!model->converged) throw ModelUnavailable("model snapshot not converged");

  const double lever = twin_nominal.geometry.half_length + twin_nominal.geometry.half_width;
  const Twist2D desired = world_to_body(nominal_world, est.theta);
  auto g = [&](const Twist2D& u) { return predict_settled_twist(*model, twin_nominal, u); };

  const Twist2D g0 = g(desired);
  Eigen::Matrix3d J;
  for (int j = 0; j < 3; ++j) {
    Eigen::Vector3d du = Eigen::Vector3d::Zero();
    du(j) = config.jacobian_step;
    J.col(j) = (as_vec(g(as_twist(as_vec(desired) + du))) - as_vec(g0)) / config.jacobian_step;
  }
  Eigen::Matrix3d J_inv = Eigen::Matrix3d::Identity();
  Eigen::FullPivLU<Eigen::Matrix3d> lu(J);
  if (lu.isInvertible() && std::abs(J.determinant()) > 1e-6) J_inv = lu.inverse();

  Twist2D u = desired;
  Twist2D best = desired;
  double best_err = twist_error(desired, g0, lever);
  double err = best_err;
  for (int k = 0; k < config.iterations && err > 0.0; ++k) {
    const Eigen::Vector3d step = J_inv * (as_vec(desired) - as_vec(g(u)));
    // Backtrack by gamma until the predicted error drops; a full step is
    // exact when the model is linear in the command.
    double scale = 1.0;
    Twist2D trial = u;
    double trial_err = err;
    for (int b = 0; b < 8; ++b) {
      trial = as_twist(as_vec(u) + scale * step);
      trial_err = twist_error(desired, g(trial), lever);
      if (trial_err < err) break;
      scale *= config.gamma;
    }
    if (!(trial_err < err)) break;
    u = trial;
    err = trial_err;
    if (err < best_err) {
      best = u;
      best_err = err;
    }
  }
  return body_to_world(best, est.theta);
}

Twist2D twin_correct_or_nominal(const Twist2D& nominal_world, const EstimatedState& est,
                                const ModelParams* model, const NominalModel& twin_nominal,
                                const CorrectorConfig& config) {
  try {
    return twin_correct(nominal_world, est, model, twin_nominal, config);
  } catch (const ModelUnavailable&) {
    return nominal_world;
  }
}

WaypointController::WaypointController(WaypointPlan plan, ControllerConfig config,
                                       ChassisGeometry geometry, NominalModel twin_nominal)
    : plan_(std::move(plan)),
      config_(config),
      geometry_(geometry),
      twin_nominal_(std::move(twin_nominal)) {
  plan_.validate();
}

void WaypointController::reset_plan() { plan_.index = 0; }

ControlOutput WaypointController::decide(const EstimatedState& est, const ModelParams* model) {
  ControlOutput out;
  const PointPx pos = est.position_px();
  plan_ = advance_waypoint(pos, plan_);
  out.target_index = plan_.index;
  if (plan_.complete()) {
    out.setpoint = pos;
    out.complete = true;
    return out;
  }

  out.setpoint = waypoint_setpoint(pos, plan_);
  const double period = config_.setpoint_period_ms * 1e-3;
  Twist2D v{(out.setpoint.x - pos.x) * kMmPerPixel / period,
            (out.setpoint.y - pos.y) * kMmPerPixel / period, 0.0};
  const double speed = std::hypot(v.vx, v.vy);
  if (speed > config_.max_speed) {
    v.vx *= config_.max_speed / speed;
    v.vy *= config_.max_speed / speed;
  }

  if (is_holonomic(geometry_.kind)) {
    v.omega = config_.heading_gain * wrap_angle(config_.heading_ref - est.theta);
  } else {
    // Steer toward the set point and drive along the current heading.
    const double bearing = std::atan2(v.vy, v.vx);
    const double along = std::hypot(v.vx, v.vy) * std::cos(wrap_angle(bearing - est.theta));
    const double omega = speed > 0 ? config_.heading_gain * wrap_angle(bearing - est.theta) : 0.0;
    v = body_to_world({std::max(along, 0.0), 0.0, omega}, est.theta);
  }
  out.nominal_world = v;

  out.command_world = v;
  if (model != nullptr && model->converged) {
    out.command_world = twin_correct_or_nominal(v, est, model, twin_nominal_, config_.corrector);
    out.corrected = true;
  }
  out.body_command = world_to_body(out.command_world, est.theta);
  out.q_d = is_holonomic(geometry_.kind) ? allocate_dynamic(out.command_world, est, geometry_)
                                         : inverse_kinematics_clamped(out.body_command, geometry_);
  return out;
}

}  // namespace twinbed
