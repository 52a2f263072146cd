#include "twinbed/twin.hpp"

#include <algorithm>

namespace twinbed {

TwinState twin_step(const TwinState& s, const Twist2D& command, const ModelParams& model,
                    const NominalModel& nominal, std::int64_t dt_ms) {
  if (dt_ms <= 0) throw std::invalid_argument("twin_step: dt must be positive");
  const double dt = static_cast<double>(dt_ms) * 1e-3;

  TwinState next = s;
  next.t = Timestamp{s.t.ms + dt_ms};
  next.model_version = std::max(s.model_version, model.version);

  const double steering = inverse_kinematics_clamped(command, nominal.geometry).steering;
  const Twist2D actuator_now = forward_kinematics(s.wheels, nominal.geometry, steering);
  const Twist2D body = nominal.step(next.wheels, command, dt_ms) +
                       model.predict_residual(actuator_now, command);

  next.twist = body_to_world(body, s.pose.theta);
  next.pose.x = s.pose.x + next.twist.vx * dt;
  next.pose.y = s.pose.y + next.twist.vy * dt;
  next.pose.theta = wrap_angle(s.pose.theta + next.twist.omega * dt);
  if (!next.twist.finite()) throw NonFiniteState("twin twist diverged");
  return next;
}

TwinState twin_step(const TwinState& state, const WheelSpeeds& wheel_command,
                    const ModelParams& model, const NominalModel& nominal, std::int64_t dt_ms) {
  return twin_step(state, forward_kinematics(wheel_command, nominal.geometry), model, nominal,
                   dt_ms);
}

std::vector<TwinState> twin_rollout(const TwinState& state, std::span<const Twist2D> commands,
                                    const ModelParams& model, const NominalModel& nominal,
                                    std::int64_t dt_ms) {
  if (commands.empty()) throw std::invalid_argument("twin_rollout: empty command sequence");
  std::vector<TwinState> out;
  out.reserve(commands.size() + 1);
  out.push_back(state);
  for (const auto& u : commands) out.push_back(twin_step(out.back(), u, model, nominal, dt_ms));
  return out;
}

TwinState twin_sync(const TwinState& state, const CameraObservation& obs) {
  if (obs.t < state.t) {
    throw StaleObservation("observation at " + std::to_string(obs.t.ms) +
                           " ms is older than twin state at " + std::to_string(state.t.ms) + " ms");
  }
  TwinState next = state;
  next.pose = Pose2D(px_to_mm(static_cast<double>(obs.pixel_pose.u)),
                     px_to_mm(static_cast<double>(obs.pixel_pose.v)), obs.pixel_pose.theta);
  next.t = obs.t;
  return next;
}

Twist2D predict_settled_twist(const ModelParams& model, const NominalModel& nominal,
                              const Twist2D& command) {
  const DriveCommand target = inverse_kinematics_clamped(command, nominal.geometry);
  WheelSpeeds wheels;
  for (std::size_t i = 0; i < 4; ++i) {
    wheels[i] = std::clamp(target.wheels[i], -nominal.wheel_speed_max, nominal.wheel_speed_max);
  }
  const Twist2D base = forward_kinematics(wheels, nominal.geometry, target.steering);
  return base + model.predict_residual(base, command);
}

}  // namespace twinbed
