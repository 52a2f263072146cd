#include "twinbed/plant.hpp"

#include <algorithm>

namespace twinbed {

void PlantParams::validate() const {
  geometry.validate();
  if (!(motor_tau_ms > 0)) throw ConfigInvalid("motor_tau_ms must be > 0");
  if (!(wheel_speed_max > 0)) throw ConfigInvalid("wheel_speed_max must be > 0");
  if (!(slip_long >= 0 && slip_long < 1)) throw ConfigInvalid("slip_long must be in [0, 1)");
  for (double s : {process_noise_sigma, process_noise_omega, accel_sigma, gyro_sigma, mag_sigma,
                   encoder_sigma, pixel_sigma, camera_theta_sigma}) {
    if (!(s >= 0)) throw ConfigInvalid("noise sigmas must be >= 0");
  }
  if (coulomb_friction < 0 || viscous_friction < 0 || stiction_speed < 0) {
    throw ConfigInvalid("friction terms must be >= 0");
  }
}

PlantParams PlantParams::disturbance_free() const {
  PlantParams p;
  p.geometry = geometry;
  p.motor_gain = 1.0;
  p.motor_tau_ms = motor_tau_ms;
  p.wheel_speed_max = wheel_speed_max;
  return p;
}

PlantState plant_step(const PlantState& s, const DriveCommand& cmd, const PlantParams& p,
                      std::int64_t dt_ms, NoiseSource& rng) {
  if (dt_ms <= 0) throw std::invalid_argument("plant_step: dt must be positive");
  if (!cmd.wheels.finite()) throw NonFiniteState("wheel command is not finite");

  const double dt = static_cast<double>(dt_ms) * 1e-3;
  const double lag = 1.0 - std::exp(-static_cast<double>(dt_ms) / p.motor_tau_ms);
  const int motors = motor_count(p.geometry.kind);

  PlantState next = s;
  next.t = Timestamp{s.t.ms + dt_ms};
  next.steering = std::clamp(cmd.steering, -kMaxSteeringRad, kMaxSteeringRad);

  Twist2D commanded_body;
  {
    WheelSpeeds clamped;
    for (int i = 0; i < motors; ++i) {
      const auto k = static_cast<std::size_t>(i);
      clamped[k] = std::clamp(cmd.wheels[k], -p.wheel_speed_max, p.wheel_speed_max);
      const double target = p.motor_gain * clamped[k];
      double w = s.wheel_actual[k] + lag * (target - s.wheel_actual[k]);
      next.wheel_actual[k] = std::clamp(w, -p.wheel_speed_max, p.wheel_speed_max);
    }
    commanded_body = forward_kinematics(clamped, p.geometry, next.steering);
  }

  Twist2D body = forward_kinematics(next.wheel_actual, p.geometry, next.steering);

  // Slip: longitudinal loss and lateral drift coupled to forward speed.
  const double vx_ideal = body.vx;
  body.vx = vx_ideal * (1.0 - p.slip_long);
  body.vy = body.vy + p.slip_lat * vx_ideal;

  // Viscous drag and Coulomb loss act on the translational velocity.
  const double drag = std::max(0.0, 1.0 - p.viscous_friction * dt);
  body.vx *= drag;
  body.vy *= drag;
  const double speed = body.speed();
  if (speed > 0.0) {
    const double shrink = std::max(0.0, speed - p.coulomb_friction * dt) / speed;
    body.vx *= shrink;
    body.vy *= shrink;
  }
  if (body.speed() < p.stiction_speed && commanded_body.speed() < p.stiction_speed) {
    body.vx = 0.0;
    body.vy = 0.0;
  }

  body.vx += rng.gaussian(p.process_noise_sigma);
  body.vy += rng.gaussian(p.process_noise_sigma);
  body.omega += rng.gaussian(p.process_noise_omega);

  next.twist = body_to_world(body, s.pose.theta);
  next.pose.x = s.pose.x + next.twist.vx * dt;
  next.pose.y = s.pose.y + next.twist.vy * dt;
  next.pose.theta = wrap_angle(s.pose.theta + next.twist.omega * dt);

  if (!next.twist.finite() || !std::isfinite(next.pose.x) || !std::isfinite(next.pose.y) ||
      !std::isfinite(next.pose.theta)) {
    throw NonFiniteState("plant state diverged at t=" + std::to_string(next.t.ms) + " ms");
  }
  return next;
}

PlantState plant_step(const PlantState& state, const WheelSpeeds& cmd, const PlantParams& params,
                      std::int64_t dt_ms, NoiseSource& rng) {
  return plant_step(state, DriveCommand{cmd, state.steering}, params, dt_ms, rng);
}

SensorFrame sense(const PlantState& s, const Twist2D& prev_twist, const PlantParams& p,
                  std::int64_t dt_ms, NoiseSource& rng) {
  if (dt_ms <= 0) throw std::invalid_argument("sense: dt must be positive");
  const double dt = static_cast<double>(dt_ms) * 1e-3;
  SensorFrame f;
  f.t = s.t;
  f.accel.x = (s.twist.vx - prev_twist.vx) / dt + rng.gaussian(p.accel_sigma);
  f.accel.y = (s.twist.vy - prev_twist.vy) / dt + rng.gaussian(p.accel_sigma);
  f.accel.z = kGravityMmS2 + rng.gaussian(p.accel_sigma);
  f.gyro = s.twist.omega + rng.gaussian(p.gyro_sigma);
  f.mag_theta = wrap_angle(s.pose.theta + rng.gaussian(p.mag_sigma));
  for (std::size_t i = 0; i < 4; ++i) {
    f.encoders[i] = s.wheel_actual[i] + rng.gaussian(p.encoder_sigma);
  }
  return f;
}

std::optional<CameraObservation> observe_camera(const PlantState& s, const PlantParams& p,
                                                NoiseSource& rng, std::uint8_t robot_id) {
  if (s.t.ms % kTickMs != 0) return std::nullopt;
  CameraObservation obs;
  obs.robot_id = robot_id;
  obs.t = s.t;
  const double u = s.pose.x / kMmPerPixel + rng.gaussian(p.pixel_sigma);
  const double v = s.pose.y / kMmPerPixel + rng.gaussian(p.pixel_sigma);
  obs.pixel_pose.u = static_cast<std::int64_t>(std::round(u));
  obs.pixel_pose.v = static_cast<std::int64_t>(std::round(v));
  obs.pixel_pose.theta = wrap_angle(s.pose.theta + rng.gaussian(p.camera_theta_sigma));
  return obs;
}

}  // namespace twinbed
