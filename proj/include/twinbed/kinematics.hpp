#pragma once

#include "twinbed/core.hpp"

namespace twinbed {

struct ChassisGeometry {
  double wheel_radius = 50.0;  // mm
  double half_length = 175.0;  // mm, L
  double half_width = 175.0;   // mm, W
  ChassisKind kind = ChassisKind::Omni4;
  double wheelbase = 300.0;    // mm, steered kinds only

  /// Throws ConfigInvalid if any length is not strictly positive.
  void validate() const;
};

inline constexpr double kMaxSteeringRad = std::numbers::pi / 6.0;  // 30 deg

/// Wheel speeds plus the steering-gear angle (zero for unsteered kinds).
struct DriveCommand {
  WheelSpeeds wheels;
  double steering = 0.0;  // rad
};

/// Body twist -> per-wheel speeds.
///
/// Omni4 uses the X-configuration Jacobian
///   r_i = (vx*a_i + vy*b_i + (L+W)*c_i*omega) / R
/// with a = (1,1,1,1), b = (-1,1,1,-1), c = (-1,-1,1,1). Wheel numbering and
/// mounting angles of the real robot are unknown, so these sign patterns are
/// a convention. Diff2 (and Diff2x2, wheels paired as left,right,left,right)
/// uses r_left = (vx - W*omega)/R, r_right = (vx + W*omega)/R. Steered kinds
/// use a kinematic bicycle model about the rear axle.
///
/// Throws NonholonomicViolation when the chassis cannot realize the twist
/// (lateral velocity without an omni base, or steering beyond 30 degrees).
DriveCommand inverse_kinematics(const Twist2D& body, const ChassisGeometry& geometry);

/// Like inverse_kinematics but projects an unreachable twist onto the
/// chassis' feasible set (drops vy, clamps steering) instead of throwing.
DriveCommand inverse_kinematics_clamped(const Twist2D& body, const ChassisGeometry& geometry);

/// Least-squares inverse of inverse_kinematics; exact on consistent inputs.
Twist2D forward_kinematics(const WheelSpeeds& wheels, const ChassisGeometry& geometry,
                           double steering = 0.0);
Twist2D forward_kinematics(const DriveCommand& cmd, const ChassisGeometry& geometry);

/// Rotates the linear part of a twist by theta (body -> world).
Twist2D body_to_world(const Twist2D& body, double theta);
Twist2D world_to_body(const Twist2D& world, double theta);

}  // namespace twinbed
