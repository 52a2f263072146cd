#include "twinbed/kinematics.hpp"

#include <algorithm>
#include <string>

namespace twinbed {
namespace {

constexpr std::array<double, 4> kOmniA{1, 1, 1, 1};
constexpr std::array<double, 4> kOmniB{-1, 1, 1, -1};
constexpr std::array<double, 4> kOmniC{-1, -1, 1, 1};

constexpr double kLateralTolerance = 1e-9;

}  // namespace

void ChassisGeometry::validate() const {
  if (!(wheel_radius > 0) || !(half_length > 0) || !(half_width > 0) || !(wheelbase > 0)) {
    throw ConfigInvalid("chassis lengths must be positive");
  }
}

DriveCommand inverse_kinematics(const Twist2D& body, const ChassisGeometry& g) {
  DriveCommand out;
  const double R = g.wheel_radius;

  if (g.kind == ChassisKind::Omni4) {
    const double lw = g.half_length + g.half_width;
    for (std::size_t i = 0; i < 4; ++i) {
      out.wheels[i] = (body.vx * kOmniA[i] + body.vy * kOmniB[i] + lw * kOmniC[i] * body.omega) / R;
    }
    return out;
  }

  if (std::abs(body.vy) > kLateralTolerance) {
    throw NonholonomicViolation(std::string(to_string(g.kind)) +
                                " chassis cannot translate laterally (vy=" +
                                std::to_string(body.vy) + ")");
  }

  switch (g.kind) {
    case ChassisKind::Diff2:
    case ChassisKind::Diff2x2: {
      const double left = (body.vx - g.half_width * body.omega) / R;
      const double right = (body.vx + g.half_width * body.omega) / R;
      out.wheels[0] = left;
      out.wheels[1] = right;
      if (g.kind == ChassisKind::Diff2x2) {
        out.wheels[2] = left;
        out.wheels[3] = right;
      }
      return out;
    }
    case ChassisKind::FWD:
    case ChassisKind::RWD:
    case ChassisKind::WD4: {
      double delta = 0.0;
      if (body.omega != 0.0) {
        if (body.vx == 0.0) {
          throw NonholonomicViolation("bicycle chassis cannot rotate in place");
        }
        delta = std::atan(body.omega * g.wheelbase / body.vx);
      }
      if (std::abs(delta) > kMaxSteeringRad + 1e-12) {
        throw NonholonomicViolation("steering angle beyond 30 degrees");
      }
      out.steering = delta;
      const double rear = body.vx / R;
      const double front = body.vx / (R * std::cos(delta));
      if (g.kind == ChassisKind::RWD) {
        out.wheels[0] = out.wheels[1] = rear;
      } else if (g.kind == ChassisKind::FWD) {
        out.wheels[0] = out.wheels[1] = front;
      } else {
        out.wheels[0] = out.wheels[1] = rear;
        out.wheels[2] = out.wheels[3] = front;
      }
      return out;
    }
    case ChassisKind::Omni4:
      break;
  }
  return out;
}

DriveCommand inverse_kinematics_clamped(const Twist2D& body, const ChassisGeometry& g) {
  if (is_holonomic(g.kind)) return inverse_kinematics(body, g);
  Twist2D t{body.vx, 0.0, body.omega};
  if (has_steering_gear(g.kind)) {
    if (t.vx == 0.0) {
      t.omega = 0.0;
    } else {
      const double limit = std::abs(t.vx) * std::tan(kMaxSteeringRad) / g.wheelbase;
      t.omega = std::clamp(t.omega, -limit, limit);
    }
  }
  return inverse_kinematics(t, g);
}

Twist2D forward_kinematics(const WheelSpeeds& w, const ChassisGeometry& g, double steering) {
  const double R = g.wheel_radius;
  Twist2D t;

  switch (g.kind) {
    case ChassisKind::Omni4: {
      // The Jacobian columns are mutually orthogonal, so the pseudo-inverse
      // reduces to per-column projections.
      const double lw = g.half_length + g.half_width;
      double sa = 0, sb = 0, sc = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        sa += kOmniA[i] * w[i];
        sb += kOmniB[i] * w[i];
        sc += kOmniC[i] * w[i];
      }
      t.vx = R * sa / 4.0;
      t.vy = R * sb / 4.0;
      t.omega = R * sc / (4.0 * lw);
      return t;
    }
    case ChassisKind::Diff2:
    case ChassisKind::Diff2x2: {
      double left = w[0];
      double right = w[1];
      if (g.kind == ChassisKind::Diff2x2) {
        left = 0.5 * (w[0] + w[2]);
        right = 0.5 * (w[1] + w[3]);
      }
      t.vx = R * (left + right) / 2.0;
      t.omega = R * (right - left) / (2.0 * g.half_width);
      return t;
    }
    case ChassisKind::FWD:
    case ChassisKind::RWD:
    case ChassisKind::WD4: {
      // Each driven wheel k observes vx * factor_k / R; least squares over
      // the driven set gives vx = R * sum(f_k r_k) / sum(f_k^2).
      const double front_factor = 1.0 / std::cos(steering);
      double num = 0, den = 0;
      auto add = [&](double factor, double r) {
        num += factor * r;
        den += factor * factor;
      };
      if (g.kind == ChassisKind::RWD) {
        add(1.0, w[0]);
        add(1.0, w[1]);
      } else if (g.kind == ChassisKind::FWD) {
        add(front_factor, w[0]);
        add(front_factor, w[1]);
      } else {
        add(1.0, w[0]);
        add(1.0, w[1]);
        add(front_factor, w[2]);
        add(front_factor, w[3]);
      }
      t.vx = R * num / den;
      t.omega = t.vx * std::tan(steering) / g.wheelbase;
      return t;
    }
  }
  return t;
}

Twist2D forward_kinematics(const DriveCommand& cmd, const ChassisGeometry& g) {
  return forward_kinematics(cmd.wheels, g, cmd.steering);
}

Twist2D body_to_world(const Twist2D& b, double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  return {c * b.vx - s * b.vy, s * b.vx + c * b.vy, b.omega};
}

Twist2D world_to_body(const Twist2D& w, double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  return {c * w.vx + s * w.vy, -s * w.vx + c * w.vy, w.omega};
}

}  // namespace twinbed
