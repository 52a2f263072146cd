#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace twinbed {

// ---------------------------------------------------------------------------
// Errors. Every failure mode has its own type so callers can catch narrowly.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TWINBED_ERROR(Name)                \
  class Name : public Error {              \
   public:                                 \
    explicit Name(const std::string& msg)  \
        : Error(#Name ": " + msg) {}       \
  }

TWINBED_ERROR(NonholonomicViolation);
TWINBED_ERROR(NonFiniteState);
TWINBED_ERROR(PlanExhausted);
TWINBED_ERROR(ModelUnavailable);
TWINBED_ERROR(StaleObservation);
TWINBED_ERROR(RankDeficient);
TWINBED_ERROR(Diverged);
TWINBED_ERROR(ChecksumMismatch);
TWINBED_ERROR(CursorLagged);
TWINBED_ERROR(MalformedFrame);
TWINBED_ERROR(FieldOverflow);
TWINBED_ERROR(IoFailure);
TWINBED_ERROR(ConfigInvalid);
TWINBED_ERROR(LengthMismatch);

#undef TWINBED_ERROR

// ---------------------------------------------------------------------------
// Units and conventions.
//
// World frame: origin at the arena corner, x right, y up, angles CCW positive.
// Lengths are millimeters, time is integer milliseconds, angles are radians.
// One overhead-camera pixel is 2.5 mm, so pixel (u, v) sits at (2.5u, 2.5v).
// ---------------------------------------------------------------------------

inline constexpr double kMmPerPixel = 2.5;
inline constexpr std::int64_t kTickMs = 8;
inline constexpr double kGravityMmS2 = 9806.65;

/// Milliseconds since experiment start.
struct Timestamp {
  std::int64_t ms = 0;

  friend constexpr auto operator<=>(const Timestamp&, const Timestamp&) = default;
  constexpr double seconds() const { return static_cast<double>(ms) * 1e-3; }
};

/// Maps theta into (-pi, pi].
double wrap_angle(double theta);

double px_to_mm(double px);
/// Divides by 2.5 and rounds half away from zero.
std::int64_t mm_to_px(double mm);

struct Pose2D {
  double x = 0.0;  // mm
  double y = 0.0;  // mm
  double theta = 0.0;

  Pose2D() = default;
  Pose2D(double x_mm, double y_mm, double theta_rad)
      : x(x_mm), y(y_mm), theta(wrap_angle(theta_rad)) {}
};

struct Twist2D {
  double vx = 0.0;     // mm/s
  double vy = 0.0;     // mm/s
  double omega = 0.0;  // rad/s

  bool finite() const {
    return std::isfinite(vx) && std::isfinite(vy) && std::isfinite(omega);
  }
  double speed() const { return std::hypot(vx, vy); }

  friend Twist2D operator+(Twist2D a, const Twist2D& b) {
    return {a.vx + b.vx, a.vy + b.vy, a.omega + b.omega};
  }
  friend Twist2D operator-(Twist2D a, const Twist2D& b) {
    return {a.vx - b.vx, a.vy - b.vy, a.omega - b.omega};
  }
  friend Twist2D operator*(double k, Twist2D a) {
    return {k * a.vx, k * a.vy, k * a.omega};
  }
  friend bool operator==(const Twist2D&, const Twist2D&) = default;
};

/// Per-wheel angular speed in rad/s. Two-wheel chassis use r[0], r[1] only.
struct WheelSpeeds {
  std::array<double, 4> r{};

  double& operator[](std::size_t i) { return r[i]; }
  double operator[](std::size_t i) const { return r[i]; }
  bool finite() const {
    for (double v : r) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
  friend bool operator==(const WheelSpeeds&, const WheelSpeeds&) = default;
};

/// Drive methods of the heterogeneous chassis family.
enum class ChassisKind { Omni4, Diff2, FWD, RWD, WD4, Diff2x2 };

/// Number of driven motors per chassis (the steering gear is not counted).
int motor_count(ChassisKind kind);
bool has_steering_gear(ChassisKind kind);
bool is_holonomic(ChassisKind kind);
const char* to_string(ChassisKind kind);
ChassisKind chassis_from_string(const std::string& name);

/// Camera-frame pose: integer pixel position plus heading.
struct PixelPose {
  std::int64_t u = 0;
  std::int64_t v = 0;
  double theta = 0.0;

  friend bool operator==(const PixelPose&, const PixelPose&) = default;
};

/// A 2-D point in pixel units (not quantized), used for setpoints and reports.
struct PointPx {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const PointPx&, const PointPx&) = default;
};

inline PointPx to_px(const Pose2D& p) { return {p.x / kMmPerPixel, p.y / kMmPerPixel}; }
inline PointPx to_px(const PixelPose& p) {
  return {static_cast<double>(p.u), static_cast<double>(p.v)};
}

}  // namespace twinbed
