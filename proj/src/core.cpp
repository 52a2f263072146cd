#include "twinbed/core.hpp"

namespace twinbed {

double wrap_angle(double theta) {
  constexpr double kPi = std::numbers::pi;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double r = std::fmod(theta, kTwoPi);  // (-2pi, 2pi)
  if (r > kPi) r -= kTwoPi;
  if (r <= -kPi) r += kTwoPi;
  return r;
}

double px_to_mm(double px) { return px * kMmPerPixel; }

std::int64_t mm_to_px(double mm) {
  return static_cast<std::int64_t>(std::round(mm / kMmPerPixel));
}

int motor_count(ChassisKind kind) {
  switch (kind) {
    case ChassisKind::Omni4:
    case ChassisKind::WD4:
    case ChassisKind::Diff2x2:
      return 4;
    case ChassisKind::Diff2:
    case ChassisKind::FWD:
    case ChassisKind::RWD:
      return 2;
  }
  return 0;
}

bool has_steering_gear(ChassisKind kind) {
  return kind == ChassisKind::FWD || kind == ChassisKind::RWD || kind == ChassisKind::WD4;
}

bool is_holonomic(ChassisKind kind) { return kind == ChassisKind::Omni4; }

const char* to_string(ChassisKind kind) {
  switch (kind) {
    case ChassisKind::Omni4: return "omni4";
    case ChassisKind::Diff2: return "diff2";
    case ChassisKind::FWD: return "fwd";
    case ChassisKind::RWD: return "rwd";
    case ChassisKind::WD4: return "4wd";
    case ChassisKind::Diff2x2: return "diff2x2";
  }
  return "?";
}

ChassisKind chassis_from_string(const std::string& name) {
  for (auto k : {ChassisKind::Omni4, ChassisKind::Diff2, ChassisKind::FWD, ChassisKind::RWD,
                 ChassisKind::WD4, ChassisKind::Diff2x2}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigInvalid("unknown chassis kind '" + name + "'");
}

}  // namespace twinbed
