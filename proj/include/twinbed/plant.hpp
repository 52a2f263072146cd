#pragma once

#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

#include "twinbed/core.hpp"
#include "twinbed/kinematics.hpp"
#include "twinbed/noise.hpp"

namespace twinbed {

/// Ground-truth dynamics and sensor noise of the simulated physical robot.
/// None of the disturbance terms are visible to the twin; it has to learn them.
struct PlantParams {
  ChassisGeometry geometry;

  double motor_gain = 1.0;        // steady-state wheel speed / command
  double motor_tau_ms = 40.0;     // first-order actuator lag
  double wheel_speed_max = 12.0;  // rad/s

  double slip_long = 0.0;          // [0, 1), scales body vx
  double slip_lat = 0.0;           // lateral drift, mm/s of vy per mm/s of vx
  double coulomb_friction = 0.0;   // mm/s^2, applied over one tick
  double viscous_friction = 0.0;   // 1/s
  double stiction_speed = 0.0;     // mm/s breakaway speed

  double process_noise_sigma = 0.0;  // mm/s on vx, vy
  double process_noise_omega = 0.0;  // rad/s on omega

  double accel_sigma = 0.0;    // mm/s^2
  double gyro_sigma = 0.0;     // rad/s
  double mag_sigma = 0.0;      // rad
  double encoder_sigma = 0.0;  // rad/s
  double pixel_sigma = 0.0;    // px
  double camera_theta_sigma = 0.0;  // rad

  /// Throws ConfigInvalid when an invariant does not hold.
  void validate() const;

  /// Same parameters with every disturbance and noise term zeroed.
  PlantParams disturbance_free() const;
};

struct PlantState {
  Pose2D pose;
  Twist2D twist;  // world frame
  WheelSpeeds wheel_actual;
  double steering = 0.0;
  Timestamp t;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct SensorFrame {
  Vec3 accel;  // mm/s^2, world frame; z carries gravity
  double gyro = 0.0;       // rad/s
  double mag_theta = 0.0;  // rad
  WheelSpeeds encoders;
  Timestamp t;
};

struct CameraObservation {
  std::uint8_t robot_id = 0;
  PixelPose pixel_pose;
  Timestamp t;
};

/// Advances the plant by dt_ms:
///   1. wheels lag toward motor_gain * clamp(cmd) with time constant motor_tau
///   2. ideal body twist from forward kinematics
///   3. slip, viscous drag, Coulomb loss and stiction
///   4. additive process noise
///   5. semi-implicit Euler pose update
/// Throws NonFiniteState if the result is not finite.
PlantState plant_step(const PlantState& state, const DriveCommand& cmd, const PlantParams& params,
                      std::int64_t dt_ms, NoiseSource& rng);
PlantState plant_step(const PlantState& state, const WheelSpeeds& cmd, const PlantParams& params,
                      std::int64_t dt_ms, NoiseSource& rng);

SensorFrame sense(const PlantState& state, const Twist2D& prev_twist, const PlantParams& params,
                  std::int64_t dt_ms, NoiseSource& rng);

/// Emits a quantized overhead-camera detection on 8 ms ticks, nothing otherwise.
std::optional<CameraObservation> observe_camera(const PlantState& state, const PlantParams& params,
                                                NoiseSource& rng, std::uint8_t robot_id = 1);

// Link budget: 12 ms radio one-way plus 13 ms processing on the command path,
// 6 ms image processing plus 1 ms fusion on the observation path.
inline constexpr std::int64_t kCommandLatencyMs = 25;
inline constexpr std::int64_t kObservationLatencyMs = 7;

/// FIFO with a fixed transport delay. Entries become visible once
/// now >= push time + latency; pops return them in push order.
template <typename T>
class DelayQueue {
 public:
  explicit DelayQueue(std::int64_t latency_ms = 0) : latency_ms_(latency_ms) {}

  std::int64_t latency_ms() const { return latency_ms_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  void push(T payload, Timestamp now) {
    check_monotone(now);
    entries_.push_back({Timestamp{now.ms + latency_ms_}, std::move(payload)});
  }

  /// Removes and returns every entry due at `now`, oldest first.
  std::vector<T> pop(Timestamp now) {
    check_monotone(now);
    std::vector<T> out;
    while (!entries_.empty() && entries_.front().deliver_at <= now) {
      out.push_back(std::move(entries_.front().payload));
      entries_.pop_front();
    }
    return out;
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Timestamp deliver_at;
    T payload;
  };

  void check_monotone(Timestamp now) {
    if (now < last_) throw std::logic_error("DelayQueue: time went backwards");
    last_ = now;
  }

  std::int64_t latency_ms_;
  Timestamp last_{-1};
  std::deque<Entry> entries_;
};

}  // namespace twinbed
