#pragma once

#include <span>
#include <vector>

#include "twinbed/core.hpp"
#include "twinbed/learning.hpp"
#include "twinbed/plant.hpp"

namespace twinbed {

/// State of the virtual robot. Shares the plant's pose/twist schema; the
/// wheel vector is the nominal actuator state of the analytic model.
struct TwinState {
  Pose2D pose;
  Twist2D twist;  // world frame
  WheelSpeeds wheels;
  Timestamp t;
  std::uint64_t model_version = 0;
};

/// next twist = nominal kinematic response + learned residual of (nominal
/// actuator twist, command), then the same semi-implicit Euler update as the
/// plant. Noise-free.
TwinState twin_step(const TwinState& state, const Twist2D& body_command, const ModelParams& model,
                    const NominalModel& nominal, std::int64_t dt_ms);
TwinState twin_step(const TwinState& state, const WheelSpeeds& wheel_command,
                    const ModelParams& model, const NominalModel& nominal, std::int64_t dt_ms);

/// Iterated twin_step; returns commands.size() + 1 states starting with `state`.
std::vector<TwinState> twin_rollout(const TwinState& state, std::span<const Twist2D> commands,
                                    const ModelParams& model, const NominalModel& nominal,
                                    std::int64_t dt_ms);

/// Resets the pose to a camera detection. Throws StaleObservation if the
/// detection is older than the twin state.
TwinState twin_sync(const TwinState& state, const CameraObservation& observation);

/// Body twist the twin settles to when `command` is held: the actuators
/// reach their set point and the residual is evaluated there.
Twist2D predict_settled_twist(const ModelParams& model, const NominalModel& nominal,
                              const Twist2D& body_command);

}  // namespace twinbed
