#pragma once

#include <optional>

#include "twinbed/bus.hpp"
#include "twinbed/core.hpp"

namespace twinbed {

// Payload schemas for the bus topics. Every field is packed with pack_fixed,
// i.e. physical value x10 in a signed 16-bit word:
//   positions in pixels, linear velocities in mm/s, angles in degrees,
//   angular velocities in degrees/s.
enum class MsgType : std::uint8_t {
  PlantState = 0x01,
  PlantCommand = 0x02,
  PlantCamera = 0x03,
  TwinState = 0x04,
  ControlSetpoint = 0x05,
  SnapshotHeader = 0x10,
  SnapshotChunk = 0x11,
};

/// Pose and world twist of a robot (plant or twin).
struct StateMsg {
  Timestamp t;
  std::uint8_t robot_id = 1;
  Pose2D pose;
  Twist2D twist;
};

/// Body-frame twist command that took effect at `t`.
struct CommandMsg {
  Timestamp t;
  std::uint8_t robot_id = 1;
  Twist2D command;
};

struct SetpointMsg {
  Timestamp t;
  std::uint8_t robot_id = 1;
  PointPx setpoint;
  int target_index = 0;
  bool corrected = false;
};

Frame pack_state(const StateMsg& m, MsgType type = MsgType::PlantState);
StateMsg unpack_state(const Frame& f);

Frame pack_command(const CommandMsg& m);
CommandMsg unpack_command(const Frame& f);

Frame pack_camera(std::uint8_t robot_id, const PixelPose& p, Timestamp t);
PixelPose unpack_camera(const Frame& f);

Frame pack_setpoint(const SetpointMsg& m);
SetpointMsg unpack_setpoint(const Frame& f);

}  // namespace twinbed
