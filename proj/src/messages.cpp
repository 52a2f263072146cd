#include "twinbed/messages.hpp"

namespace twinbed {
namespace {

constexpr double kDegPerRad = 180.0 / std::numbers::pi;

Frame make_frame(MsgType type, std::uint8_t robot_id, Timestamp t) {
  Frame f;
  f.msg_type = static_cast<std::uint8_t>(type);
  f.robot_id = robot_id;
  f.timestamp = static_cast<std::uint32_t>(t.ms);
  return f;
}

void expect(const Frame& f, std::size_t fields) {
  if (f.fields.size() != fields) {
    throw MalformedFrame("expected " + std::to_string(fields) + " fields, got " +
                         std::to_string(f.fields.size()));
  }
}

}  // namespace

Frame pack_state(const StateMsg& m, MsgType type) {
  Frame f = make_frame(type, m.robot_id, m.t);
  f.fields = {pack_fixed(m.pose.x / kMmPerPixel), pack_fixed(m.pose.y / kMmPerPixel),
              pack_fixed(m.pose.theta * kDegPerRad), pack_fixed(m.twist.vx),
              pack_fixed(m.twist.vy), pack_fixed(m.twist.omega * kDegPerRad)};
  return f.seal();
}

StateMsg unpack_state(const Frame& f) {
  expect(f, 6);
  StateMsg m;
  m.t = Timestamp{f.timestamp};
  m.robot_id = f.robot_id;
  m.pose = Pose2D(unpack_fixed(f.fields[0]) * kMmPerPixel, unpack_fixed(f.fields[1]) * kMmPerPixel,
                  unpack_fixed(f.fields[2]) / kDegPerRad);
  m.twist = {unpack_fixed(f.fields[3]), unpack_fixed(f.fields[4]),
             unpack_fixed(f.fields[5]) / kDegPerRad};
  return m;
}

Frame pack_command(const CommandMsg& m) {
  Frame f = make_frame(MsgType::PlantCommand, m.robot_id, m.t);
  f.fields = {pack_fixed(m.command.vx), pack_fixed(m.command.vy),
              pack_fixed(m.command.omega * kDegPerRad)};
  return f.seal();
}

CommandMsg unpack_command(const Frame& f) {
  expect(f, 3);
  CommandMsg m;
  m.t = Timestamp{f.timestamp};
  m.robot_id = f.robot_id;
  m.command = {unpack_fixed(f.fields[0]), unpack_fixed(f.fields[1]),
               unpack_fixed(f.fields[2]) / kDegPerRad};
  return m;
}

Frame pack_camera(std::uint8_t robot_id, const PixelPose& p, Timestamp t) {
  Frame f = make_frame(MsgType::PlantCamera, robot_id, t);
  f.fields = {pack_fixed(static_cast<double>(p.u)), pack_fixed(static_cast<double>(p.v)),
              pack_fixed(p.theta * kDegPerRad)};
  return f.seal();
}

PixelPose unpack_camera(const Frame& f) {
  expect(f, 3);
  PixelPose p;
  p.u = f.fields[0] / 10;
  p.v = f.fields[1] / 10;
  p.theta = wrap_angle(unpack_fixed(f.fields[2]) / kDegPerRad);
  return p;
}

Frame pack_setpoint(const SetpointMsg& m) {
  Frame f = make_frame(MsgType::ControlSetpoint, m.robot_id, m.t);
  f.fields = {pack_fixed(m.setpoint.x), pack_fixed(m.setpoint.y),
              static_cast<std::int16_t>(m.target_index), static_cast<std::int16_t>(m.corrected)};
  return f.seal();
}

SetpointMsg unpack_setpoint(const Frame& f) {
  expect(f, 4);
  SetpointMsg m;
  m.t = Timestamp{f.timestamp};
  m.robot_id = f.robot_id;
  m.setpoint = {unpack_fixed(f.fields[0]), unpack_fixed(f.fields[1])};
  m.target_index = f.fields[2];
  m.corrected = f.fields[3] != 0;
  return m;
}

}  // namespace twinbed
