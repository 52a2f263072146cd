#pragma once

// Shared fixtures for the unit tests and the acceptance binary.

#include <cmath>
#include <vector>

#include "twinbed/bus.hpp"
#include "twinbed/kinematics.hpp"
#include "twinbed/learning.hpp"
#include "twinbed/messages.hpp"
#include "twinbed/noise.hpp"
#include "twinbed/plant.hpp"

namespace twinbed::testing {

inline constexpr double kDegToRad = 3.14159265358979323846 / 180.0;

/// Random body command on the bus' fixed-point grid (0.1 mm/s, 0.1 deg/s),
/// so unpacking it from plant.command gives back the value the plant saw.
inline Twist2D grid_command(NoiseSource& rng, double vmax, double vy_max, double wmax_deg) {
  auto pick = [&](double limit) { return std::round((2.0 * rng.uniform() - 1.0) * limit * 10.0) / 10.0; };
  return {pick(vmax), pick(vy_max), pick(wmax_deg) * kDegToRad};
}

struct OpenLoopRun {
  std::vector<PlantState> states;  // states[0] is the start
  std::vector<Twist2D> commands;   // commands[k] drives states[k] -> states[k+1]
};

/// Drives an Omni4 plant open loop with piecewise-constant random commands
/// held for `hold` ticks.
inline OpenLoopRun drive_open_loop(const PlantParams& params, std::size_t ticks, std::uint64_t seed,
                                   std::size_t hold = 25) {
  NoiseSource plant_rng(seed);
  NoiseSource cmd_rng(seed ^ 0x9E3779B97F4A7C15ULL);
  OpenLoopRun run;
  PlantState s;
  s.pose = Pose2D(4000.0, 4000.0, 0.0);
  run.states.push_back(s);
  Twist2D u;
  for (std::size_t k = 0; k < ticks; ++k) {
    if (k % hold == 0) u = grid_command(cmd_rng, 250.0, 150.0, 25.0);
    s = plant_step(s, inverse_kinematics(u, params.geometry), params, kTickMs, plant_rng);
    run.commands.push_back(u);
    run.states.push_back(s);
  }
  return run;
}

/// Publishes the run as plant.state / plant.command telemetry and lets a
/// learning server turn it into transitions.
inline void feed_server(LearningServer& server, const OpenLoopRun& run) {
  Bus bus;
  const PlantState& first = run.states.front();
  bus.publish(topics::kPlantState, pack_state({first.t, 1, first.pose, first.twist}));
  for (std::size_t k = 0; k + 1 < run.states.size(); ++k) {
    const PlantState& next = run.states[k + 1];
    bus.publish(topics::kPlantCommand, pack_command({next.t, 1, run.commands[k]}));
    bus.publish(topics::kPlantState, pack_state({next.t, 1, next.pose, next.twist}));
    if (k % 512 == 0) server.ingest(bus);
  }
  server.ingest(bus);
}

/// Plant with longitudinal slip only: no lag mismatch, noise or friction.
inline PlantParams slip_only_plant(double slip_long) {
  PlantParams p;
  p.motor_gain = 1.0;
  p.slip_long = slip_long;
  return p;
}

inline Weights random_weights(NoiseSource& rng, double scale) {
  Weights W;
  for (Eigen::Index r = 0; r < 3; ++r) {
    for (Eigen::Index c = 0; c < 11; ++c) W(r, c) = (rng.uniform() - 0.5) * 2 * scale;
  }
  return W;
}

inline Target apply_weights(const Weights& W, const FeatureVector& x) {
  Target y{};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 11; ++c) {
      y[r] += W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * x[c];
    }
  }
  return y;
}

struct Synthetic {
  const char* name;
  Dataset data;
  Weights truth;
};

// Datasets the oracle-equivalence property is checked on.
inline std::vector<Synthetic> synthetic_suite() {
  std::vector<Synthetic> out;
  auto make = [&](const char* name, std::size_t n, double noise, bool correlated, double speed,
                  std::uint64_t seed) {
    NoiseSource rng(seed);
    Synthetic s{name, {}, random_weights(rng, 0.3)};
    s.truth.col(8) *= 1e-3;  // v|v| terms are quadratic in speed
    s.truth.col(9) *= 1e-3;
    for (std::size_t i = 0; i < n; ++i) {
      const Twist2D v{(rng.uniform() - 0.5) * 2 * speed, (rng.uniform() - 0.5) * 2 * speed,
                      (rng.uniform() - 0.5) * 2};
      Twist2D u{(rng.uniform() - 0.5) * 2 * speed, (rng.uniform() - 0.5) * 2 * speed,
                (rng.uniform() - 0.5) * 2};
      if (correlated) {
        u = v + Twist2D{rng.gaussian(0.1 * speed), rng.gaussian(0.1 * speed), rng.gaussian(0.1)};
      }
      const FeatureVector x = featurize(v, u);
      Target y = apply_weights(s.truth, x);
      for (double& t : y) t += rng.gaussian(noise);
      s.data.x.push_back(x);
      s.data.y.push_back(y);
    }
    out.push_back(std::move(s));
  };
  make("noiseless", 2000, 0.0, false, 300, 1);
  make("noisy", 2000, 2.0, false, 300, 2);
  make("correlated", 3000, 1.0, true, 300, 3);
  make("small", 60, 0.5, false, 100, 4);
  make("slow", 1500, 0.1, false, 20, 5);
  return out;
}

inline constexpr ChassisKind kAllKinds[] = {ChassisKind::Omni4, ChassisKind::Diff2, ChassisKind::FWD,
                                     ChassisKind::RWD,   ChassisKind::WD4,   ChassisKind::Diff2x2};

inline ChassisGeometry geometry_for(ChassisKind kind) {
  ChassisGeometry g;
  g.kind = kind;
  return g;
}

// A twist the chassis can realize: any twist for Omni4, no lateral motion for
// the rest, and a turn rate inside the steering limit for bicycle kinds.
inline Twist2D random_achievable(NoiseSource& rng, const ChassisGeometry& g) {
  auto u = [&](double a) { return (2.0 * rng.uniform() - 1.0) * a; };
  Twist2D t{u(500.0), u(500.0), u(2.0)};
  if (g.kind == ChassisKind::Omni4) return t;
  t.vy = 0.0;
  if (has_steering_gear(g.kind)) {
    if (std::abs(t.vx) < 1.0) t.vx = 1.0;
    const double delta = u(kMaxSteeringRad);
    t.omega = t.vx * std::tan(delta) / g.wheelbase;
  }
  return t;
}

inline Frame random_frame(NoiseSource& rng) {
  Frame f;
  f.msg_type = static_cast<std::uint8_t>(rng.next_u64());
  f.robot_id = static_cast<std::uint8_t>(rng.next_u64());
  f.seq = static_cast<std::uint16_t>(rng.next_u64());
  f.timestamp = static_cast<std::uint32_t>(rng.next_u64());
  const auto n = static_cast<std::size_t>(rng.next_u64() % (kMaxFrameFields + 1));
  for (std::size_t i = 0; i < n; ++i) {
    f.fields.push_back(static_cast<std::int16_t>(static_cast<std::uint16_t>(rng.next_u64())));
  }
  return f.seal();
}

}  // namespace twinbed::testing
