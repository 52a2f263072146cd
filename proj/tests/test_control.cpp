#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "twinbed/control.hpp"
#include "twinbed/harness.hpp"
#include "twinbed/twin.hpp"

using namespace twinbed;

namespace {

constexpr double kPi = std::numbers::pi;

WaypointPlan plan_of(std::vector<PointPx> targets, double eps = 0.2) {
  WaypointPlan p;
  p.targets = std::move(targets);
  p.epsilon_p = eps;
  return p;
}

ModelParams converged_model() {
  ModelParams m;
  m.converged = true;
  m.version = 1;
  return m;
}

NominalModel nominal() { return NominalModel{}; }

}  // namespace

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

TEST(FuseEstimate, FullGainCameraEveryTickTracksTruth) {
  PlantParams p;  // noise-free
  NoiseSource rng(1), cam_rng(2);
  FusionConfig fc;
  fc.camera_gain = 1.0;
  PlantState s;
  s.pose = Pose2D(1000, 1000, 0.2);
  EstimatedState est{s.pose.x, s.pose.y, 0, 0, s.pose.theta, 0};
  const DriveCommand cmd = inverse_kinematics({180, 60, 0.3}, p.geometry);
  for (int k = 0; k < 500; ++k) {
    const Twist2D prev = s.twist;
    s = plant_step(s, cmd, p, kTickMs, rng);
    const SensorFrame f = sense(s, prev, p, kTickMs, rng);
    const auto obs = observe_camera(s, p, cam_rng);
    ASSERT_TRUE(obs);
    est = fuse_estimate(est, f, obs, kTickMs, p.geometry, fc);
    // Exactly the (pixel-quantized) detection, within half a pixel of truth.
    ASSERT_NEAR(est.x, px_to_mm(static_cast<double>(obs->pixel_pose.u)), 1e-9);
    ASSERT_NEAR(est.y, px_to_mm(static_cast<double>(obs->pixel_pose.v)), 1e-9);
    ASSERT_NEAR(est.theta, s.pose.theta, 1e-12);
    ASSERT_LE(std::abs(est.x - s.pose.x), 1.25 + 1e-9);
    ASSERT_LE(std::abs(est.y - s.pose.y), 1.25 + 1e-9);
  }
}

TEST(FuseEstimate, DeadReckoningLimitIsKinematicIntegration) {
  PlantParams p;
  NoiseSource rng(1);
  PlantState s;
  s.pose = Pose2D(0, 0, -0.4);
  EstimatedState est{0, 0, 0, 0, -0.4, 0};
  DriveCommand cmd;
  for (int k = 0; k < 1000; ++k) {
    if (k % 100 == 0) {
      cmd = inverse_kinematics({100.0 + k * 0.1, 50.0 - k * 0.1, 0.5 - k * 0.001}, p.geometry);
    }
    const Twist2D prev = s.twist;
    s = plant_step(s, cmd, p, kTickMs, rng);
    est = fuse_estimate(est, sense(s, prev, p, kTickMs, rng), std::nullopt, kTickMs, p.geometry);
    ASSERT_NEAR(est.x, s.pose.x, 1e-9);
    ASSERT_NEAR(est.y, s.pose.y, 1e-9);
    ASSERT_NEAR(wrap_angle(est.theta - s.pose.theta), 0.0, 1e-12);
  }
}

TEST(StateEstimator, FusionBeatsDeadReckoning) {
  const PlantParams p = ExperimentConfig::calibrated_plant();
  NoiseSource rng(8), sensor_rng(9), cam_rng(10), cmd_rng(11);
  PlantState s;
  s.pose = Pose2D(1250, 1250, 0);
  const EstimatedState start{1250, 1250, 0, 0, 0, 0};
  StateEstimator fused(p.geometry, FusionConfig{}, start);
  StateEstimator dead(p.geometry, FusionConfig{}, start);
  DelayQueue<CameraObservation> cam(kObservationLatencyMs);
  DriveCommand cmd;
  double se_fused = 0, se_dead = 0;
  const int n = 1000;
  for (int k = 1; k <= n; ++k) {
    const Timestamp t{k * kTickMs};
    if (k % 50 == 1) {
      cmd = inverse_kinematics({(cmd_rng.uniform() - 0.5) * 400, (cmd_rng.uniform() - 0.5) * 400,
                                (cmd_rng.uniform() - 0.5) * 0.4},
                               p.geometry);
    }
    const Twist2D prev = s.twist;
    s = plant_step(s, cmd, p, kTickMs, rng);
    const SensorFrame f = sense(s, prev, p, kTickMs, sensor_rng);
    if (auto obs = observe_camera(s, p, cam_rng)) cam.push(*obs, t);
    const auto arrived = cam.pop(t);
    const EstimatedState& a = fused.update(f, arrived, kTickMs);
    const EstimatedState& b = dead.update(f, {}, kTickMs);
    se_fused += std::pow(a.x - s.pose.x, 2) + std::pow(a.y - s.pose.y, 2);
    se_dead += std::pow(b.x - s.pose.x, 2) + std::pow(b.y - s.pose.y, 2);
  }
  const double rmse_fused = std::sqrt(se_fused / n);
  const double rmse_dead = std::sqrt(se_dead / n);
  EXPECT_LT(rmse_fused, rmse_dead);
  EXPECT_LT(rmse_fused, 5.0);  // mm
}

TEST(StateEstimator, LateDetectionsAreBackDated) {
  // Noise-free plant, detections 7 ms late, full gain: the estimate stays
  // within camera quantization of the truth because each detection is
  // compared with the estimate from its capture time.
  PlantParams p;
  NoiseSource rng(1), cam_rng(2);
  FusionConfig fc;
  fc.camera_gain = 1.0;
  PlantState s;
  StateEstimator est(p.geometry, fc);
  DelayQueue<CameraObservation> cam(kObservationLatencyMs);
  const DriveCommand cmd = inverse_kinematics({250, -100, 0}, p.geometry);
  for (int k = 1; k <= 400; ++k) {
    const Timestamp t{k * kTickMs};
    const Twist2D prev = s.twist;
    s = plant_step(s, cmd, p, kTickMs, rng);
    if (auto obs = observe_camera(s, p, cam_rng)) cam.push(*obs, t);
    const auto arrived = cam.pop(t);
    const EstimatedState& e = est.update(sense(s, prev, p, kTickMs, rng), arrived, kTickMs);
    ASSERT_LE(std::abs(e.x - s.pose.x), 1.25 + 1e-9);
    ASSERT_LE(std::abs(e.y - s.pose.y), 1.25 + 1e-9);
  }
}

TEST(FuseEstimate, RejectsNonPositiveDt) {
  EXPECT_THROW(fuse_estimate({}, {}, std::nullopt, 0, ChassisGeometry{}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Waypoints
// ---------------------------------------------------------------------------

TEST(WaypointSetpoint, Examples) {
  WaypointPlan plan = plan_of({{100, 0}}, 0.1);
  const PointPx sp = waypoint_setpoint({0, 0}, plan);
  EXPECT_DOUBLE_EQ(sp.x, 10.0);
  EXPECT_DOUBLE_EQ(sp.y, 0.0);
  EXPECT_EQ(waypoint_setpoint({100, 0}, plan), (PointPx{100, 0}));
}

TEST(WaypointSetpoint, GeometricContraction) {
  NoiseSource rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const double eps = 0.01 + 0.98 * rng.uniform();
    const PointPx target{rng.uniform() * 1000, rng.uniform() * 1000};
    WaypointPlan plan = plan_of({target}, eps);
    PointPx x{rng.uniform() * 1000, rng.uniform() * 1000};
    const double d0 = std::hypot(x.x - target.x, x.y - target.y);
    for (int k = 1; k <= 30; ++k) {
      const PointPx next = waypoint_setpoint(x, plan);
      const double d = std::hypot(next.x - target.x, next.y - target.y);
      ASSERT_NEAR(d, std::pow(1 - eps, k) * d0, 1e-9 * d0);
      ASSERT_LE(d, std::hypot(x.x - target.x, x.y - target.y));
      x = next;
    }
  }
}

TEST(AdvanceWaypoint, ThresholdBoundary) {
  WaypointPlan plan = plan_of({{500, 500}, {500, 900}});
  EXPECT_EQ(advance_waypoint({530, 470}, plan).index, 1u);
  EXPECT_EQ(advance_waypoint({531, 500}, plan).index, 0u);
  EXPECT_EQ(advance_waypoint({500, 469}, plan).index, 0u);
}

TEST(AdvanceWaypoint, CompletesAndThenThrowsOnTarget) {
  WaypointPlan plan = plan_of({{0, 0}, {10, 0}});
  plan = advance_waypoint({0, 0}, plan);
  EXPECT_FALSE(plan.complete());
  plan = advance_waypoint({10, 0}, plan);
  EXPECT_TRUE(plan.complete());
  EXPECT_EQ(advance_waypoint({0, 0}, plan).index, 2u);
  EXPECT_THROW(plan.target(), PlanExhausted);
  EXPECT_THROW(waypoint_setpoint({0, 0}, plan), PlanExhausted);
}

TEST(WaypointPlan, Validation) {
  EXPECT_THROW(plan_of({{0, 0}}, 0.0).validate(), ConfigInvalid);
  EXPECT_THROW(plan_of({{0, 0}}, 1.5).validate(), ConfigInvalid);
  EXPECT_NO_THROW(plan_of({{0, 0}}, 1.0).validate());
  WaypointPlan p = plan_of({{0, 0}});
  p.threshold = 0;
  EXPECT_THROW(p.validate(), ConfigInvalid);
}

// ---------------------------------------------------------------------------
// Dynamic layer
// ---------------------------------------------------------------------------

TEST(AllocateDynamic, Examples) {
  const ChassisGeometry g;
  EstimatedState est;
  for (double r : allocate_dynamic({}, est, g).wheels.r) EXPECT_EQ(r, 0.0);

  const Twist2D v{120, -30, 0.2};
  EXPECT_EQ(allocate_dynamic(v, est, g).wheels, inverse_kinematics(v, g).wheels);

  est.theta = kPi / 2;
  // World +x is body -y after a quarter turn.
  const DriveCommand a = allocate_dynamic({100, 0, 0}, est, g);
  const DriveCommand b = inverse_kinematics({0, -100, 0}, g);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.wheels[i], b.wheels[i], 1e-12);

  ChassisGeometry diff;
  diff.kind = ChassisKind::Diff2;
  EXPECT_THROW(allocate_dynamic({100, 0, 0}, est, diff), NonholonomicViolation);
}

// ---------------------------------------------------------------------------
// Motor layer
// ---------------------------------------------------------------------------

TEST(MotorPid, Examples) {
  PidState s;
  EXPECT_EQ(motor_pid(3.0, 3.0, PidGains{}, s, kTickMs), 0.0);

  PidGains p{2.0, 0.0, 0.0, 1.0, 100.0};
  PidState s2;
  EXPECT_DOUBLE_EQ(motor_pid(5.0, 2.0, p, s2, kTickMs), 6.0);
}

TEST(MotorPid, IntegralAndOutputClamp) {
  PidGains g{1.0, 10.0, 0.5, 0.3, 4.0};
  NoiseSource rng(6);
  PidState s;
  for (int i = 0; i < 10000; ++i) {
    const double out = motor_pid((rng.uniform() - 0.5) * 100, (rng.uniform() - 0.5) * 100, g, s,
                                 kTickMs);
    ASSERT_LE(std::abs(out), g.output_limit);
    ASSERT_LE(std::abs(s.integral), g.integral_limit);
  }
}

TEST(MotorPid, DerivativeStartsAtZero) {
  PidGains g{0.0, 0.0, 1.0, 1.0, 1e9};
  PidState s;
  EXPECT_EQ(motor_pid(1.0, 0.0, g, s, kTickMs), 0.0);
  EXPECT_DOUBLE_EQ(motor_pid(2.0, 0.0, g, s, kTickMs), 1.0 / 0.008);
}

TEST(MotorLayer, StepSettlesOnLaggedMotor) {
  // Closed loop against the plant actuator: under-unity motor gain, 40 ms
  // lag, encoder feedback one tick old.
  PlantParams p = ExperimentConfig::calibrated_plant().disturbance_free();
  p.motor_gain = 0.92;
  MotorLayer layer(PidGains{}, p.wheel_speed_max);
  NoiseSource rng(1);
  PlantState s;
  DriveCommand q_d;
  q_d.wheels.r = {5, -5, 5, -5};
  WheelSpeeds feedback, passed;
  const std::int64_t settle_ms = static_cast<std::int64_t>(10 * p.motor_tau_ms);
  for (std::int64_t t = kTickMs; t <= 3000; t += kTickMs) {
    passed = feedback;
    s = plant_step(s, layer.drive(q_d, feedback, kTickMs), p, kTickMs, rng);
    feedback = s.wheel_actual;
    for (std::size_t i = 0; i < 4; ++i) {
      ASSERT_TRUE(std::isfinite(s.wheel_actual[i]));
      if (t >= settle_ms) ASSERT_NEAR(s.wheel_actual[i], q_d.wheels[i], 0.02 * 5) << "t=" << t;
    }
  }
  EXPECT_EQ(layer.feedback(), passed);
}

TEST(MotorLayer, OutputSaturated) {
  MotorLayer layer(PidGains{}, 12.0);
  DriveCommand q_d;
  q_d.wheels.r = {20, -20, 11.9, 0};
  const DriveCommand out = layer.drive(q_d, WheelSpeeds{}, kTickMs);
  for (double w : out.wheels.r) EXPECT_LE(std::abs(w), 12.0);
}

// ---------------------------------------------------------------------------
// Twin correction
// ---------------------------------------------------------------------------

TEST(TwinCorrect, ZeroResidualReturnsDesired) {
  const ModelParams m = converged_model();
  EstimatedState est;
  est.theta = 0.7;
  const Twist2D v{120, -80, 0.1};
  const Twist2D u = twin_correct(v, est, &m, nominal());
  EXPECT_NEAR(u.vx, v.vx, 1e-12);
  EXPECT_NEAR(u.vy, v.vy, 1e-12);
  EXPECT_NEAR(u.omega, v.omega, 1e-12);
}

TEST(TwinCorrect, InvertsLinearSlip) {
  for (double s : {0.05, 0.2, 0.35}) {
    ModelParams m = converged_model();
    m.W(0, 3) = -s;  // residual vx = -s * ux
    const Twist2D u = twin_correct({100, 0, 0}, EstimatedState{}, &m, nominal());
    EXPECT_NEAR(u.vx, 100 / (1 - s), 1e-6) << "s=" << s;
    EXPECT_NEAR(u.vy, 0.0, 1e-6);
    EXPECT_NEAR(u.omega, 0.0, 1e-9);
  }
}

TEST(TwinCorrect, InvertsLateralCoupling) {
  ModelParams m = converged_model();
  m.W(0, 3) = -0.15;
  m.W(1, 3) = 0.3;  // vy drifts with forward command
  EstimatedState est;
  const Twist2D u = twin_correct({0, 200, 0}, est, &m, nominal());
  const Twist2D g = predict_settled_twist(m, nominal(), u);
  EXPECT_NEAR(g.vx, 0.0, 1e-6);
  EXPECT_NEAR(g.vy, 200.0, 1e-6);
}

TEST(TwinCorrect, NeverWorseThanNominal) {
  NoiseSource rng(21);
  const NominalModel nom = nominal();
  const double lever = nom.geometry.half_length + nom.geometry.half_width;
  auto err = [&](const Twist2D& a, const Twist2D& b) {
    return std::hypot(a.vx - b.vx, a.vy - b.vy, (a.omega - b.omega) * lever);
  };
  for (int trial = 0; trial < 300; ++trial) {
    ModelParams m = converged_model();
    for (Eigen::Index r = 0; r < 3; ++r) {
      for (Eigen::Index c = 0; c < 11; ++c) m.W(r, c) = (rng.uniform() - 0.5) * 0.4;
    }
    m.W(0, 8) *= 1e-3;
    m.W(1, 9) *= 1e-3;
    EstimatedState est;
    est.theta = (rng.uniform() - 0.5) * 6;
    const Twist2D v{(rng.uniform() - 0.5) * 600, (rng.uniform() - 0.5) * 600,
                    (rng.uniform() - 0.5) * 1.0};
    const Twist2D u = twin_correct(v, est, &m, nom);
    const Twist2D desired = world_to_body(v, est.theta);
    const double before = err(desired, predict_settled_twist(m, nom, desired));
    const double after = err(desired, predict_settled_twist(m, nom, world_to_body(u, est.theta)));
    ASSERT_LE(after, before + 1e-9);
  }
}

TEST(TwinCorrect, NoModelFallsBack) {
  const Twist2D v{50, 20, 0};
  EXPECT_THROW(twin_correct(v, {}, nullptr, nominal()), ModelUnavailable);
  ModelParams unconverged;
  unconverged.W(0, 3) = -0.3;
  EXPECT_THROW(twin_correct(v, {}, &unconverged, nominal()), ModelUnavailable);
  EXPECT_EQ(twin_correct_or_nominal(v, {}, nullptr, nominal()), v);
  EXPECT_EQ(twin_correct_or_nominal(v, {}, &unconverged, nominal()), v);
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

TEST(WaypointController, DrivesTowardTargetAndStopsWhenDone) {
  WaypointController c(plan_of({{100, 100}, {200, 100}}), ControllerConfig{}, ChassisGeometry{},
                       nominal());
  EstimatedState est{px_to_mm(100), px_to_mm(100), 0, 0, 0, 0};
  ControlOutput out = c.decide(est, nullptr);
  EXPECT_EQ(out.target_index, 1u);
  EXPECT_GT(out.nominal_world.vx, 0.0);
  EXPECT_NEAR(out.nominal_world.vy, 0.0, 1e-12);
  EXPECT_FALSE(out.corrected);
  EXPECT_LE(out.nominal_world.speed(), ControllerConfig{}.max_speed + 1e-9);

  est.x = px_to_mm(200);
  out = c.decide(est, nullptr);
  EXPECT_TRUE(out.complete);
  for (double w : out.q_d.wheels.r) EXPECT_EQ(w, 0.0);

  c.reset_plan();
  EXPECT_EQ(c.plan().index, 0u);
}

TEST(WaypointController, UsesConvergedModelOnly) {
  WaypointController c(plan_of({{0, 0}, {400, 0}}), ControllerConfig{}, ChassisGeometry{},
                       nominal());
  ModelParams m = converged_model();
  m.W(0, 3) = -0.2;
  const EstimatedState est;
  const ControlOutput a = c.decide(est, &m);
  EXPECT_TRUE(a.corrected);
  EXPECT_NEAR(a.command_world.vx, a.nominal_world.vx / 0.8, 1e-6);
  m.converged = false;
  const ControlOutput b = c.decide(est, &m);
  EXPECT_FALSE(b.corrected);
  EXPECT_EQ(b.command_world, b.nominal_world);
}

TEST(WaypointController, DiffDriveSteersWithoutLateralCommand) {
  ChassisGeometry g;
  g.kind = ChassisKind::Diff2;
  NominalModel nom;
  nom.geometry = g;
  WaypointController c(plan_of({{0, 0}, {0, 400}}), ControllerConfig{}, g, nom);
  const ControlOutput out = c.decide(EstimatedState{}, nullptr);
  EXPECT_NEAR(out.body_command.vy, 0.0, 1e-9);
  EXPECT_GT(out.body_command.omega, 0.0);  // turn left toward +y
}
