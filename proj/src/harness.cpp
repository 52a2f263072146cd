#include "twinbed/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <variant>

#include "twinbed/messages.hpp"
#include "twinbed/twin.hpp"

namespace twinbed {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

const char* to_string(Experiment e) {
  switch (e) {
    case Experiment::A: return "A";
    case Experiment::B: return "B";
    case Experiment::C: return "C";
  }
  return "?";
}

Experiment experiment_from_string(const std::string& name) {
  if (name == "A" || name == "a") return Experiment::A;
  if (name == "B" || name == "b") return Experiment::B;
  if (name == "C" || name == "c") return Experiment::C;
  throw ConfigInvalid("unknown experiment '" + name + "' (expected A, B or C)");
}

PlantParams ExperimentConfig::calibrated_plant() {
  PlantParams p;
  p.motor_gain = 0.92;
  p.motor_tau_ms = 40.0;
  p.wheel_speed_max = 12.0;
  p.slip_long = 0.15;
  p.slip_lat = 0.319336;  // from `twinbed calibrate --target 105`, seeds 1-5
  p.coulomb_friction = 60.0;
  p.viscous_friction = 0.5;
  p.stiction_speed = 5.0;
  p.process_noise_sigma = 2.0;
  p.process_noise_omega = 0.005;
  p.accel_sigma = 30.0;
  p.gyro_sigma = 0.005;
  p.mag_sigma = 0.01;
  p.encoder_sigma = 0.05;
  p.pixel_sigma = 0.5;
  p.camera_theta_sigma = 0.005;
  return p;
}

TrainConfig ExperimentConfig::default_train() {
  TrainConfig t;
  t.ridge = 0.01;
  return t;
}

int ExperimentConfig::evaluation_laps() const {
  if (eval_laps > 0) return eval_laps;
  return experiment == Experiment::C ? 2 : 1;
}

void ExperimentConfig::validate() const {
  if (waypoints.empty()) throw ConfigInvalid("waypoint list is empty");
  for (const auto& w : waypoints) {
    if (!std::isfinite(w.x) || !std::isfinite(w.y)) throw ConfigInvalid("waypoint not finite");
  }
  WaypointPlan{waypoints, threshold, epsilon_p, 0}.validate();
  plant.validate();
  train.validate();
  if (tick_budget <= 0) throw ConfigInvalid("tick_budget must be positive");
  if (training_laps < 0 || eval_laps < 0) throw ConfigInvalid("lap counts must be >= 0");
  if (lap_gap_ms < kTickMs || lap_gap_ms % kTickMs != 0) {
    throw ConfigInvalid("lap_gap_ms must be a positive multiple of the tick");
  }
  if (persist_every <= 0) throw ConfigInvalid("persist_every must be positive");
  if (!(controller.setpoint_period_ms > 0) || !(controller.max_speed > 0)) {
    throw ConfigInvalid("controller period and max speed must be positive");
  }
  if (!(controller.corrector.gamma > 0 && controller.corrector.gamma < 1)) {
    throw ConfigInvalid("corrector gamma must be in (0, 1)");
  }
  for (double g : {pid.kp, pid.ki, pid.kd, pid.integral_limit, pid.output_limit}) {
    if (!(g >= 0)) throw ConfigInvalid("PID gains must be >= 0");
  }
  if (!(fusion.camera_gain >= 0 && fusion.camera_gain <= 1) ||
      !(fusion.mag_weight >= 0 && fusion.mag_weight <= 1)) {
    throw ConfigInvalid("fusion gains must be in [0, 1]");
  }
  if (!(twin_motor_tau_ms > 0)) throw ConfigInvalid("twin_motor_tau_ms must be positive");
}

namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>);
using FieldRef = std::variant<double*, std::int64_t*, int*, std::uint64_t*, bool*>;

std::vector<std::pair<std::string, FieldRef>> numeric_fields(ExperimentConfig& c) {
  return {
      {"seed", &c.seed},
      {"threshold", &c.threshold},
      {"epsilon_p", &c.epsilon_p},
      {"start_theta", &c.start_theta},
      {"tick_budget", &c.tick_budget},
      {"training_laps", &c.training_laps},
      {"eval_laps", &c.eval_laps},
      {"lap_gap_ms", &c.lap_gap_ms},
      {"persist_every", &c.persist_every},
      {"lockstep", &c.lockstep},
      {"twin_motor_tau_ms", &c.twin_motor_tau_ms},

      {"chassis.wheel_radius", &c.plant.geometry.wheel_radius},
      {"chassis.half_length", &c.plant.geometry.half_length},
      {"chassis.half_width", &c.plant.geometry.half_width},
      {"chassis.wheelbase", &c.plant.geometry.wheelbase},

      {"plant.motor_gain", &c.plant.motor_gain},
      {"plant.motor_tau_ms", &c.plant.motor_tau_ms},
      {"plant.wheel_speed_max", &c.plant.wheel_speed_max},
      {"plant.slip_long", &c.plant.slip_long},
      {"plant.slip_lat", &c.plant.slip_lat},
      {"plant.coulomb_friction", &c.plant.coulomb_friction},
      {"plant.viscous_friction", &c.plant.viscous_friction},
      {"plant.stiction_speed", &c.plant.stiction_speed},
      {"plant.process_noise_sigma", &c.plant.process_noise_sigma},
      {"plant.process_noise_omega", &c.plant.process_noise_omega},
      {"plant.accel_sigma", &c.plant.accel_sigma},
      {"plant.gyro_sigma", &c.plant.gyro_sigma},
      {"plant.mag_sigma", &c.plant.mag_sigma},
      {"plant.encoder_sigma", &c.plant.encoder_sigma},
      {"plant.pixel_sigma", &c.plant.pixel_sigma},
      {"plant.camera_theta_sigma", &c.plant.camera_theta_sigma},

      {"train.learning_rate", &c.train.learning_rate},
      {"train.batch_size", &c.train.batch_size},
      {"train.epochs_per_round", &c.train.epochs_per_round},
      {"train.convergence_tol", &c.train.convergence_tol},
      {"train.retrain_every", &c.train.retrain_every},
      {"train.replay_capacity", &c.train.replay_capacity},
      {"train.seed", &c.train.seed},
      {"train.ridge", &c.train.ridge},

      {"controller.setpoint_period_ms", &c.controller.setpoint_period_ms},
      {"controller.max_speed", &c.controller.max_speed},
      {"controller.heading_gain", &c.controller.heading_gain},
      {"controller.heading_ref", &c.controller.heading_ref},
      {"corrector.gamma", &c.controller.corrector.gamma},
      {"corrector.iterations", &c.controller.corrector.iterations},
      {"corrector.jacobian_step", &c.controller.corrector.jacobian_step},

      {"pid.kp", &c.pid.kp},
      {"pid.ki", &c.pid.ki},
      {"pid.kd", &c.pid.kd},
      {"pid.integral_limit", &c.pid.integral_limit},
      {"pid.output_limit", &c.pid.output_limit},

      {"fusion.camera_gain", &c.fusion.camera_gain},
      {"fusion.mag_weight", &c.fusion.mag_weight},
      {"fusion.history", &c.fusion.history},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* first = v.data();
  const char* last = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ConfigInvalid("bad value for " + key + ": '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigInvalid("bad boolean for " + key + ": '" + v + "'");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<PointPx> parse_waypoints(const std::string& v) {
  // "x,y; x,y; ..."
  std::vector<PointPx> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ';')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto comma = item.find(',');
    if (comma == std::string::npos) throw ConfigInvalid("waypoint '" + item + "' is not x,y");
    out.push_back({parse_number<double>("waypoints", trim(item.substr(0, comma))),
                   parse_number<double>("waypoints", trim(item.substr(comma + 1)))});
  }
  return out;
}

Solver solver_from_string(const std::string& v) {
  if (v == "sgd") return Solver::Sgd;
  if (v == "least_squares") return Solver::LeastSquares;
  throw ConfigInvalid("unknown solver '" + v + "'");
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "experiment") {
    experiment = experiment_from_string(v);
    return;
  }
  if (key == "waypoints") {
    waypoints = parse_waypoints(v);
    return;
  }
  if (key == "chassis.kind") {
    try {
      plant.geometry.kind = chassis_from_string(v);
    } catch (const std::exception&) {
      throw ConfigInvalid("unknown chassis kind '" + v + "'");
    }
    return;
  }
  if (key == "train.solver") {
    train.solver = solver_from_string(v);
    return;
  }
  if (key == "log_path") {
    log_path = v;
    return;
  }
  for (auto& [name, ref] : numeric_fields(*this)) {
    if (name != key) continue;
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>) {
            *p = parse_bool(key, v);
          } else {
            *p = parse_number<T>(key, v);
          }
        },
        ref);
    return;
  }
  throw ConfigInvalid("unknown config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigInvalid("line " + std::to_string(lineno) + ": expected key = value");
    }
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream out;
  out << "experiment = " << to_string(experiment) << '\n';
  out << "waypoints = ";
  for (std::size_t i = 0; i < waypoints.size(); ++i) {
    out << (i ? "; " : "") << format_double(waypoints[i].x) << ',' << format_double(waypoints[i].y);
  }
  out << '\n';
  out << "chassis.kind = " << to_string(plant.geometry.kind) << '\n';
  out << "train.solver = " << (train.solver == Solver::Sgd ? "sgd" : "least_squares") << '\n';
  if (!log_path.empty()) out << "log_path = " << log_path.string() << '\n';
  auto& self = const_cast<ExperimentConfig&>(*this);
  for (const auto& [name, ref] : numeric_fields(self)) {
    out << name << " = ";
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>) {
            out << (*p ? "true" : "false");
          } else if constexpr (std::is_same_v<T, double>) {
            out << format_double(*p);
          } else {
            out << *p;
          }
        },
        ref);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void ExperimentReport::summarize() {
  max_error = 0.0;
  double sum = 0.0;
  for (const auto& s : samples) {
    max_error = std::max(max_error, s.error);
    sum += s.error;
  }
  mean_error = samples.empty() ? 0.0 : sum / static_cast<double>(samples.size());
}

double ExperimentRun::max_error() const {
  double m = 0.0;
  for (const auto& r : plant) m = std::max(m, r.max_error);
  return m;
}

double distance_to_segment(const PointPx& p, const PointPx& a, const PointPx& b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double s = 0.0;
  if (len2 > 0.0) s = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  return std::hypot(p.x - (a.x + s * dx), p.y - (a.y + s * dy));
}

PvGap compare_pv(const ExperimentReport& plant, const ExperimentReport& twin) {
  if (plant.samples.size() != twin.samples.size()) {
    throw LengthMismatch("plant report has " + std::to_string(plant.samples.size()) +
                         " ticks, twin report has " + std::to_string(twin.samples.size()));
  }
  PvGap out;
  out.gaps.reserve(plant.samples.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < plant.samples.size(); ++i) {
    const auto& p = plant.samples[i].position;
    const auto& q = twin.samples[i].position;
    const double g = std::hypot(p.x - q.x, p.y - q.y);
    out.gaps.push_back(g);
    out.max_gap = std::max(out.max_gap, g);
    sum += g;
  }
  if (!out.gaps.empty()) out.mean_gap = sum / static_cast<double>(out.gaps.size());
  return out;
}

namespace {

// Tracks the reference leg for the error metric: the segment from where
// the previous waypoint was accepted to the current target.
class LegTracker {
 public:
  LegTracker(const std::vector<PointPx>& targets, PointPx start)
      : targets_(targets), from_(start), to_(targets.front()) {}

  void update(std::size_t target_index, const PointPx& position) {
    if (target_index != index_) {
      index_ = target_index;
      if (index_ < targets_.size()) {
        from_ = position;
        to_ = targets_[index_];
      }
    }
  }
  const PointPx& from() const { return from_; }
  const PointPx& to() const { return to_; }

 private:
  const std::vector<PointPx>& targets_;
  std::size_t index_ = 0;
  PointPx from_;
  PointPx to_;
};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

EstimatedState twin_estimate(const TwinState& s) {
  EstimatedState e;
  e.x = s.pose.x;
  e.y = s.pose.y;
  e.theta = s.pose.theta;
  e.vx = s.twist.vx;
  e.vy = s.twist.vy;
  e.omega = s.twist.omega;
  return e;
}

void clear_log(const std::filesystem::path& path) {
  std::error_code ec;
  for (const char* suffix : {"", ".decoded", ".marker"}) {
    std::filesystem::remove(path.string() + suffix, ec);
  }
}

struct LapResult {
  ExperimentReport plant;
  ExperimentReport twin;
  Timestamp end;
};

class Runner {
 public:
  explicit Runner(const ExperimentConfig& config)
      : config_(config),
        geometry_(config.plant.geometry),
        nominal_{config.plant.geometry, config.twin_motor_tau_ms, config.plant.wheel_speed_max},
        plant_rng_(splitmix(config.seed ^ 0x1)),
        sensor_rng_(splitmix(config.seed ^ 0x2)),
        camera_rng_(splitmix(config.seed ^ 0x3)),
        server_(config.train, nominal_, splitmix(config.seed ^ config.train.seed)),
        estimator_(geometry_, config.fusion) {
    start_ = Pose2D(px_to_mm(config.waypoints.front().x), px_to_mm(config.waypoints.front().y),
                    config.start_theta);
  }

  ExperimentRun run() {
    if (!config_.log_path.empty()) clear_log(config_.log_path);
    if (!config_.lockstep) start_free_learner();

    ExperimentRun out;
    out.experiment = config_.experiment;
    out.seed = config_.seed;
    const bool learning = config_.experiment != Experiment::A;
    const int training = learning ? config_.training_laps : 0;
    const int total = training + config_.evaluation_laps();

    Timestamp t0{0};
    try {
      for (int lap = 0; lap < total; ++lap) {
        const bool correct = config_.experiment == Experiment::C && lap >= training;
        LapResult r = run_lap(t0, learning, correct);
        if (lap < training) {
          out.training.push_back(std::move(r.plant));
        } else {
          out.plant.push_back(std::move(r.plant));
          out.twin.push_back(std::move(r.twin));
        }
        t0 = Timestamp{r.end.ms + config_.lap_gap_ms};
      }
    } catch (...) {
      stop_free_learner();
      throw;
    }
    stop_free_learner();
    persist();

    std::lock_guard lock(server_mu_);
    out.model = server_.params();
    out.loss_history = server_.loss_history();
    return out;
  }

 private:
  LapResult run_lap(Timestamp t0, bool learning, bool correct) {
    const std::int64_t dt = kTickMs;

    PlantState plant;
    plant.pose = start_;
    plant.t = t0;
    estimator_.reset(EstimatedState{start_.x, start_.y, 0, 0, start_.theta, 0}, t0);
    MotorLayer motors(config_.pid, config_.plant.wheel_speed_max);
    motors_feedback_ = {};
    DelayQueue<DriveCommand> command_queue(kCommandLatencyMs);
    DelayQueue<CameraObservation> camera_queue(kObservationLatencyMs);
    DelayQueue<Twist2D> twin_queue(kCommandLatencyMs);

    const WaypointPlan plan{config_.waypoints, config_.threshold, config_.epsilon_p, 0};
    WaypointController controller(plan, config_.controller, geometry_, nominal_);
    WaypointController twin_controller(plan, config_.controller, geometry_, nominal_);

    // The twin starts each lap from the plant's camera detection.
    if (auto obs = observe_camera(plant, config_.plant, camera_rng_)) {
      bus_.publish(topics::kPlantCamera, pack_camera(obs->robot_id, obs->pixel_pose, obs->t));
    }
    sync_twin_from_bus(t0);

    const PointPx start_px = to_px(start_);
    LegTracker plant_leg(config_.waypoints, start_px);
    LegTracker twin_leg(config_.waypoints, to_px(twin_.pose));

    LapResult result;
    result.plant.label = "plant";
    result.twin.label = "twin";
    std::set<std::uint64_t> plant_versions, twin_versions;

    DriveCommand active;
    Twist2D twin_active;
    Timestamp t = t0;
    for (std::int64_t k = 1; k <= config_.tick_budget; ++k) {
      t = Timestamp{t0.ms + k * dt};

      // Plant.
      for (auto& c : command_queue.pop(t)) active = c;
      const DriveCommand drive = motors.drive(active, motors_feedback_, dt);
      const Twist2D prev_twist = plant.twist;
      plant = plant_step(plant, drive, config_.plant, dt, plant_rng_);

      // Sensors.
      const SensorFrame sensors = sense(plant, prev_twist, config_.plant, dt, sensor_rng_);
      motors_feedback_ = sensors.encoders;
      if (auto obs = observe_camera(plant, config_.plant, camera_rng_)) camera_queue.push(*obs, t);

      // Bus.
      bus_.publish(topics::kPlantState,
                   pack_state({t, 1, plant.pose, plant.twist}, MsgType::PlantState));
      bus_.publish(topics::kPlantCommand, pack_command({t, 1, forward_kinematics(active, geometry_)}));
      const std::vector<CameraObservation> arrived = camera_queue.pop(t);
      for (const auto& obs : arrived) {
        bus_.publish(topics::kPlantCamera, pack_camera(obs.robot_id, obs.pixel_pose, obs.t));
      }

      // Control.
      const EstimatedState& est = estimator_.update(sensors, arrived, dt);
      snapshots_.poll(bus_);
      const ModelParams* corrector_model = nullptr;
      if (correct && snapshots_.latest_converged()) {
        corrector_model = &*snapshots_.latest_converged();
        plant_versions.insert(corrector_model->version);
      }
      const ControlOutput out = controller.decide(est, corrector_model);
      command_queue.push(out.q_d, t);
      bus_.publish(topics::kControlSetpoint,
                   pack_setpoint({t, 1, out.setpoint, static_cast<int>(out.target_index),
                                  out.corrected}));

      // Twin.
      const ModelParams* twin_model = &zero_model_;
      if (learning && snapshots_.latest_converged()) twin_model = &*snapshots_.latest_converged();
      if (twin_model->version > 0) twin_versions.insert(twin_model->version);
      for (auto& c : twin_queue.pop(t)) twin_active = c;
      twin_ = twin_step(twin_, twin_active, *twin_model, nominal_, dt);
      bus_.publish(topics::kTwinState,
                   pack_state({t, 1, twin_.pose, twin_.twist}, MsgType::TwinState));
      const ControlOutput twin_out =
          twin_controller.decide(twin_estimate(twin_), correct ? corrector_model : nullptr);
      twin_queue.push(twin_out.body_command, t);

      // Learning.
      if (learning && config_.lockstep) server_.step(bus_, t);
      if (!config_.lockstep) {
        sim_time_.store(t.ms);
        std::this_thread::sleep_for(std::chrono::microseconds(500));
      }

      record(result.plant, plant_leg, t, to_px(plant.pose), plant.pose.theta, out);
      record(result.twin, twin_leg, t, to_px(twin_.pose), twin_.pose.theta, twin_out);

      if (k % config_.persist_every == 0) persist();
      if (out.complete && twin_out.complete) break;
    }

    result.plant.waypoints_reached = controller.plan().index;
    result.twin.waypoints_reached = twin_controller.plan().index;
    result.plant.model_versions.assign(plant_versions.begin(), plant_versions.end());
    result.twin.model_versions.assign(twin_versions.begin(), twin_versions.end());
    result.plant.summarize();
    result.twin.summarize();
    result.end = t;
    return result;
  }

  void record(ExperimentReport& report, LegTracker& leg, Timestamp t, const PointPx& pos,
              double theta, const ControlOutput& out) {
    leg.update(out.target_index, pos);
    TrajectorySample s;
    s.t = t;
    s.position = pos;
    s.theta = theta;
    s.setpoint = out.setpoint;
    s.leg_from = leg.from();
    s.leg_to = leg.to();
    s.target_index = out.target_index;
    s.error = distance_to_segment(pos, s.leg_from, s.leg_to);
    report.samples.push_back(s);
  }

  void sync_twin_from_bus(Timestamp t0) {
    std::optional<Frame> newest;
    while (auto f = bus_.consume(topics::kPlantCamera, twin_camera_cursor_)) newest = f;
    TwinState fresh;
    fresh.t = Timestamp{std::min(twin_.t.ms, t0.ms)};
    fresh.model_version = twin_.model_version;
    if (newest) {
      CameraObservation obs;
      obs.robot_id = newest->robot_id;
      obs.pixel_pose = unpack_camera(*newest);
      obs.t = Timestamp{static_cast<std::int64_t>(newest->timestamp)};
      fresh = twin_sync(fresh, obs);
    } else {
      fresh.pose = start_;
    }
    fresh.t = t0;
    twin_ = fresh;
  }

  void persist() {
    if (config_.log_path.empty()) return;
    persist_log(bus_, "*", config_.log_path);
  }

  // Free-run: the learner polls the bus on its own thread.
  void start_free_learner() {
    stop_.store(false);
    learner_ = std::thread([this] {
      while (!stop_.load()) {
        {
          std::lock_guard lock(server_mu_);
          server_.step(bus_, Timestamp{sim_time_.load()});
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
      }
    });
  }
  void stop_free_learner() {
    stop_.store(true);
    if (learner_.joinable()) learner_.join();
  }

  const ExperimentConfig& config_;
  ChassisGeometry geometry_;
  NominalModel nominal_;
  NoiseSource plant_rng_;
  NoiseSource sensor_rng_;
  NoiseSource camera_rng_;
  Bus bus_;
  LearningServer server_;
  SnapshotSubscriber snapshots_;
  StateEstimator estimator_;
  ModelParams zero_model_;
  WheelSpeeds motors_feedback_;
  TwinState twin_;
  Cursor twin_camera_cursor_;
  Pose2D start_;

  std::mutex server_mu_;
  std::thread learner_;
  std::atomic<bool> stop_{false};
  std::atomic<std::int64_t> sim_time_{0};
};

}  // namespace

ExperimentRun run_experiment(const ExperimentConfig& config) {
  config.validate();
  Runner runner(config);
  return runner.run();
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "plotdata") return ReportFormat::PlotData;
  throw ConfigInvalid("unknown report format '" + name + "'");
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& path,
                 ReportFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoFailure("cannot write " + path.string());
  auto num = [](double v) { return format_double(v); };

  if (format == ReportFormat::Csv) {
    out << "t_ms,x_px,y_px,theta,setpoint_x,setpoint_y,error_px\n";
    for (const auto& s : report.samples) {
      out << s.t.ms << ',' << num(s.position.x) << ',' << num(s.position.y) << ','
          << num(s.theta) << ',' << num(s.setpoint.x) << ',' << num(s.setpoint.y) << ','
          << num(s.error) << '\n';
    }
  } else {
    out << "# " << report.label << " trajectory: t_ms x_px y_px theta\n";
    for (const auto& s : report.samples) {
      out << s.t.ms << ' ' << num(s.position.x) << ' ' << num(s.position.y) << ' '
          << num(s.theta) << '\n';
    }
    out << "\n\n# " << report.label << " setpoint: t_ms setpoint_x setpoint_y\n";
    for (const auto& s : report.samples) {
      out << s.t.ms << ' ' << num(s.setpoint.x) << ' ' << num(s.setpoint.y) << '\n';
    }
    out << "\n\n# " << report.label << " error: t_ms error_px\n";
    for (const auto& s : report.samples) out << s.t.ms << ' ' << num(s.error) << '\n';
  }
  out.flush();
  if (!out) throw IoFailure("write failed on " + path.string());
}

std::vector<ReportRow> read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open report " + path.string());
  std::string line;
  std::vector<std::vector<std::vector<double>>> blocks(1);
  bool csv = false;
  bool first = true;
  int blank = 0;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      if (line.rfind("t_ms,", 0) == 0) {
        csv = true;
        continue;
      }
    }
    if (line.empty()) {
      if (++blank == 2 && !blocks.back().empty()) blocks.emplace_back();
      continue;
    }
    blank = 0;
    if (line[0] == '#') continue;
    if (csv) std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    blocks.back().push_back(std::move(row));
  }

  std::vector<ReportRow> rows;
  if (csv) {
    for (const auto& r : blocks.front()) {
      if (r.size() != 7) throw IoFailure("malformed report row in " + path.string());
      rows.push_back({r[0], r[1], r[2], r[3], r[4], r[5], r[6]});
    }
    return rows;
  }
  if (blocks.size() < 3) throw IoFailure("plot data needs three blocks: " + path.string());
  const auto& traj = blocks[0];
  const auto& sp = blocks[1];
  const auto& err = blocks[2];
  if (traj.size() != sp.size() || traj.size() != err.size()) {
    throw IoFailure("plot data blocks differ in length: " + path.string());
  }
  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (traj[i].size() != 4 || sp[i].size() != 3 || err[i].size() != 2) {
      throw IoFailure("malformed plot data row in " + path.string());
    }
    rows.push_back({traj[i][0], traj[i][1], traj[i][2], traj[i][3], sp[i][1], sp[i][2], err[i][1]});
  }
  return rows;
}

std::string summarize_run(const ExperimentRun& run) {
  std::ostringstream out;
  out << "experiment " << to_string(run.experiment) << " seed " << run.seed << '\n';
  auto line = [&](const char* kind, std::size_t i, const ExperimentReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "%s lap %zu: ticks=%zu max_error_px=%.3f mean_error_px=%.3f waypoints=%zu\n",
                  kind, i + 1, r.ticks(), r.max_error, r.mean_error, r.waypoints_reached);
    out << buf;
  };
  for (std::size_t i = 0; i < run.training.size(); ++i) line("training", i, run.training[i]);
  for (std::size_t i = 0; i < run.plant.size(); ++i) {
    line("plant", i, run.plant[i]);
    line("twin", i, run.twin[i]);
    const PvGap gap = compare_pv(run.plant[i], run.twin[i]);
    char buf[128];
    std::snprintf(buf, sizeof buf, "gap lap %zu: max_px=%.3f mean_px=%.3f\n", i + 1, gap.max_gap,
                  gap.mean_gap);
    out << buf;
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "model version=%llu converged=%d train_loss=%.6g rounds=%zu\n",
                static_cast<unsigned long long>(run.model.version), run.model.converged ? 1 : 0,
                run.model.train_loss, run.loss_history.size());
  out << buf;
  return out.str();
}

void write_run(const ExperimentRun& run, const ExperimentConfig& config,
               const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoFailure("cannot create " + dir.string() + ": " + ec.message());

  for (std::size_t i = 0; i < run.plant.size(); ++i) {
    const std::string suffix = i == 0 ? "" : "_lap" + std::to_string(i + 1);
    emit_report(run.plant[i], dir / ("report" + suffix + ".csv"), ReportFormat::Csv);
    emit_report(run.plant[i], dir / ("report" + suffix + ".plot"), ReportFormat::PlotData);
    emit_report(run.twin[i], dir / ("twin" + suffix + ".csv"), ReportFormat::Csv);
  }

  auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw IoFailure("cannot write " + (dir / name).string());
  };
  write_text("summary.txt", summarize_run(run));
  write_text("config.txt", config.to_text());

  std::ostringstream model;
  model << "version " << run.model.version << "\nconverged " << run.model.converged
        << "\ntrain_loss " << format_double(run.model.train_loss) << "\n";
  for (std::size_t r = 0; r < kOutputCount; ++r) {
    for (std::size_t c = 0; c < kFeatureCount; ++c) {
      model << (c ? " " : "") << format_double(run.model.W(r, c));
    }
    model << '\n';
  }
  write_text("model.txt", model.str());
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

CalibrationResult calibrate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                            double target_px, int iterations) {
  if (seeds.empty()) throw ConfigInvalid("calibration needs at least one seed");
  auto evaluate = [&](double slip_lat) {
    CalibrationResult r;
    r.slip_lat = slip_lat;
    for (auto seed : seeds) {
      ExperimentConfig c = base;
      c.experiment = Experiment::A;
      c.seed = seed;
      c.log_path.clear();
      c.plant.slip_lat = slip_lat;
      r.max_errors.push_back(run_experiment(c).max_error());
    }
    r.mean_max_error = std::accumulate(r.max_errors.begin(), r.max_errors.end(), 0.0) /
                       static_cast<double>(r.max_errors.size());
    return r;
  };

  double lo = 0.0;
  double hi = 1.0;
  CalibrationResult best = evaluate(hi);
  while (best.mean_max_error < target_px && hi < 8.0) {
    lo = hi;
    hi *= 2.0;
    best = evaluate(hi);
  }
  for (int i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    CalibrationResult r = evaluate(mid);
    if (std::abs(r.mean_max_error - target_px) < std::abs(best.mean_max_error - target_px)) {
      best = r;
    }
    if (r.mean_max_error < target_px) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return best;
}

}  // namespace twinbed
