// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>

#include "support.hpp"
#include "twinbed/harness.hpp"
#include "twinbed/twin.hpp"

using namespace twinbed;
using namespace twinbed::testing;
namespace fs = std::filesystem;

namespace {

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("twinbed_accept_" + std::to_string(::getpid())) / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig config_for(Experiment e, std::uint64_t seed) {
  ExperimentConfig c;
  c.experiment = e;
  c.seed = seed;
  return c;
}

// Runs are shared by criteria 1-3.
struct Timed {
  ExperimentRun run;
  double seconds = 0;
};
std::map<std::pair<Experiment, std::uint64_t>, Timed> g_runs;

const Timed& run_of(Experiment e, std::uint64_t seed) {
  auto it = g_runs.find({e, seed});
  if (it != g_runs.end()) return it->second;
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentRun r = run_experiment(config_for(e, seed));
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return g_runs[{e, seed}] = Timed{std::move(r), s};
}

// 1. Uncorrected tracking error sits in the band and runs are fast enough.
Verdict baseline_band() {
  Verdict v{true, ""};
  for (auto seed : kSeeds) {
    const Timed& t = run_of(Experiment::A, seed);
    const double e = t.run.max_error();
    v.detail += fmt("s%.0f=%.1fpx/%.1fs ", static_cast<double>(seed), e, t.seconds);
    if (!(e >= 80.0 && e <= 150.0) || t.seconds > 30.0) v.pass = false;
  }
  return v;
}

// 2. Corrected tracking error and improvement ratio.
Verdict corrected_error() {
  Verdict v{true, ""};
  for (auto seed : kSeeds) {
    const double a = run_of(Experiment::A, seed).run.max_error();
    const Timed& t = run_of(Experiment::C, seed);
    const double c = t.run.max_error();
    v.detail += fmt("s%.0f=%.2fpx(x%.1f) ", static_cast<double>(seed), c, a / c);
    if (!(c <= 30.0) || !(a / c >= 3.0) || t.seconds > 30.0) v.pass = false;
  }
  return v;
}

// 3. Learned twin follows the plant far closer than the nominal twin.
Verdict twin_fidelity() {
  Verdict v{true, ""};
  for (auto seed : kSeeds) {
    const auto& a = run_of(Experiment::A, seed).run;
    const auto& b = run_of(Experiment::B, seed).run;
    const double ga = compare_pv(a.plant.front(), a.twin.front()).mean_gap;
    const double gb = compare_pv(b.plant.front(), b.twin.front()).mean_gap;
    v.detail += fmt("s%.0f=%.1f/%.1fpx(%.1f%%) ", static_cast<double>(seed), gb, ga, 100 * gb / ga);
    if (!(gb <= 0.25 * ga)) v.pass = false;
  }
  return v;
}

// 4. SGD reaches the least-squares optimum, and learns a known slip gain.
Verdict learner_equivalence() {
  Verdict v{true, ""};
  for (const auto& s : synthetic_suite()) {
    const double optimum = fit_least_squares(s.data).train_loss;
    const double tol = 1e-3 * std::max(optimum, 1.0);
    TrainConfig tc;
    NoiseSource rng(3);
    ModelParams m;
    for (int epoch = 0; epoch < 500; ++epoch) {
      m = sgd_epoch(m, s.data, tc, rng);
      if (std::abs(m.train_loss - optimum) <= tol) break;
    }
    const double gap = std::abs(m.train_loss - optimum);
    v.detail += fmt("%.2g ", gap);
    if (!(gap <= tol)) v.pass = false;
  }

  const PlantParams plant = slip_only_plant(0.2);
  TrainConfig tc;
  tc.replay_capacity = 8192;
  const NominalModel nom{plant.geometry, plant.motor_tau_ms, plant.wheel_speed_max};
  LearningServer server(tc, nom, 11);
  feed_server(server, drive_open_loop(plant, 5000, 12));
  for (int r = 0; r < 10; ++r) server.train_round();
  double worst = 0;
  for (double vx : {50.0, 120.0, 250.0, -180.0}) {
    const double gain = predict_settled_twist(server.params(), nom, {vx, 0, 0}).vx / vx;
    worst = std::max(worst, std::abs(gain - 0.8));
  }
  v.detail += fmt("slip gain err %.4f", worst);
  if (!(worst <= 0.008)) v.pass = false;
  return v;
}

// 5. Analytic gradient against central differences.
Verdict gradient_check() {
  const auto suite = synthetic_suite();
  NoiseSource rng(100);
  double worst = 0.0;
  for (int point = 0; point < 100; ++point) {
    const Dataset& d = suite[static_cast<std::size_t>(point) % suite.size()].data;
    ModelParams m;
    m.W = random_weights(rng, 1.0);
    m.W.col(8) *= 1e-3;
    m.W.col(9) *= 1e-3;
    const Weights g = mse_gradient(m, d);
    Weights fd;
    for (Eigen::Index r = 0; r < 3; ++r) {
      for (Eigen::Index c = 0; c < 11; ++c) {
        const double h = 1e-4 * std::max(1e-3, std::abs(m.W(r, c)));
        ModelParams plus = m, minus = m;
        plus.W(r, c) += h;
        minus.W(r, c) -= h;
        fd(r, c) = (evaluate_mse(plus, d) - evaluate_mse(minus, d)) / (2 * h);
      }
    }
    worst = std::max(worst, (g - fd).norm() / std::max(g.norm(), 1e-300));
  }
  return {worst <= 1e-5, fmt("worst relative error %.2e over 100 points", worst)};
}

// 6. Kinematic roundtrip and Omni4 rotation symmetry.
Verdict kinematics() {
  NoiseSource rng(2024);
  double worst = 0.0;
  for (auto kind : kAllKinds) {
    const ChassisGeometry g = geometry_for(kind);
    for (int i = 0; i < 10000; ++i) {
      const Twist2D t = random_achievable(rng, g);
      const Twist2D back = forward_kinematics(inverse_kinematics(t, g), g);
      worst = std::max({worst, std::abs(back.vx - t.vx), std::abs(back.vy - t.vy),
                        std::abs(back.omega - t.omega)});
    }
  }
  const ChassisGeometry omni = geometry_for(ChassisKind::Omni4);
  double asym = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const DriveCommand c = inverse_kinematics({0, 0, (2.0 * rng.uniform() - 1.0) * 3.0}, omni);
    for (std::size_t k = 1; k < 4; ++k) {
      asym = std::max(asym, std::abs(std::abs(c.wheels[k]) - std::abs(c.wheels[0])));
    }
  }
  return {worst <= 1e-9 && asym <= 1e-12,
          fmt("roundtrip %.2e, rotation asymmetry %.2e", worst, asym)};
}

// 7. Command-to-motion latency and camera cadence, read back from the bus log.
Verdict latency() {
  ExperimentConfig c = config_for(Experiment::A, 1);
  c.plant = ExperimentConfig::calibrated_plant().disturbance_free();
  c.tick_budget = 400;
  c.log_path = scratch("latency") / "bus.log";
  run_experiment(c);

  std::int64_t issued = -1, moved = -1, prev_cam = -1;
  std::size_t cams = 0, bad_steps = 0;
  for (const auto& r : read_log(c.log_path)) {
    if (r.topic == topics::kControlSetpoint && issued < 0) issued = r.timestamp;
    if (r.topic == topics::kPlantState && moved < 0) {
      const StateMsg s = unpack_state(r.frame);
      if (s.twist.vx != 0 || s.twist.vy != 0 || s.twist.omega != 0) moved = r.timestamp;
    }
    if (r.topic == topics::kPlantCamera) {
      const auto t = static_cast<std::int64_t>(r.frame.timestamp);
      if (prev_cam >= 0 && t - prev_cam != kTickMs) ++bad_steps;
      prev_cam = t;
      ++cams;
    }
  }
  const std::int64_t lat = moved - issued;
  const bool ok = issued >= 0 && moved >= 0 && lat >= 17 && lat <= 33 && cams > 10 && bad_steps == 0;
  return {ok, fmt("latency %.0f ms, %.0f camera frames, %.0f off-cadence", static_cast<double>(lat),
                  static_cast<double>(cams), static_cast<double>(bad_steps))};
}

// 8. Bus codec fuzz, corruption detection and concurrent FIFO.
Verdict bus_integrity() {
  NoiseSource rng(2024);
  std::size_t bad = 0;
  for (int i = 0; i < 100000; ++i) {
    const Frame f = random_frame(rng);
    if (!(decode_frame(encode_frame(f)) == f)) ++bad;
  }
  const char digits[] = "0123456789ABCDEF";
  std::size_t missed = 0, corruptions = 0;
  for (int i = 0; i < 500; ++i) {
    const std::string hex = encode_frame(random_frame(rng));
    for (std::size_t pos = 0; pos < hex.size(); ++pos) {
      for (int d = 0; d < 16; ++d) {
        if (digits[d] == hex[pos]) continue;
        std::string corrupt = hex;
        corrupt[pos] = digits[d];
        ++corruptions;
        try {
          decode_frame(corrupt);
          ++missed;
        } catch (const ChecksumMismatch&) {
        } catch (const MalformedFrame&) {
        }
      }
    }
  }

  constexpr int kFrames = 10000;
  Bus bus;
  bus.create_topic("stress", 4 * kFrames);
  std::atomic<int> disorder{0};
  auto producer = [&](std::uint8_t id) {
    for (int i = 0; i < kFrames; ++i) {
      Frame f;
      f.robot_id = id;
      f.fields = {static_cast<std::int16_t>(i)};
      bus.publish("stress", f.seal());
    }
  };
  auto consumer = [&] {
    Cursor cur;
    std::map<int, int> next{{1, 0}, {2, 0}};
    for (int seen = 0; seen < 2 * kFrames;) {
      auto f = bus.consume("stress", cur);
      if (!f) {
        std::this_thread::yield();
        continue;
      }
      if (f->fields[0] != next[f->robot_id]++) ++disorder;
      ++seen;
    }
  };
  std::thread c1(consumer), c2(consumer), p1(producer, 1), p2(producer, 2);
  p1.join();
  p2.join();
  c1.join();
  c2.join();
  const bool ok = bad == 0 && missed == 0 && disorder == 0;
  return {ok, fmt("fuzz mismatches %.0f, undetected %.0f/%.0f, reordered %.0f", static_cast<double>(bad),
                  static_cast<double>(missed), static_cast<double>(corruptions),
                  static_cast<double>(disorder.load()))};
}

// 9. Identical configs give byte-identical logs and reports.
Verdict determinism() {
  std::vector<fs::path> dirs{scratch("det_a"), scratch("det_b")};
  for (const auto& d : dirs) {
    ExperimentConfig c = config_for(Experiment::C, 4);
    c.log_path = d / "bus.log";
    write_run(run_experiment(c), c, d);
  }
  std::size_t differing = 0, compared = 0;
  for (const char* f : {"bus.log", "bus.log.decoded", "report.csv", "report_lap2.csv", "twin.csv",
                        "report.plot", "summary.txt", "model.txt"}) {
    const std::string a = slurp(dirs[0] / f);
    if (a.empty() || a != slurp(dirs[1] / f)) ++differing;
    ++compared;
  }
  return {differing == 0, fmt("%.0f of %.0f artifacts differ", static_cast<double>(differing),
                              static_cast<double>(compared))};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"1 baseline error band", baseline_band},
      {"2 corrected error", corrected_error},
      {"3 twin fidelity", twin_fidelity},
      {"4 sgd matches least squares", learner_equivalence},
      {"5 gradient check", gradient_check},
      {"6 kinematics", kinematics},
      {"7 latency", latency},
      {"8 bus integrity", bus_integrity},
      {"9 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s criterion %s: %s\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
    std::fflush(stdout);
    if (!v.pass) ++failed;
  }
  fs::remove_all(fs::temp_directory_path() / ("twinbed_accept_" + std::to_string(::getpid())));
  return failed == 0 ? 0 : 1;
}
