#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "twinbed/bus.hpp"
#include "twinbed/control.hpp"
#include "twinbed/learning.hpp"
#include "twinbed/plant.hpp"

namespace twinbed {

enum class Experiment { A, B, C };

const char* to_string(Experiment e);
Experiment experiment_from_string(const std::string& name);

/// Everything a run depends on. Text form is one `key = value` per line,
/// `#` starts a comment; see ExperimentConfig::to_text for the full key set.
struct ExperimentConfig {
  Experiment experiment = Experiment::A;
  std::uint64_t seed = 1;

  std::vector<PointPx> waypoints{{500, 500}, {500, 900}, {1300, 900}, {500, 900}, {500, 500}};
  double threshold = 30.0;
  double epsilon_p = 0.2;
  double start_theta = 0.0;

  PlantParams plant = calibrated_plant();
  TrainConfig train = default_train();
  ControllerConfig controller;
  PidGains pid;
  FusionConfig fusion;
  double twin_motor_tau_ms = 40.0;

  std::int64_t tick_budget = 12000;  // per lap
  int training_laps = 1;             // B and C only
  int eval_laps = 0;                 // 0 = 1 for A/B, 2 for C
  std::int64_t lap_gap_ms = 1000;
  std::int64_t persist_every = 256;  // ticks between disk log flushes
  bool lockstep = true;

  /// Bus log destination; empty disables persistence.
  std::filesystem::path log_path;

  static PlantParams calibrated_plant();
  static TrainConfig default_train();

  int evaluation_laps() const;
  void validate() const;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Applies one `key = value` override. Throws ConfigInvalid on unknown keys.
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
};

struct TrajectorySample {
  Timestamp t;
  PointPx position;
  double theta = 0.0;
  PointPx setpoint;
  double error = 0.0;
  // Reference leg the error is measured against.
  PointPx leg_from;
  PointPx leg_to;
  std::size_t target_index = 0;
};

struct ExperimentReport {
  std::string label;
  std::vector<TrajectorySample> samples;
  double max_error = 0.0;
  double mean_error = 0.0;
  std::size_t waypoints_reached = 0;
  std::vector<std::uint64_t> model_versions;  // distinct snapshot versions used

  std::size_t ticks() const { return samples.size(); }
  void summarize();
};

struct ExperimentRun {
  Experiment experiment = Experiment::A;
  std::uint64_t seed = 0;
  std::vector<ExperimentReport> training;  // plant laps with learning and no correction
  std::vector<ExperimentReport> plant;     // evaluation laps
  std::vector<ExperimentReport> twin;      // twin over the same evaluation laps
  ModelParams model;                       // newest model at the end of the run
  std::vector<double> loss_history;

  double max_error() const;
};

/// Distance from p to the segment [a, b].
double distance_to_segment(const PointPx& p, const PointPx& a, const PointPx& b);

/// Runs the configured experiment. Lockstep runs are a pure function of the
/// config. Throws ConfigInvalid, and propagates NonFiniteState.
ExperimentRun run_experiment(const ExperimentConfig& config);

struct PvGap {
  std::vector<double> gaps;
  double max_gap = 0.0;
  double mean_gap = 0.0;
};

/// Per-tick Euclidean gap between two trajectories on the same tick grid.
/// Throws LengthMismatch.
PvGap compare_pv(const ExperimentReport& plant, const ExperimentReport& twin);

enum class ReportFormat { Csv, PlotData };
ReportFormat report_format_from_string(const std::string& name);

/// CSV: `t_ms,x_px,y_px,theta,setpoint_x,setpoint_y,error_px`, one row per
/// tick. Plot data: gnuplot blocks (trajectory, setpoint, error) separated by
/// two blank lines. Throws IoFailure.
void emit_report(const ExperimentReport& report, const std::filesystem::path& path,
                 ReportFormat format);

struct ReportRow {
  double t_ms, x, y, theta, sx, sy, error;
};
/// Parses either format back into rows.
std::vector<ReportRow> read_report(const std::filesystem::path& path);

/// Writes the reports, summary and model of a run into `dir`.
void write_run(const ExperimentRun& run, const ExperimentConfig& config,
               const std::filesystem::path& dir);

std::string summarize_run(const ExperimentRun& run);

struct CalibrationResult {
  double slip_lat = 0.0;
  std::vector<double> max_errors;  // per seed, Experiment A
  double mean_max_error = 0.0;
};

/// Bisects the lateral slip coefficient until the mean Experiment A maximum
/// error over `seeds` sits at `target_px`.
CalibrationResult calibrate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                            double target_px = 105.0, int iterations = 14);

}  // namespace twinbed
