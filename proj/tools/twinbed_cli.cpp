#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "twinbed/harness.hpp"
#include "twinbed/messages.hpp"

using namespace twinbed;

namespace {

ExperimentConfig load_config(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : ExperimentConfig::load(path);
}

int cmd_run(const std::string& experiment, const std::string& config_path, std::uint64_t seed,
            const std::string& out_dir, bool lockstep, const std::vector<std::string>& overrides) {
  ExperimentConfig config = load_config(config_path);
  config.experiment = experiment_from_string(experiment);
  config.seed = seed;
  config.lockstep = lockstep;
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigInvalid("override '" + kv + "' is not key=value");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  std::filesystem::create_directories(out_dir);
  config.log_path = std::filesystem::path(out_dir) / "bus.log";
  config.validate();

  const ExperimentRun run = run_experiment(config);
  write_run(run, config, out_dir);
  std::cout << summarize_run(run);
  return 0;
}

int cmd_replay(const std::string& log_path, bool verbose) {
  const std::vector<LogRecord> records = read_log(log_path);
  std::map<std::string, std::size_t> counts;
  std::uint32_t first = 0, last = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    ++counts[r.topic];
    if (i == 0) first = r.timestamp;
    last = r.timestamp;
    if (verbose) std::cout << r.timestamp << ' ' << r.topic << ' ' << describe_frame(r.frame) << '\n';
  }
  std::cout << records.size() << " frames, t=" << first << ".." << last << " ms\n";
  for (const auto& [topic, n] : counts) std::cout << "  " << topic << ": " << n << '\n';
  return 0;
}

int cmd_learn(const std::string& log_path, const std::string& out_path) {
  const std::vector<LogRecord> records = read_log(log_path);
  Bus bus;
  NominalModel nominal;
  TrainConfig train;
  train.replay_capacity = std::max<std::size_t>(records.size(), 1);
  LearningServer server(train, nominal, 7);
  for (const auto& r : records) {
    if (r.topic == topics::kPlantState || r.topic == topics::kPlantCommand) {
      bus.publish(r.topic, r.frame);
    }
    // Drain periodically so the ring never laps the server.
    if (bus.topic(topics::kPlantState).published() % 1024 == 0) server.ingest(bus);
  }
  server.ingest(bus);
  const ModelParams model = fit_least_squares(server.buffer());
  const Dataset data = Dataset::from(server.buffer());

  std::ofstream out(out_path);
  if (!out) throw IoFailure("cannot write " + out_path);
  char buf[64];
  out << "transitions " << data.size() << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", evaluate_mse(model, data));
  out << "train_loss " << buf << "\n";
  for (std::size_t r = 0; r < kOutputCount; ++r) {
    for (std::size_t c = 0; c < kFeatureCount; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", model.W(r, c));
      out << (c ? " " : "") << buf;
    }
    out << '\n';
  }
  std::cout << "fitted " << data.size() << " transitions, mse " << evaluate_mse(model, data)
            << " -> " << out_path << '\n';
  return 0;
}

int cmd_plot(const std::string& report_path, const std::string& format) {
  const ReportFormat fmt = report_format_from_string(format);
  const std::vector<ReportRow> rows = read_report(report_path);
  ExperimentReport report;
  report.label = std::filesystem::path(report_path).stem().string();
  for (const auto& r : rows) {
    TrajectorySample s;
    s.t = Timestamp{static_cast<std::int64_t>(r.t_ms)};
    s.position = {r.x, r.y};
    s.theta = r.theta;
    s.setpoint = {r.sx, r.sy};
    s.error = r.error;
    report.samples.push_back(s);
  }
  const auto tmp = std::filesystem::temp_directory_path() / "twinbed_plot.tmp";
  emit_report(report, tmp, fmt);
  std::ifstream in(tmp);
  std::cout << in.rdbuf();
  std::filesystem::remove(tmp);
  return 0;
}

int cmd_calibrate(const std::string& config_path, std::vector<std::uint64_t> seeds,
                  double target) {
  ExperimentConfig config = load_config(config_path);
  if (seeds.empty()) seeds = {1, 2, 3, 4, 5};
  const CalibrationResult r = calibrate(config, seeds, target);
  std::printf("plant.slip_lat = %.6f\n", r.slip_lat);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    std::printf("  seed %llu: max_error_px=%.3f\n", static_cast<unsigned long long>(seeds[i]),
                r.max_errors[i]);
  }
  std::printf("  mean=%.3f\n", r.mean_max_error);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twinbed: physical/virtual robot testbed simulator"};
  app.require_subcommand(1);

  std::string experiment = "A", config_path, out_dir = "out";
  std::uint64_t seed = 1;
  bool lockstep = true;
  bool free_run = false;
  std::vector<std::string> overrides;
  auto* run = app.add_subcommand("run", "run experiment A, B or C");
  run->add_option("--experiment", experiment, "A, B or C")->check(CLI::IsMember({"A", "B", "C"}));
  run->add_option("--config", config_path, "key = value config file");
  run->add_option("--seed", seed, "random seed");
  run->add_option("--out", out_dir, "output directory");
  run->add_flag("--lockstep", lockstep, "deterministic shared tick (default)");
  run->add_flag("--free-run", free_run, "run the learner on its own thread");
  run->add_option("--set", overrides, "config override key=value (repeatable)");

  std::string log_path;
  bool verbose = false;
  auto* replay = app.add_subcommand("replay", "decode and summarize a bus log");
  replay->add_option("--log", log_path, "bus log")->required();
  replay->add_flag("-v,--verbose", verbose, "print every frame");

  std::string learn_out = "model.txt";
  auto* learn = app.add_subcommand("learn", "offline least-squares fit from a bus log");
  learn->add_option("--log", log_path, "bus log")->required();
  learn->add_option("--out", learn_out, "model output path");

  std::string report_path, format = "csv";
  auto* plot = app.add_subcommand("plot", "convert a report between csv and plot data");
  plot->add_option("--report", report_path, "report file (csv or plot data)")->required();
  plot->add_option("--format", format, "csv or plotdata")->check(CLI::IsMember({"csv", "plotdata"}));

  std::vector<std::uint64_t> seeds;
  double target = 105.0;
  auto* cal = app.add_subcommand("calibrate", "fit lateral slip to the Experiment A error band");
  cal->add_option("--config", config_path, "base config");
  cal->add_option("--seeds", seeds, "seeds to average over");
  cal->add_option("--target", target, "target mean max error, px");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(experiment, config_path, seed, out_dir, lockstep && !free_run, overrides);
    if (*replay) return cmd_replay(log_path, verbose);
    if (*learn) return cmd_learn(log_path, learn_out);
    if (*plot) return cmd_plot(report_path, format);
    if (*cal) return cmd_calibrate(config_path, seeds, target);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
