// pastille: command-line front end.
//
// Exit codes: 0 success, 2 usage or configuration error (including missing
// or malformed input files), 3 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "pastille/bridge.hpp"
#include "pastille/config.hpp"
#include "pastille/csv.hpp"
#include "pastille/errors.hpp"
#include "pastille/imaging.hpp"
#include "pastille/neural.hpp"
#include "pastille/process.hpp"
#include "pastille/tuning.hpp"

using namespace pastille;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct Usage : Error {
  using Error::Error;
};

RunConfig config_from(const std::string& path) {
  return path.empty() ? RunConfig{} : load_config(path);
}

void require_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(std::string("cannot open ") + what + " " + path);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, sep);) out.push_back(part);
  return out;
}

template <class T>
std::vector<T> parse_list(const std::string& s, const char* flag) {
  std::vector<T> out;
  for (const auto& p : split(s, ',')) {
    try {
      std::size_t used = 0;
      double v = std::stod(p, &used);
      if (used != p.size()) throw std::invalid_argument(p);
      out.push_back(static_cast<T>(v));
      if constexpr (std::is_integral_v<T>) {
        if (static_cast<double>(out.back()) != v) throw std::invalid_argument(p);
      }
    } catch (const std::exception&) {
      throw Usage(std::string(flag) + ": cannot parse '" + p + "'");
    }
  }
  if (out.empty()) throw Usage(std::string(flag) + ": empty list");
  return out;
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path == "-") return std::cout;
  file.open(path);
  if (!file) throw IoError("cannot write " + path);
  return file;
}

// ---- simulate ------------------------------------------------------------

struct SimulateArgs {
  std::string config, out = "-";
  long steps = 400;
  std::uint64_t seed = 0;
  std::optional<double> speed;
};

int run_simulate(const SimulateArgs& a) {
  auto cfg = config_from(a.config);
  if (a.steps < 0) throw Usage("--steps must be >= 0");
  const double speed = a.speed.value_or(cfg.open_loop_speed);
  if (!(speed >= cfg.process.speed_min && speed <= cfg.process.speed_max)) {
    throw Usage("--speed outside the configured speed bounds");
  }
  ProcessState state(cfg.process, a.seed);
  std::ofstream file;
  auto& os = open_out(a.out, file);
  write_report_header(os);
  for (long n = 0; n < a.steps; ++n) write_report_row(os, simulate_step(state, speed));
  os.flush();
  if (!os) throw IoError("write failed on " + a.out);
  return kOk;
}

// ---- gen-dataset ---------------------------------------------------------

struct GenArgs {
  std::string config, out;
  long frames = 0;
  std::uint64_t seed = 0;
  int jobs = 1;
};

int run_gen(const GenArgs& a) {
  auto cfg = config_from(a.config);
  if (a.frames < 1) throw Usage("--frames must be >= 1");
  if (a.jobs < 1) throw Usage("--jobs must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  generate_dataset(cfg.process, cfg.dataset, a.frames, a.seed, a.out, a.jobs);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "wrote %ld frames to %s in %.1f s\n", a.frames, a.out.c_str(), s);
  return kOk;
}

// ---- train / cv ----------------------------------------------------------

struct TrainArgs {
  std::string config, data, arch = "1d", out, history;
  std::optional<int> batch, width, epochs, patience;
  std::optional<double> lr;
  std::uint64_t seed = 0;
  bool verbose = false;
};

TrainConfig train_config(const RunConfig& cfg, const TrainArgs& a) {
  TrainConfig t = cfg.train;
  if (a.batch) t.batch_size = *a.batch;
  if (a.width) t.width = *a.width;
  if (a.epochs) t.max_epochs = *a.epochs;
  if (a.patience) t.patience = *a.patience;
  if (a.lr) t.learning_rate = *a.lr;
  t.seed = a.seed;
  t.verbose = a.verbose;
  if (t.batch_size < 1 || t.width < 1 || t.max_epochs < 1 || t.patience < 1 ||
      !(t.learning_rate > 0.0)) {
    throw Usage("training values must be positive");
  }
  return t;
}

int run_train(const TrainArgs& a) {
  auto cfg = config_from(a.config);
  const Arch arch = parse_arch(a.arch);
  const TrainConfig t = train_config(cfg, a);
  FileSource data(a.data);
  auto res = train(data, arch, t);
  save_model(res.model, a.out);
  if (!a.history.empty()) write_history_csv(res.history, a.history);
  const auto& best = res.history[res.best_epoch - 1];
  std::printf("best epoch %d of %zu: val rmse temp %.4f F, flow %.4f /dt\n", res.best_epoch,
              res.history.size(), best.val_rmse_temp, best.val_rmse_flow);
  return kOk;
}

struct CvArgs {
  std::string config, data, arch = "1d", out;
  std::string batches = "32,64,128", lrs = "0.0005,0.001,0.005", widths = "64,128,256";
  std::optional<int> epochs, patience;
  int folds = 5;
  std::uint64_t seed = 0;
};

int run_cv(const CvArgs& a) {
  auto cfg = config_from(a.config);
  const Arch arch = parse_arch(a.arch);
  HyperGrid grid{parse_list<int>(a.batches, "--batch"), parse_list<double>(a.lrs, "--lr"),
                 parse_list<int>(a.widths, "--width")};
  if (a.folds < 2) throw Usage("--folds must be >= 2");
  TrainConfig base = cfg.train;
  if (a.epochs) base.max_epochs = *a.epochs;
  if (a.patience) base.patience = *a.patience;
  base.seed = a.seed;
  FileSource data(a.data);
  auto rep = cross_validate(data, arch, grid, base, a.folds,
                            [](int fold, const TrainConfig& c, double val) {
                              std::fprintf(stderr, "fold %d batch %d lr %g width %d: val %.5f\n",
                                           fold, c.batch_size, c.learning_rate, c.width, val);
                            });
  write_cv_csv(rep, a.out);
  std::printf("rmse temp %.4f +- %.4f, flow %.4f +- %.4f; r2 temp %.4f, flow %.4f\n",
              rep.mean.rmse_temp, rep.std.rmse_temp, rep.mean.rmse_flow, rep.std.rmse_flow,
              rep.mean.r2_temp, rep.mean.r2_flow);
  return kOk;
}

// ---- saliency ------------------------------------------------------------

struct SaliencyArgs {
  std::string model, data, out;
  long index = 0;
  int samples = 25;
  double sigma = 0.001;
  std::uint64_t seed = 0;
};

int run_saliency(const SaliencyArgs& a) {
  if (a.samples < 1) throw Usage("--M must be >= 1");
  if (!(a.sigma >= 0.0)) throw Usage("--sigma must be >= 0");
  auto model = load_model(a.model);
  DatasetReader reader(a.data);
  if (a.index < 0 || a.index >= static_cast<long>(reader.header().count)) {
    throw Usage("--index outside the dataset (" + std::to_string(reader.header().count) +
                " records)");
  }
  const Frame f = reader.read(static_cast<std::uint32_t>(a.index));
  auto map = smoothgrad(model, f.pixels, {f.leading_temp, f.flow_rate}, a.samples, a.sigma,
                        a.seed);
  std::ofstream file;
  auto& os = open_out(a.out, file);
  for (int r = 0; r < f.ny; ++r) {
    for (int c = 0; c < f.nx; ++c) {
      if (c) os << ',';
      os << fmt_double(map[static_cast<std::size_t>(r) * f.nx + c]);
    }
    os << '\n';
  }
  if (!os) throw IoError("write failed on " + a.out);
  return kOk;
}

// ---- closed-loop ---------------------------------------------------------

struct LoopArgs {
  std::string config, sensor = "oracle", gains, out = "-";
  std::optional<double> setpoint;
  int steps = 400;
  std::uint64_t seed = 0;
};

ControllerConfig controller_from(const RunConfig& cfg, const std::string& gains,
                                 std::optional<double> setpoint) {
  ControllerConfig c = cfg.controller;
  if (!gains.empty()) {
    const auto g = parse_list<double>(gains, "--gains");
    if (g.size() != 3) throw Usage("--gains expects KP,TI,TD");
    c.kp = g[0];
    c.tau_i = g[1];
    c.tau_d = g[2];
  }
  if (setpoint) c.setpoint = *setpoint;
  try {
    c.validate();
  } catch (const InvalidParameter& e) {
    throw Usage(e.what());
  }
  return c;
}

// "oracle", or a model file (tag checked against the file).
std::unique_ptr<SensorPort> sensor_from(const std::string& spec) {
  if (spec == "oracle") return make_sensor_port("oracle");
  require_file(spec, "model file");
  return make_sensor_port("panet", spec);
}

int run_closed_loop_cmd(const LoopArgs& a) {
  auto cfg = config_from(a.config);
  const auto c = controller_from(cfg, a.gains, a.setpoint);
  if (a.steps < 1) throw Usage("--steps must be >= 1");
  auto sensor = sensor_from(a.sensor);
  std::ofstream file;
  auto& os = open_out(a.out, file);
  const auto t = run_closed_loop(cfg.process, *sensor, c, a.steps, a.seed);
  write_trajectory_csv(os, t);
  if (!os) throw IoError("write failed on " + a.out);
  return kOk;
}

// ---- tune / surface ------------------------------------------------------

struct TuneArgs {
  std::string config, out, sensor = "oracle";
  std::optional<int> budget;
  std::optional<double> kappa;
  std::uint64_t seed = 0;
};

ObjectiveConfig objective_from(const RunConfig& cfg, const std::string& sensor) {
  ObjectiveConfig oc = cfg.objective;
  if (sensor != "oracle") {
    require_file(sensor, "model file");
    oc.sensor = "panet";
    oc.model_path = sensor;
  } else if (oc.sensor != "oracle") {
    require_file(oc.model_path, "model file");
  }
  return oc;
}

int run_tune(const TuneArgs& a) {
  auto cfg = config_from(a.config);
  TunerConfig tc = cfg.tuner;
  if (a.budget) {
    if (*a.budget < tc.partitions || *a.budget % tc.partitions != 0) {
      throw Usage("--budget must be a positive multiple of " + std::to_string(tc.partitions));
    }
    tc.iterations_per_partition = *a.budget / tc.partitions;
  }
  if (a.kappa) tc.kappa = *a.kappa;
  tc.seed = a.seed;
  try {
    tc.validate();
  } catch (const InvalidParameter& e) {
    throw Usage(e.what());
  }
  const auto oc = objective_from(cfg, a.sensor);
  auto res = tune(tc, [&](const Params& p, int iter) {
    const double j = objective(p, cfg.process, oc, a.seed + static_cast<std::uint64_t>(iter));
    std::fprintf(stderr, "iter %2d  K_P %8.4f  tau_I %8.4f  tau_D %8.4f  J %.3f\n", iter, p[0],
                 p[1], p[2], j);
    return j;
  });
  write_tune_history_csv(a.out, res.history);
  std::printf("best K_P %.6g tau_I %.6g tau_D %.6g J %.6g\n", res.best[0], res.best[1],
              res.best[2], res.best_j);
  return kOk;
}

struct SurfaceArgs {
  std::string config, out, grid = "32x32", sensor = "oracle";
  double tau_d = 0.0234;
  std::uint64_t seed = 0;
  int jobs = 1;
};

int run_surface(const SurfaceArgs& a) {
  auto cfg = config_from(a.config);
  const auto dims = split(a.grid, 'x');
  if (dims.size() != 2) throw Usage("--grid expects NxM");
  const auto n = parse_list<int>(dims[0], "--grid");
  const auto m = parse_list<int>(dims[1], "--grid");
  if (n[0] < 2 || m[0] < 2) throw Usage("--grid needs at least 2x2");
  if (!(a.tau_d >= 0.0)) throw Usage("--tau-d must be >= 0");
  if (a.jobs < 1) throw Usage("--jobs must be >= 1");
  const auto oc = objective_from(cfg, a.sensor);
  auto pts = objective_surface(cfg.tuner, a.tau_d, n[0], m[0], cfg.process, oc, a.seed, a.jobs);
  write_surface_csv(a.out, pts);
  return kOk;
}

// ---- serve ---------------------------------------------------------------

struct ServeArgs {
  std::string config, sensor, address = "127.0.0.1";
  std::optional<int> port, downsample;
  std::optional<double> tick_rate;
  std::optional<long> max_steps;
  std::uint64_t seed = 0;
  bool manual = false;
};

bridge::Server* g_server = nullptr;

int run_serve(const ServeArgs& a) {
  auto cfg = config_from(a.config);
  bridge::SessionOptions o;
  o.process = cfg.process;
  o.controller = cfg.controller;
  o.tick_rate = a.tick_rate.value_or(cfg.bridge.tick_rate);
  o.downsample = a.downsample.value_or(cfg.bridge.downsample);
  o.seed = a.seed;
  o.manual = a.manual;
  o.max_steps = a.max_steps;
  const std::string sensor = a.sensor.empty() ? cfg.bridge.sensor : a.sensor;
  if (sensor == "oracle") {
    o.sensor = "oracle";
  } else {
    o.model_path = sensor.rfind("panet", 0) == 0 ? cfg.bridge.model_path : sensor;
    require_file(o.model_path, "model file");
    o.sensor = "panet";
  }
  const int port = a.port.value_or(cfg.bridge.port);
  if (port < 0 || port > 65535) throw Usage("--port out of range");
  if (o.downsample < 1) throw Usage("--downsample must be >= 1");
  if (!(o.tick_rate >= 0.0)) throw Usage("--tick-rate must be >= 0");

  bridge::Server server(o, static_cast<unsigned short>(port), a.address);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  server.start();
  std::fprintf(stderr, "serving ws://%s:%u/session\n", a.address.c_str(), server.port());
  server.wait();
  g_server = nullptr;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pastillation digital twin: simulation, datasets, PaNet sensors, PID control, "
               "tuning and a live session service"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "pastille 1.0");

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "open-loop run at fixed speed; StepReport CSV");
  c_sim->add_option("--config", sim.config, "run configuration file");
  c_sim->add_option("--steps", sim.steps, "number of steps")->capture_default_str();
  c_sim->add_option("--seed", sim.seed, "random seed")->capture_default_str();
  c_sim->add_option("--speed", sim.speed, "belt speed (default: process.open_loop_speed)");
  c_sim->add_option("--out", sim.out, "output CSV, - for stdout")->capture_default_str();

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-dataset", "generate a PASTSET1 frame dataset");
  c_gen->add_option("--config", gen.config, "run configuration file");
  c_gen->add_option("--frames", gen.frames, "number of frames")->required();
  c_gen->add_option("--seed", gen.seed, "random seed")->capture_default_str();
  c_gen->add_option("--out", gen.out, "output dataset file")->required();
  c_gen->add_option("--jobs", gen.jobs, "parallel episodes")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a PaNet sensor");
  c_train->add_option("--config", tr.config, "run configuration file");
  c_train->add_option("--data", tr.data, "dataset file")->required();
  c_train->add_option("--arch", tr.arch, "1d or 2d")->capture_default_str();
  c_train->add_option("--batch", tr.batch, "batch size (default: train.batch_size)");
  c_train->add_option("--lr", tr.lr, "learning rate (default: train.learning_rate)");
  c_train->add_option("--width", tr.width, "filters n (default: train.width)");
  c_train->add_option("--epochs", tr.epochs, "max epochs (default: train.max_epochs)");
  c_train->add_option("--patience", tr.patience, "early-stopping patience");
  c_train->add_option("--seed", tr.seed, "random seed")->capture_default_str();
  c_train->add_option("--out", tr.out, "output model file")->required();
  c_train->add_option("--history", tr.history, "per-epoch CSV");
  c_train->add_flag("--verbose", tr.verbose, "print every epoch");

  CvArgs cv;
  auto* c_cv = app.add_subcommand("cv", "five-fold cross-validation with a grid search");
  c_cv->add_option("--config", cv.config, "run configuration file");
  c_cv->add_option("--data", cv.data, "dataset file")->required();
  c_cv->add_option("--arch", cv.arch, "1d or 2d")->capture_default_str();
  c_cv->add_option("--batch", cv.batches, "batch sizes")->capture_default_str();
  c_cv->add_option("--lr", cv.lrs, "learning rates")->capture_default_str();
  c_cv->add_option("--width", cv.widths, "widths")->capture_default_str();
  c_cv->add_option("--epochs", cv.epochs, "max epochs per fit");
  c_cv->add_option("--patience", cv.patience, "early-stopping patience");
  c_cv->add_option("--folds", cv.folds, "number of folds")->capture_default_str();
  c_cv->add_option("--seed", cv.seed, "random seed")->capture_default_str();
  c_cv->add_option("--out", cv.out, "report CSV")->required();

  SaliencyArgs sal;
  auto* c_sal = app.add_subcommand("saliency", "SmoothGrad map of one dataset frame");
  c_sal->add_option("--model", sal.model, "model file")->required();
  c_sal->add_option("--data", sal.data, "dataset file")->required();
  c_sal->add_option("--index", sal.index, "record index")->capture_default_str();
  c_sal->add_option("--M", sal.samples, "noisy samples")->capture_default_str();
  c_sal->add_option("--sigma", sal.sigma, "noise standard deviation")->capture_default_str();
  c_sal->add_option("--seed", sal.seed, "random seed")->capture_default_str();
  c_sal->add_option("--out", sal.out, "map CSV (ny rows of nx values)")->required();

  LoopArgs lp;
  auto* c_loop = app.add_subcommand("closed-loop", "PID closed loop; trajectory CSV");
  c_loop->add_option("--config", lp.config, "run configuration file");
  c_loop->add_option("--sensor", lp.sensor, "oracle or a model file")->capture_default_str();
  c_loop->add_option("--setpoint", lp.setpoint, "°F (default: controller.setpoint)");
  c_loop->add_option("--gains", lp.gains, "KP,TI,TD (default: 47.0,15.3,0.0234)");
  c_loop->add_option("--steps", lp.steps, "number of steps")->capture_default_str();
  c_loop->add_option("--seed", lp.seed, "random seed")->capture_default_str();
  c_loop->add_option("--out", lp.out, "output CSV, - for stdout")->capture_default_str();

  TuneArgs tu;
  auto* c_tune = app.add_subcommand("tune", "Bayesian optimization of the PID gains");
  c_tune->add_option("--config", tu.config, "run configuration file");
  c_tune->add_option("--budget", tu.budget, "evaluations (default 30)");
  c_tune->add_option("--kappa", tu.kappa, "LCB exploration weight (default 2.6)");
  c_tune->add_option("--sensor", tu.sensor, "oracle or a model file")->capture_default_str();
  c_tune->add_option("--seed", tu.seed, "random seed")->capture_default_str();
  c_tune->add_option("--out", tu.out, "history CSV")->required();

  SurfaceArgs su;
  auto* c_surf = app.add_subcommand("surface", "objective over a (K_P, tau_I) grid");
  c_surf->add_option("--config", su.config, "run configuration file");
  c_surf->add_option("--grid", su.grid, "NxM points")->capture_default_str();
  c_surf->add_option("--tau-d", su.tau_d, "fixed tau_D")->capture_default_str();
  c_surf->add_option("--sensor", su.sensor, "oracle or a model file")->capture_default_str();
  c_surf->add_option("--seed", su.seed, "random seed")->capture_default_str();
  c_surf->add_option("--jobs", su.jobs, "parallel evaluations")->capture_default_str();
  c_surf->add_option("--out", su.out, "surface CSV")->required();

  ServeArgs sv;
  auto* c_serve = app.add_subcommand("serve", "live session service for the console");
  c_serve->add_option("--config", sv.config, "run configuration file");
  c_serve->add_option("--port", sv.port, "TCP port (default: bridge.port, 0 = any)");
  c_serve->add_option("--address", sv.address, "bind address")->capture_default_str();
  c_serve->add_option("--sensor", sv.sensor, "oracle or a model file (default: bridge.sensor)");
  c_serve->add_option("--tick-rate", sv.tick_rate, "steps per second, 0 = unpaced");
  c_serve->add_option("--downsample", sv.downsample, "default pixel downsampling factor");
  c_serve->add_option("--max-steps", sv.max_steps, "stop after this many steps");
  c_serve->add_option("--seed", sv.seed, "random seed")->capture_default_str();
  c_serve->add_flag("--manual", sv.manual, "start in manual mode");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*c_sim) return run_simulate(sim);
    if (*c_gen) return run_gen(gen);
    if (*c_train) return run_train(tr);
    if (*c_cv) return run_cv(cv);
    if (*c_sal) return run_saliency(sal);
    if (*c_loop) return run_closed_loop_cmd(lp);
    if (*c_tune) return run_tune(tu);
    if (*c_surf) return run_surface(su);
    if (*c_serve) return run_serve(sv);
  } catch (const Usage& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s (offset %llu)\n", e.what(),
                 static_cast<unsigned long long>(e.offset()));
    return kUsage;
  } catch (const InvalidParameter& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failed: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
