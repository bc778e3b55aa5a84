#include "pastille/control.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "pastille/csv.hpp"
#include "pastille/errors.hpp"
#include "pastille/imaging.hpp"

namespace pastille {

void ControllerConfig::validate() const {
  if (!std::isfinite(kp)) throw InvalidParameter("controller: K_P must be finite");
  if (!(tau_i > 0.0) || !std::isfinite(tau_i)) {
    throw InvalidParameter("controller: tau_I must be positive");
  }
  if (!(tau_d >= 0.0) || !std::isfinite(tau_d)) {
    throw InvalidParameter("controller: tau_D must be non-negative");
  }
  if (!(dt > 0.0)) throw InvalidParameter("controller: dt must be positive");
  if (!(rate_limit > 0.0)) throw InvalidParameter("controller: rate_limit must be positive");
  if (!(speed_min < speed_max)) throw InvalidParameter("controller: speed bounds out of order");
  if (!(initial_speed >= speed_min && initial_speed <= speed_max)) {
    throw InvalidParameter("controller: initial speed outside the speed bounds");
  }
  if (!std::isfinite(setpoint)) throw InvalidParameter("controller: setpoint must be finite");
}

double pid_delta(const std::array<double, 3>& e, const ControllerConfig& cfg) {
  if (!(cfg.tau_i > 0.0)) throw InvalidParameter("pid_delta: tau_I must be positive");
  if (!(cfg.dt > 0.0)) throw InvalidParameter("pid_delta: dt must be positive");
  return cfg.kp * (e[0] - e[1] + (cfg.dt / cfg.tau_i) * e[0] +
                   cfg.tau_d * (e[0] - 2.0 * e[1] + e[2]) / cfg.dt);
}

double apply_limits(double s_prev, double delta) {
  const double d = std::min(std::max(delta, -1.0), 1.0);
  return std::min(std::max(s_prev + d, 2.0), 12.0);
}

double apply_limits(double s_prev, double delta, const ControllerConfig& cfg) {
  const double d = std::min(std::max(delta, -cfg.rate_limit), cfg.rate_limit);
  return std::min(std::max(s_prev + d, cfg.speed_min), cfg.speed_max);
}

std::optional<double> OracleSensor::measure(const ProcessState& state) {
  return state.leading_row_temp();
}

PanetSensor::PanetSensor(SensorModel model) : model_(std::move(model)) {
  if (model_.net.output_shape().size() != 2) {
    throw ShapeError("panet sensor: model must have two outputs");
  }
}

std::string PanetSensor::tag() const { return arch_name(model_.arch); }

std::optional<double> PanetSensor::measure(const ProcessState& state) {
  flow_.reset();
  if (state.leading_row() == nullptr) return std::nullopt;
  const Shape in = model_.net.input_shape();
  // 1D inputs carry the belt width as channels, 2D inputs as columns.
  const int out_nx = in.w == 1 ? in.c : in.w;
  if (static_cast<std::size_t>(in.h) * out_nx != in.size()) {
    throw ShapeError("panet sensor: model input is not a single-channel frame");
  }
  const auto pixels = render_frame(state.field(), model_.scale.t_lo, model_.scale.t_hi, in.h,
                                   out_nx);
  const auto y = model_.predict(pixels, ws_);
  flow_ = y[1];
  return y[0];
}

std::unique_ptr<SensorPort> make_sensor_port(const std::string& tag,
                                             const std::string& model_path) {
  if (tag == "oracle") return std::make_unique<OracleSensor>();
  if (tag == "panet-1d" || tag == "panet-2d" || tag == "panet") {
    if (model_path.empty()) throw InvalidParameter("sensor " + tag + " needs a model file");
    auto model = load_model(model_path);
    if (tag != "panet" && tag != arch_name(model.arch)) {
      throw InvalidParameter("sensor " + tag + ": model file holds a " +
                             arch_name(model.arch) + " network");
    }
    return std::make_unique<PanetSensor>(std::move(model));
  }
  throw InvalidParameter("unknown sensor '" + tag + "' (oracle, panet-1d, panet-2d)");
}

ClosedLoop::ClosedLoop(ProcessConfig process, ControllerConfig controller,
                       std::shared_ptr<SensorPort> sensor, std::uint64_t seed)
    : process_(std::move(process), seed), cfg_(controller), sensor_(std::move(sensor)) {
  cfg_.validate();
  if (!sensor_) throw InvalidParameter("closed loop: no sensor");
  state_.speed = cfg_.initial_speed;
}

void ClosedLoop::set_controller(const ControllerConfig& cfg) {
  cfg.validate();
  cfg_ = cfg;
  state_.speed = std::clamp(state_.speed, cfg_.speed_min, cfg_.speed_max);
}

void ClosedLoop::set_manual(std::optional<double> speed) {
  if (speed) {
    if (!std::isfinite(*speed)) throw InvalidParameter("set_speed: speed must be finite");
    manual_ = std::clamp(*speed, cfg_.speed_min, cfg_.speed_max);
    state_.speed = *manual_;
  } else {
    manual_.reset();
  }
}

TrajectoryPoint ClosedLoop::step() {
  TrajectoryPoint p;
  p.step = process_.step_index();
  p.u_true = process_.leading_row_temp();
  p.u_pred = sensor_->measure(process_);
  p.flow_pred = sensor_->last_flow();
  if (p.u_pred) {
    p.error = cfg_.setpoint - *p.u_pred;
    state_.push(*p.error);
    if (!manual_) state_.speed = apply_limits(state_.speed, pid_delta(state_.e, cfg_), cfg_);
  }
  if (manual_) state_.speed = *manual_;
  p.speed = state_.speed;
  report_ = simulate_step(process_, state_.speed);
  p.flow_rate = report_.flow_rate;
  return p;
}

Trajectory run_closed_loop(const ProcessConfig& process, SensorPort& sensor,
                           const ControllerConfig& cfg, int steps, std::uint64_t seed) {
  if (steps < 1) throw InvalidParameter("closed loop: need at least one step");
  // borrowed, not owned
  std::shared_ptr<SensorPort> port(&sensor, [](SensorPort*) {});
  ClosedLoop loop(process, cfg, port, seed);
  Trajectory t;
  t.reserve(steps);
  for (int n = 0; n < steps; ++n) t.push_back(loop.step());
  return t;
}

namespace {

void put(std::ostream& os, const std::optional<double>& v) {
  if (v) os << fmt_double(*v);
}

}  // namespace

void write_trajectory_csv(std::ostream& os, const Trajectory& t) {
  os << "step,u_true,u_pred,error,speed,flow_rate\n";
  for (const auto& p : t) {
    os << p.step << ',';
    put(os, p.u_true);
    os << ',';
    put(os, p.u_pred);
    os << ',';
    put(os, p.error);
    os << ',' << fmt_double(p.speed) << ',' << fmt_double(p.flow_rate) << '\n';
  }
}

void write_trajectory_csv(const std::string& path, const Trajectory& t) {
  std::ofstream out(path);
  if (!out) throw IoError("trajectory: cannot write " + path);
  write_trajectory_csv(out, t);
  if (!out) throw IoError("trajectory: write failed on " + path);
}

}  // namespace pastille
