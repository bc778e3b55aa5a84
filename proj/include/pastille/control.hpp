#pragma once

// Velocity-form PID on belt speed, the sensor abstraction and the
// closed-loop runner shared by the CLI, the tuner and the bridge.

#include <array>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pastille/neural.hpp"
#include "pastille/process.hpp"

namespace pastille {

struct ControllerConfig {
  double kp = 47.0;
  double tau_i = 15.3;
  double tau_d = 0.0234;
  double setpoint = 90.0;  // °F
  double dt = 1.0;
  double rate_limit = 1.0;  // max |speed change| per step
  double speed_min = 2.0;
  double speed_max = 12.0;
  double initial_speed = 7.0;

  void validate() const;  // InvalidParameter
};

struct ControllerState {
  std::array<double, 3> e{};  // e_n, e_{n-1}, e_{n-2}
  double speed = 7.0;

  void push(double error) {
    e[2] = e[1];
    e[1] = e[0];
    e[0] = error;
  }
};

// Unclamped speed change from the last three errors.
double pid_delta(const std::array<double, 3>& e, const ControllerConfig& cfg);
// Rate clamp to [-1, 1], then range clamp to [2, 12].
double apply_limits(double s_prev, double delta);
double apply_limits(double s_prev, double delta, const ControllerConfig& cfg);

class SensorPort {
 public:
  virtual ~SensorPort() = default;
  virtual std::string tag() const = 0;
  // Temperature of the leading row; nullopt when the belt shows no pastilles.
  virtual std::optional<double> measure(const ProcessState& state) = 0;
  // Flow estimate from the last measurement, if the sensor produces one.
  virtual std::optional<double> last_flow() const { return std::nullopt; }
};

class OracleSensor : public SensorPort {
 public:
  std::string tag() const override { return "oracle"; }
  std::optional<double> measure(const ProcessState& state) override;
};

// Renders the field, resampled to the model's input dims when they differ.
class PanetSensor : public SensorPort {
 public:
  explicit PanetSensor(SensorModel model);
  std::string tag() const override;
  std::optional<double> measure(const ProcessState& state) override;
  std::optional<double> last_flow() const override { return flow_; }
  const SensorModel& model() const { return model_; }

 private:
  SensorModel model_;
  Network<float>::Workspace ws_;
  std::optional<double> flow_;
};

std::unique_ptr<SensorPort> make_sensor_port(const std::string& tag,
                                             const std::string& model_path = {});

struct TrajectoryPoint {
  long step = 0;
  std::optional<double> u_true;
  std::optional<double> u_pred;
  std::optional<double> error;  // empty on a sensor gap
  double speed = 0.0;           // speed applied during this step
  double flow_rate = 0.0;
  std::optional<double> flow_pred;
};

using Trajectory = std::vector<TrajectoryPoint>;

// One controlled simulation. Each step measures the belt as it stands,
// updates the speed and then advances the process at that speed.
class ClosedLoop {
 public:
  ClosedLoop(ProcessConfig process, ControllerConfig controller,
             std::shared_ptr<SensorPort> sensor, std::uint64_t seed);

  TrajectoryPoint step();

  ProcessState& process() { return process_; }
  const ProcessState& process() const { return process_; }
  const ControllerConfig& controller() const { return cfg_; }
  const ControllerState& controller_state() const { return state_; }
  SensorPort& sensor() { return *sensor_; }

  // Gains and setpoint; validated before they take effect.
  void set_controller(const ControllerConfig& cfg);
  // Manual mode holds the requested speed (range-clamped); nullopt
  // returns to automatic control from the current speed.
  void set_manual(std::optional<double> speed);
  bool manual() const { return manual_.has_value(); }
  double speed() const { return state_.speed; }
  const StepReport& last_report() const { return report_; }

 private:
  ProcessState process_;
  ControllerConfig cfg_;
  ControllerState state_;
  std::shared_ptr<SensorPort> sensor_;
  std::optional<double> manual_;
  StepReport report_;
};

Trajectory run_closed_loop(const ProcessConfig& process, SensorPort& sensor,
                           const ControllerConfig& cfg, int steps, std::uint64_t seed);

void write_trajectory_csv(std::ostream& os, const Trajectory& t);
void write_trajectory_csv(const std::string& path, const Trajectory& t);

}  // namespace pastille
