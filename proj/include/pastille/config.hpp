#pragma once

// Run configuration: one "key: value" per line, '#' comments, dotted keys
// grouped by module (process., cooling., clog., controller., tuner.,
// objective., train., dataset., bridge.). configs/default.conf lists them all.

#include <iosfwd>
#include <string>
#include <vector>

#include "pastille/control.hpp"
#include "pastille/imaging.hpp"
#include "pastille/neural.hpp"
#include "pastille/process.hpp"
#include "pastille/tuning.hpp"

namespace pastille {

struct BridgeConfig {
  int port = 8080;
  double tick_rate = 10.0;  // steps per second; 0 runs unpaced
  int downsample = 1;       // default spatial factor for frame pixels
  std::string sensor = "oracle";
  std::string model_path;
};

struct RunConfig {
  ProcessConfig process;
  double open_loop_speed = 7.0;  // speed used by `simulate`
  ControllerConfig controller;
  TunerConfig tuner;
  ObjectiveConfig objective;
  TrainConfig train;
  DatasetSpec dataset;
  BridgeConfig bridge;

  // Throws ConfigError naming the offending module.
  void validate() const;
};

// Throws ConfigError with the line and key of the first problem.
RunConfig parse_config(std::istream& in, const std::string& source = "config");
RunConfig load_config(const std::string& path);  // IoError when unreadable

// Every accepted key, in documentation order.
std::vector<std::string> config_keys();
// Writes every key with its current value; parses back to the same config.
void write_config(std::ostream& os, const RunConfig& cfg);

}  // namespace pastille
