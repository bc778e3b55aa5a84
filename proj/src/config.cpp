#include "pastille/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <type_traits>

#include "pastille/csv.hpp"
#include "pastille/errors.hpp"

namespace pastille {

namespace {

struct Entry {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;  // throws std::invalid_argument
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
T parse_value(const std::string& s) {
  if constexpr (std::is_same_v<T, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("expected true or false");
  } else {
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
      throw std::invalid_argument(std::is_integral_v<T> ? "expected an integer"
                                                        : "expected a number");
    }
    return v;
  }
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    return fmt_double(v);
  } else {
    return std::to_string(v);
  }
}

template <class F>
Entry bind(std::string key, F field) {
  using T = std::remove_reference_t<decltype(field(std::declval<RunConfig&>()))>;
  return Entry{std::move(key),
               [field](RunConfig& c, const std::string& s) { field(c) = parse_value<T>(s); },
               [field](const RunConfig& c) {
                 return format_value<T>(field(const_cast<RunConfig&>(c)));
               }};
}

#define PASTILLE_KEY(name, member) bind(name, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      PASTILLE_KEY("process.nx", process.nx),
      PASTILLE_KEY("process.ny", process.ny),
      PASTILLE_KEY("process.dx", process.dx),
      PASTILLE_KEY("process.dy", process.dy),
      PASTILLE_KEY("process.dt", process.dt),
      PASTILLE_KEY("process.alpha", process.alpha),
      PASTILLE_KEY("process.u_inf", process.u_inf),
      PASTILLE_KEY("process.shell_speed", process.shell_speed),
      PASTILLE_KEY("process.rows_on_shell", process.rows_on_shell),
      PASTILLE_KEY("process.nozzles_per_row", process.nozzles_per_row),
      PASTILLE_KEY("process.deposit_temp", process.deposit_temp),
      PASTILLE_KEY("process.pastille_footprint", process.pastille_footprint),
      PASTILLE_KEY("process.speed_min", process.speed_min),
      PASTILLE_KEY("process.speed_max", process.speed_max),
      PASTILLE_KEY("process.open_loop_speed", open_loop_speed),

      PASTILLE_KEY("cooling.rows", process.cooling.rows),
      PASTILLE_KEY("cooling.jets_per_row", process.cooling.jets_per_row),
      PASTILLE_KEY("cooling.water_rate", process.cooling.water_rate),
      PASTILLE_KEY("cooling.water_temp", process.cooling.water_temp),
      PASTILLE_KEY("cooling.belt_thickness", process.cooling.belt_thickness),
      PASTILLE_KEY("cooling.belt_density", process.cooling.belt_density),
      PASTILLE_KEY("cooling.cp_water", process.cooling.cp_water),
      PASTILLE_KEY("cooling.cp_belt", process.cooling.cp_belt),
      PASTILLE_KEY("cooling.intensity", process.cooling.intensity),

      PASTILLE_KEY("clog.scale", process.clog_scale),
      PASTILLE_KEY("clog.mean_duration", process.clog_duration),
      PASTILLE_KEY("clog.table", process.clog_table),

      PASTILLE_KEY("controller.kp", controller.kp),
      PASTILLE_KEY("controller.tau_i", controller.tau_i),
      PASTILLE_KEY("controller.tau_d", controller.tau_d),
      PASTILLE_KEY("controller.setpoint", controller.setpoint),
      PASTILLE_KEY("controller.rate_limit", controller.rate_limit),
      PASTILLE_KEY("controller.initial_speed", controller.initial_speed),

      PASTILLE_KEY("tuner.kp_min", tuner.lo[0]),
      PASTILLE_KEY("tuner.kp_max", tuner.hi[0]),
      PASTILLE_KEY("tuner.tau_i_min", tuner.lo[1]),
      PASTILLE_KEY("tuner.tau_i_max", tuner.hi[1]),
      PASTILLE_KEY("tuner.tau_d_min", tuner.lo[2]),
      PASTILLE_KEY("tuner.tau_d_max", tuner.hi[2]),
      PASTILLE_KEY("tuner.kappa", tuner.kappa),
      PASTILLE_KEY("tuner.iterations_per_partition", tuner.iterations_per_partition),
      PASTILLE_KEY("tuner.initial_design", tuner.initial_design),
      PASTILLE_KEY("tuner.noise", tuner.noise),
      PASTILLE_KEY("tuner.lengthscale", tuner.lengthscale),
      PASTILLE_KEY("tuner.candidates", tuner.candidates),

      PASTILLE_KEY("objective.steps", objective.steps),
      PASTILLE_KEY("objective.setpoint", objective.setpoint),
      PASTILLE_KEY("objective.sensor", objective.sensor),
      PASTILLE_KEY("objective.model", objective.model_path),

      PASTILLE_KEY("train.batch_size", train.batch_size),
      PASTILLE_KEY("train.learning_rate", train.learning_rate),
      PASTILLE_KEY("train.width", train.width),
      PASTILLE_KEY("train.max_epochs", train.max_epochs),
      PASTILLE_KEY("train.patience", train.patience),
      PASTILLE_KEY("train.val_fraction", train.val_fraction),
      PASTILLE_KEY("train.shuffle", train.shuffle),
      PASTILLE_KEY("train.mirror", train.mirror),
      PASTILLE_KEY("train.flow_scale", train.flow_scale),

      PASTILLE_KEY("dataset.speed_lo_min", dataset.speed_lo_min),
      PASTILLE_KEY("dataset.speed_lo_max", dataset.speed_lo_max),
      PASTILLE_KEY("dataset.speed_band_min", dataset.speed_band_min),
      PASTILLE_KEY("dataset.speed_band_max", dataset.speed_band_max),
      PASTILLE_KEY("dataset.segment_min", dataset.segment_min),
      PASTILLE_KEY("dataset.segment_max", dataset.segment_max),
      PASTILLE_KEY("dataset.ramp", dataset.ramp),
      PASTILLE_KEY("dataset.clog_scale_min", dataset.clog_scale_min),
      PASTILLE_KEY("dataset.clog_scale_max", dataset.clog_scale_max),
      PASTILLE_KEY("dataset.clog_duration_min", dataset.clog_duration_min),
      PASTILLE_KEY("dataset.clog_duration_max", dataset.clog_duration_max),
      PASTILLE_KEY("dataset.cooling_min", dataset.cooling_min),
      PASTILLE_KEY("dataset.cooling_max", dataset.cooling_max),
      PASTILLE_KEY("dataset.dim_jitter", dataset.dim_jitter),
      PASTILLE_KEY("dataset.warmup", dataset.warmup),
      PASTILLE_KEY("dataset.stride", dataset.stride),
      PASTILLE_KEY("dataset.frames_per_episode", dataset.frames_per_episode),

      PASTILLE_KEY("bridge.port", bridge.port),
      PASTILLE_KEY("bridge.tick_rate", bridge.tick_rate),
      PASTILLE_KEY("bridge.downsample", bridge.downsample),
      PASTILLE_KEY("bridge.sensor", bridge.sensor),
      PASTILLE_KEY("bridge.model", bridge.model_path),
  };
  return entries;
}

#undef PASTILLE_KEY

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void rebuild_cooling(RunConfig& c) {
  auto& p = c.process;
  if (p.nx < 3 || p.ny < 3 || p.cooling.rows < 1) return;  // validate() reports it
  CoolingConfig fresh = CoolingConfig::uniform_bands(p.nx, p.ny, p.cooling.rows);
  p.cooling.wetted_regions = std::move(fresh.wetted_regions);
}

}  // namespace

void RunConfig::validate() const {
  auto wrap = [](const char* module, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string(module) + ": " + e.what());
    }
  };
  wrap("process", [&] { process.validate(); });
  wrap("process", [&] {
    if (!(open_loop_speed >= process.speed_min && open_loop_speed <= process.speed_max)) {
      throw InvalidParameter("open_loop_speed outside the speed bounds");
    }
  });
  wrap("controller", [&] {
    ControllerConfig c = controller;
    c.speed_min = process.speed_min;
    c.speed_max = process.speed_max;
    c.validate();
  });
  wrap("tuner", [&] { tuner.validate(); });
  wrap("objective", [&] {
    if (objective.steps < 1) throw InvalidParameter("steps must be >= 1");
  });
  wrap("train", [&] {
    if (train.batch_size < 1 || !(train.learning_rate > 0.0) || train.width < 1 ||
        train.max_epochs < 1 || train.patience < 1 || !(train.flow_scale > 0.0f) ||
        !(train.val_fraction > 0.0 && train.val_fraction < 1.0)) {
      throw InvalidParameter("values must be positive and val_fraction in (0, 1)");
    }
  });
  wrap("dataset", [&] {
    const auto& d = dataset;
    if (!(d.speed_lo_min <= d.speed_lo_max) || !(d.speed_band_min <= d.speed_band_max) ||
        d.segment_min < 1 || d.segment_min > d.segment_max || !(d.ramp > 0.0) ||
        !(d.clog_scale_min >= 0.0 && d.clog_scale_min <= d.clog_scale_max) ||
        !(d.clog_duration_min >= 1.0 && d.clog_duration_min <= d.clog_duration_max) ||
        !(d.cooling_min > 0.0 && d.cooling_min <= d.cooling_max) || !(d.dim_jitter >= 0.0) ||
        d.dim_jitter >= 1.0 ||
        d.stride < 1 || d.frames_per_episode < 1) {
      throw InvalidParameter("ranges must be ordered and counts positive");
    }
  });
  wrap("bridge", [&] {
    if (bridge.port < 0 || bridge.port > 65535) throw InvalidParameter("port out of range");
    if (!(bridge.tick_rate >= 0.0)) throw InvalidParameter("tick_rate must be >= 0");
    if (bridge.downsample < 1) throw InvalidParameter("downsample must be >= 1");
  });
}

RunConfig parse_config(std::istream& in, const std::string& source) {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key: value'",
                        lineno);
    }
    const std::string key = trim(line.substr(0, colon));
    const std::string value = trim(line.substr(colon + 1));
    const auto& reg = registry();
    const auto it =
        std::find_if(reg.begin(), reg.end(), [&](const Entry& e) { return e.key == key; });
    if (it == reg.end()) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown key '" + key + "'",
                        lineno, key);
    }
    try {
      it->set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + key + ": " + e.what() +
                            ", got '" + value + "'",
                        lineno, key);
    }
  }
  rebuild_cooling(cfg);
  cfg.controller.speed_min = cfg.process.speed_min;
  cfg.controller.speed_max = cfg.process.speed_max;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  return parse_config(in, path);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& e : registry()) keys.push_back(e.key);
  return keys;
}

void write_config(std::ostream& os, const RunConfig& cfg) {
  for (const auto& e : registry()) os << e.key << ": " << e.get(cfg) << '\n';
}

}  // namespace pastille
