#include "pastille/process.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "pastille/csv.hpp"
#include "pastille/errors.hpp"

namespace pastille {

int ProcessConfig::deposition_period() const {
  const double period = 2.0 * std::numbers::pi / (shell_speed * rows_on_shell * dt);
  return std::max(1, static_cast<int>(std::lround(period)));
}

double ProcessConfig::nozzle_position(int k) const {
  return (k + 0.5) * length_x() / nozzles_per_row / dx;
}

int ProcessConfig::nozzle_column(int k) const {
  const int col = static_cast<int>(std::floor(nozzle_position(k)));
  return std::clamp(col, 1 + pastille_footprint, nx - 2 - pastille_footprint);
}

void ProcessConfig::validate() const {
  if (nx < 3 || ny < 3) throw InvalidParameter("process: nx and ny must be at least 3");
  if (!(dx > 0.0) || !(dy > 0.0) || !(dt > 0.0) || !(alpha >= 0.0)) {
    throw InvalidParameter("process: dx, dy, dt must be positive and alpha non-negative");
  }
  if (!(shell_speed > 0.0)) throw InvalidParameter("process: shell_speed must be positive");
  if (rows_on_shell < 1) throw InvalidParameter("process: rows_on_shell must be >= 1");
  if (nozzles_per_row < 1) throw InvalidParameter("process: nozzles_per_row must be >= 1");
  if (!(deposit_temp > u_inf)) {
    throw InvalidParameter("process: deposit_temp must exceed u_inf");
  }
  if (pastille_footprint < 0 || 2 * pastille_footprint + 3 > std::min(nx, ny)) {
    throw InvalidParameter("process: pastille_footprint does not fit the grid");
  }
  if (!(speed_min >= 0.0) || !(speed_min < speed_max)) {
    throw InvalidParameter("process: speed bounds must satisfy 0 <= min < max");
  }
  if (!(clog_scale >= 0.0 && clog_scale <= 1.0)) {
    throw InvalidParameter("process: clog_scale must be in [0, 1]");
  }
  if (!(clog_duration >= 1.0)) throw InvalidParameter("process: clog_duration must be >= 1");
  validate_cooling(cooling, nx, ny);
}

double clog_probability(double u_row, double u_inf, double u_max) {
  if (!(u_max > u_inf)) throw InvalidParameter("clog_probability: u_max must exceed u_inf");
  const double p = 1.0 - (u_row - u_inf) / (u_max - u_inf);
  return std::clamp(p, 0.0, 1.0);
}

namespace {

double draw_beta(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

}  // namespace

ClogModel ClogModel::sample(int h, Rng& rng, double scale, double mean_duration) {
  if (h < 1) throw InvalidParameter("clog model: need at least one nozzle");
  if (!(scale >= 0.0) || scale > 1.0) {
    throw InvalidParameter("clog model: propensity scale must be in [0, 1]");
  }
  ClogModel m;
  m.mean_duration = mean_duration;
  m.propensity.resize(h);
  for (auto& p : m.propensity) p = scale * draw_beta(rng, 2.0, 8.0);
  m.remaining.assign(h, 0);
  m.validate();
  return m;
}

ClogModel ClogModel::uniform(int h, double p, double mean_duration) {
  if (h < 1) throw InvalidParameter("clog model: need at least one nozzle");
  ClogModel m;
  m.mean_duration = mean_duration;
  m.propensity.assign(h, p);
  m.remaining.assign(h, 0);
  m.validate();
  return m;
}

ClogModel ClogModel::from_table(const std::string& path, int h, double mean_duration) {
  std::ifstream in(path);
  if (!in) throw IoError("clog table: cannot open " + path);
  ClogModel m;
  m.mean_duration = mean_duration;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    double p;
    if (!(ss >> p)) {
      std::string rest;
      if (std::istringstream(line) >> rest) {
        throw ConfigError("clog table " + path + ": not a number", lineno);
      }
      continue;
    }
    std::string extra;
    if (ss >> extra) throw ConfigError("clog table " + path + ": trailing text", lineno);
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ConfigError("clog table " + path + ": probability outside [0, 1]", lineno);
    }
    m.propensity.push_back(p);
  }
  if (static_cast<int>(m.propensity.size()) != h) {
    throw ConfigError("clog table " + path + ": has " + std::to_string(m.propensity.size()) +
                      " entries, expected " + std::to_string(h));
  }
  m.remaining.assign(h, 0);
  m.validate();
  return m;
}

void ClogModel::force_clog(int nozzle, int events) {
  if (nozzle < 0 || nozzle >= nozzles()) {
    throw InvalidParameter("inject_clog: nozzle " + std::to_string(nozzle) + " out of range");
  }
  if (events < 0) throw InvalidParameter("inject_clog: duration must be >= 0");
  remaining[nozzle] = std::max(remaining[nozzle], events);
}

void ClogModel::validate() const {
  for (double p : propensity) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidParameter("clog model: propensity outside [0, 1]");
  }
  if (!(mean_duration >= 1.0)) throw InvalidParameter("clog model: mean duration must be >= 1");
  if (remaining.size() != propensity.size()) {
    throw InvalidParameter("clog model: state size does not match nozzle count");
  }
}

std::vector<bool> sample_deposit_mask(ClogModel& clog, Rng& rng) {
  const int h = clog.nozzles();
  std::vector<bool> mask(h, true);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::geometric_distribution<int> extra(1.0 / clog.mean_duration);
  for (int k = 0; k < h; ++k) {
    if (clog.remaining[k] > 0) {
      mask[k] = false;
      --clog.remaining[k];
    } else if (unit(rng) < clog.propensity[k]) {
      mask[k] = false;
      clog.remaining[k] = clog.mean_duration > 1.0 ? extra(rng) : 0;
    }
  }
  return mask;
}

int PastilleRow::popcount() const {
  return static_cast<int>(std::count(mask.begin(), mask.end(), true));
}

void deposit_row(ThermalField& field, std::vector<PastilleRow>& rows,
                 const std::vector<bool>& mask, const ProcessConfig& config, long step) {
  const int r = config.pastille_footprint;
  const int yc = config.deposit_cell();
  for (int k = 0; k < static_cast<int>(mask.size()); ++k) {
    if (!mask[k]) continue;
    const int xc = config.nozzle_column(k);
    for (int dj = -r; dj <= r; ++dj) {
      for (int di = -r; di <= r; ++di) {
        if (di * di + dj * dj > r * r) continue;
        const int i = xc + di;
        const int j = yc + dj;
        if (i < 1 || i > field.nx() - 2 || j < 1 || j > field.ny() - 2) continue;
        field.at(i, j) = config.deposit_temp;
      }
    }
  }
  rows.push_back(PastilleRow{mask, 0.0, step, yc});
}

int advance_rows(std::vector<PastilleRow>& rows, double v_b, double dt, double dy,
                 double exit_position) {
  if (!(v_b >= 0.0)) throw InvalidParameter("advance_rows: belt speed must be >= 0");
  const double dj = v_b * dt / dy;
  for (auto& row : rows) row.j += dj;
  const auto before = rows.size();
  std::erase_if(rows, [&](const PastilleRow& row) { return row.j > exit_position; });
  return static_cast<int>(before - rows.size());
}

double flow_rate(double theta, double length_y, double v_b) {
  if (!(length_y > 0.0)) throw InvalidParameter("flow_rate: belt length must be positive");
  return theta / length_y * v_b;
}

void write_report_header(std::ostream& os) {
  os << "step,speed,theta,flow_rate,leading_row_temp,exited\n";
}

void write_report_row(std::ostream& os, const StepReport& r) {
  os << r.step << ',' << fmt_double(r.speed) << ',' << r.theta << ',' << fmt_double(r.flow_rate)
     << ',';
  if (r.leading_row_temp) os << fmt_double(*r.leading_row_temp);
  os << ',' << r.exited << '\n';
}

ProcessState::ProcessState(ProcessConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      field_(config_.nx, config_.ny, config_.alpha, config_.dx, config_.dy, config_.u_inf),
      rng_(seed) {
  config_.validate();
  cooling_ = config_.cooling;
  clog_ = config_.clog_table.empty()
              ? ClogModel::sample(config_.nozzles_per_row, rng_, config_.clog_scale,
                                  config_.clog_duration)
              : ClogModel::from_table(config_.clog_table, config_.nozzles_per_row,
                                      config_.clog_duration);
}

ProcessState::ProcessState(ProcessConfig config, ClogModel clog, std::uint64_t seed)
    : config_(std::move(config)),
      field_(config_.nx, config_.ny, config_.alpha, config_.dx, config_.dy, config_.u_inf),
      clog_(std::move(clog)),
      rng_(seed) {
  config_.validate();
  cooling_ = config_.cooling;
  clog_.validate();
  if (clog_.nozzles() != config_.nozzles_per_row) {
    throw InvalidParameter("process: clog model has " + std::to_string(clog_.nozzles()) +
                           " nozzles, expected " + std::to_string(config_.nozzles_per_row));
  }
}

long ProcessState::theta() const {
  long t = 0;
  for (const auto& row : rows_) t += row.popcount();
  return t;
}

double ProcessState::flow_rate(double v_b) const {
  return pastille::flow_rate(static_cast<double>(theta()), config_.length_y(), v_b);
}

const PastilleRow* ProcessState::leading_row() const {
  const PastilleRow* lead = nullptr;
  for (const auto& row : rows_) {
    if (row.popcount() == 0) continue;
    if (lead == nullptr || row.j > lead->j) lead = &row;
  }
  return lead;
}

std::optional<double> ProcessState::leading_row_temp() const {
  const PastilleRow* lead = leading_row();
  if (lead == nullptr) return std::nullopt;
  double sum = 0.0;
  int n = 0;
  for (int k = 0; k < static_cast<int>(lead->mask.size()); ++k) {
    if (!lead->mask[k]) continue;
    sum += field_.at(config_.nozzle_column(k), lead->cell);
    ++n;
  }
  return sum / n;
}

StepReport simulate_step(ProcessState& s, double speed) {
  if (!std::isfinite(speed) || speed < 0.0) {
    throw InvalidParameter("simulate_step: speed must be finite and non-negative");
  }
  const ProcessConfig& cfg = s.config_;

  if (s.step_ % cfg.deposition_period() == 0) {
    const auto mask = sample_deposit_mask(s.clog_, s.rng_);
    deposit_row(s.field_, s.rows_, mask, cfg, s.step_);
    s.deposited_ += s.rows_.back().popcount();
  }

  s.shift_acc_ += speed * cfg.dt / cfg.dy;
  const int cells = static_cast<int>(std::floor(s.shift_acc_));
  if (cells > 0) {
    s.shift_acc_ -= cells;
    s.field_.shift_down_belt(cells);
    for (auto& row : s.rows_) row.cell += cells;
  }

  const auto forcing = forcing_grid(s.field_, s.cooling_);
  s.last_solve_ = step_implicit(s.field_, forcing, cfg.dt);

  StepReport rep;
  rep.step = s.step_;
  rep.speed = speed;
  const long theta_before = s.theta();
  rep.exited = advance_rows(s.rows_, speed, cfg.dt, cfg.dy, static_cast<double>(cfg.ny));
  const int last_interior = cfg.ny - 2;
  rep.exited += static_cast<int>(std::erase_if(
      s.rows_, [&](const PastilleRow& row) { return row.cell > last_interior; }));
  rep.exited_pastilles = theta_before - s.theta();
  if (rep.exited > 0 && !s.first_exit_) s.first_exit_ = s.step_;
  s.exited_ += rep.exited_pastilles;

  rep.theta = s.theta();
  rep.flow_rate = s.flow_rate(speed);
  rep.leading_row_temp = s.leading_row_temp();
  ++s.step_;
  return rep;
}

}  // namespace pastille
