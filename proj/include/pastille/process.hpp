#pragma once

// Rotoformer deposition, nozzle clogging, row tracking and flow rate.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pastille/field.hpp"

namespace pastille {

using Rng = std::mt19937_64;

struct ProcessConfig {
  // Grid and heat transfer.
  int nx = 65;    // across the belt (L_x = nx * dx)
  int ny = 637;   // along the belt (L_y = ny * dy)
  double dx = 1.0;
  double dy = 1.0;
  double dt = 1.0;
  double alpha = 0.003;
  double u_inf = 72.0;
  CoolingConfig cooling = CoolingConfig::uniform_bands(65, 637, 5);

  // Rotating shell.
  double shell_speed = 0.39269908169872414;  // omega, rad per time unit (2*pi/16)
  int rows_on_shell = 16;                    // K
  int nozzles_per_row = 12;                  // h
  double deposit_temp = 200.0;               // u_0
  int pastille_footprint = 0;                // imprint radius in cells

  double speed_min = 2.0;
  double speed_max = 12.0;

  // Clog model drawn by ProcessState(config, seed): a table file when set,
  // otherwise heterogeneous propensities clog_scale * Beta(2, 8).
  double clog_scale = 0.5;
  double clog_duration = 3.0;
  std::string clog_table;

  // round(2*pi / (omega*K*dt)), at least 1.
  int deposition_period() const;
  // Continuous nozzle centre (k + 0.5) * L_x / h, in cell units.
  double nozzle_position(int k) const;
  // Cell column holding nozzle k's imprint centre.
  int nozzle_column(int k) const;
  // Cell row where new pastilles are imprinted (first row that keeps the
  // whole footprint inside the interior).
  int deposit_cell() const { return pastille_footprint + 1; }
  double length_x() const { return nx * dx; }
  double length_y() const { return ny * dy; }

  // Throws InvalidParameter / InvalidRegion on any broken invariant.
  void validate() const;
};

// Probability of a clog given the scaled row temperature.
double clog_probability(double u_row, double u_inf, double u_max);

struct ClogModel {
  std::vector<double> propensity;  // per nozzle, per deposition event
  double mean_duration = 3.0;      // deposition events, geometric
  double u_max = 212.0;
  std::vector<int> remaining;      // events still blocked, per nozzle

  // Heterogeneous default: propensity_k = scale * Beta(2, 8).
  static ClogModel sample(int h, Rng& rng, double scale = 0.5, double mean_duration = 3.0);
  static ClogModel uniform(int h, double p, double mean_duration = 1.0);
  // Empirical table: one probability per line, '#' starts a comment.
  // Throws IoError / ConfigError; the table must hold exactly h values.
  static ClogModel from_table(const std::string& path, int h, double mean_duration = 3.0);

  int nozzles() const { return static_cast<int>(propensity.size()); }
  // Blocks `nozzle` for the next `events` deposition events.
  void force_clog(int nozzle, int events);
  void validate() const;
};

// Draws one row's occupancy. A nozzle inside a persisting clog stays blocked
// and its remaining count drops by one; otherwise it clogs with its
// propensity and, if so, for a geometric number of events (this one included).
std::vector<bool> sample_deposit_mask(ClogModel& clog, Rng& rng);

struct PastilleRow {
  std::vector<bool> mask;
  double j = 0.0;       // fractional position along the belt, in rows
  long deposit_step = 0;
  int cell = 0;         // grid row currently holding the row's heat imprint

  int popcount() const;
};

// Appends a row at j = 0 and imprints u_0 for every occupied nozzle.
void deposit_row(ThermalField& field, std::vector<PastilleRow>& rows,
                 const std::vector<bool>& mask, const ProcessConfig& config, long step);

// j += v_B*dt/dy for every row; rows with j > exit_position are
// removed. Returns the number of removed rows.
int advance_rows(std::vector<PastilleRow>& rows, double v_b, double dt, double dy,
                 double exit_position);

// (theta / L_y) * v_B.
double flow_rate(double theta, double length_y, double v_b);

struct StepReport {
  long step = 0;
  double speed = 0.0;
  long theta = 0;
  double flow_rate = 0.0;
  std::optional<double> leading_row_temp;
  int exited = 0;           // rows that left the belt this step
  long exited_pastilles = 0;
};

void write_report_header(std::ostream& os);
void write_report_row(std::ostream& os, const StepReport& r);

class ProcessState {
 public:
  // Clog model drawn from `seed` with the default prior.
  ProcessState(ProcessConfig config, std::uint64_t seed);
  ProcessState(ProcessConfig config, ClogModel clog, std::uint64_t seed);

  const ProcessConfig& config() const { return config_; }
  const ThermalField& field() const { return field_; }
  ThermalField& field() { return field_; }
  const std::vector<PastilleRow>& rows() const { return rows_; }
  ClogModel& clog() { return clog_; }
  const ClogModel& clog() const { return clog_; }
  Rng& rng() { return rng_; }
  long step_index() const { return step_; }
  const SolveStats& last_solve() const { return last_solve_; }

  long theta() const;
  double flow_rate(double v_b) const;
  // Tracked row with maximal j among rows holding at least one pastille.
  const PastilleRow* leading_row() const;
  // Mean field temperature at the leading row's pastille centres.
  std::optional<double> leading_row_temp() const;
  // Step at which the first deposited row left the belt, if it has.
  std::optional<long> first_exit_step() const { return first_exit_; }

  long deposited_total() const { return deposited_; }
  long exited_total() const { return exited_; }

 private:
  friend StepReport simulate_step(ProcessState& state, double speed);

  ProcessConfig config_;
  ThermalField field_;
  CoolingConfig cooling_;
  ClogModel clog_;
  Rng rng_;
  std::vector<PastilleRow> rows_;
  long step_ = 0;
  double shift_acc_ = 0.0;
  long deposited_ = 0;
  long exited_ = 0;
  std::optional<long> first_exit_;
  SolveStats last_solve_;
};

// One simulation step at belt speed `speed`: deposit (on deposition steps),
// shift the heat pattern with the belt, cooling forcing, implicit heat step,
// row advance. A row stops being tracked once its imprint is carried off the
// last interior grid row.
StepReport simulate_step(ProcessState& state, double speed);

}  // namespace pastille
