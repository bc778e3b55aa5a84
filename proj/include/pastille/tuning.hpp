#pragma once

// Bayesian-optimization tuning of (K_P, tau_I, tau_D): a Matérn-1.5 GP
// surrogate, LCB acquisition and a round-robin coordinate partitioning.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pastille/control.hpp"

namespace pastille {

using Params = std::array<double, 3>;  // K_P, tau_I, tau_D

struct TunerConfig {
  Params lo{0.1, 0.1, 0.01};
  Params hi{50.0, 50.0, 50.0};
  double kappa = 2.6;
  int partitions = 3;
  int iterations_per_partition = 10;
  int initial_design = 3;
  double noise = 1e-4;        // in standardized target units
  double lengthscale = 0.2;   // on the unit box
  int candidates = 4096;
  std::uint64_t seed = 0;

  int budget() const { return partitions * iterations_per_partition; }
  void validate() const;  // InvalidParameter
};

double matern15(double r, double lengthscale, double signal_var);

struct GpPosterior {
  std::vector<Eigen::VectorXd> x;  // unit-box inputs
  Eigen::VectorXd alpha;           // K^-1 (y - mean) / scale
  Eigen::MatrixXd chol;            // lower Cholesky factor of K + (noise + jitter) I
  double y_mean = 0.0;
  double y_scale = 1.0;
  double signal_var = 1.0;
  double noise = 0.0;
  double jitter = 0.0;
  double lengthscale = 0.2;
};

// Exact GP regression on standardized targets. Adds jitter up to 1e-4 when
// the covariance is not numerically positive definite; NumericFailure past that.
GpPosterior gp_fit(const std::vector<Eigen::VectorXd>& x, std::span<const double> y,
                   double noise, double lengthscale);
// Posterior mean and standard deviation in the original target units.
std::pair<double, double> gp_predict(const GpPosterior& gp, const Eigen::VectorXd& x);

Eigen::VectorXd to_unit(const Params& p, const TunerConfig& cfg);
Params from_unit(const Eigen::VectorXd& u, const TunerConfig& cfg);

// Base-2 radical inverse of i.
double van_der_corput(std::uint64_t i);

// argmin of mu - kappa * sigma along coordinate `partition` of the unit box,
// the other coordinates fixed at `incumbent`. With no data, the slice centre.
Eigen::VectorXd propose(const GpPosterior* gp, const TunerConfig& cfg, int partition,
                        const Eigen::VectorXd& incumbent);

struct TuneRecord {
  int iter = 0;
  int partition = -1;  // -1 for the initial design
  Params params{};
  std::optional<double> j;  // empty when the evaluation failed
  double incumbent_j = 0.0;
};

struct TuneResult {
  Params best{};
  double best_j = 0.0;
  std::vector<TuneRecord> history;
};

using Objective = std::function<double(const Params&, int iter)>;

// The objective throws ObjectiveFailure for a discarded evaluation.
TuneResult tune(const TunerConfig& cfg, const Objective& objective);

struct ObjectiveConfig {
  int steps = 400;
  double setpoint = 90.0;
  std::string sensor = "oracle";
  std::string model_path;
};

struct ObjectiveRun {
  double j = 0.0;
  long t_exit = 0;  // step at which the first deposited row left the belt
  std::uint64_t seed = 0;
  Trajectory trajectory;
};

// Sum of |e_n| from the first exit step through the last step. A failed
// simulation is retried once with a fresh seed before ObjectiveFailure.
ObjectiveRun objective_run(const Params& params, const ProcessConfig& process,
                           const ObjectiveConfig& cfg, std::uint64_t seed);
double objective(const Params& params, const ProcessConfig& process, const ObjectiveConfig& cfg,
                 std::uint64_t seed);
// Same sum over an existing trajectory.
double shifted_abs_error(const Trajectory& t, long t_exit);

void write_tune_history_csv(const std::string& path, const std::vector<TuneRecord>& history);

struct SurfacePoint {
  double kp = 0.0;
  double tau_i = 0.0;
  double tau_d = 0.0;
  std::optional<double> j;
};

// J over an n_kp x n_tau_i grid spanning the box at fixed tau_D, evaluated
// on `jobs` threads; every point uses the same seed.
std::vector<SurfacePoint> objective_surface(const TunerConfig& box, double tau_d, int n_kp,
                                            int n_tau_i, const ProcessConfig& process,
                                            const ObjectiveConfig& cfg, std::uint64_t seed,
                                            int jobs = 1);
void write_surface_csv(const std::string& path, const std::vector<SurfacePoint>& surface);

}  // namespace pastille
