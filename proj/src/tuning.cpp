#include "pastille/tuning.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <thread>

#include "pastille/csv.hpp"
#include "pastille/errors.hpp"

namespace pastille {

void TunerConfig::validate() const {
  for (int d = 0; d < 3; ++d) {
    if (!(lo[d] < hi[d])) throw InvalidParameter("tuner: bounds out of order");
  }
  if (lo[1] <= 0.0) throw InvalidParameter("tuner: tau_I bounds must be positive");
  if (lo[2] < 0.0) throw InvalidParameter("tuner: tau_D bounds must be non-negative");
  if (!(kappa >= 0.0)) throw InvalidParameter("tuner: kappa must be >= 0");
  if (partitions != 3) throw InvalidParameter("tuner: one partition per parameter (3)");
  if (iterations_per_partition < 1) throw InvalidParameter("tuner: need iterations");
  if (initial_design < 1 || budget() < initial_design) {
    throw InvalidParameter("tuner: budget must cover the initial design");
  }
  if (!(noise >= 0.0) || !(lengthscale > 0.0)) {
    throw InvalidParameter("tuner: noise must be >= 0 and lengthscale > 0");
  }
  if (candidates < 2) throw InvalidParameter("tuner: need at least 2 candidates");
}

double matern15(double r, double lengthscale, double signal_var) {
  const double a = std::sqrt(3.0) * r / lengthscale;
  return signal_var * (1.0 + a) * std::exp(-a);
}

GpPosterior gp_fit(const std::vector<Eigen::VectorXd>& x, std::span<const double> y,
                   double noise, double lengthscale) {
  if (x.empty() || x.size() != y.size()) {
    throw InvalidParameter("gp_fit: need matching, non-empty inputs and targets");
  }
  GpPosterior gp;
  gp.x = x;
  gp.noise = noise;
  gp.lengthscale = lengthscale;
  const auto n = static_cast<Eigen::Index>(x.size());

  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  var = n > 1 ? var / (n - 1) : 0.0;
  gp.y_mean = mean;
  gp.y_scale = var > 0.0 ? std::sqrt(var) : 1.0;

  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      k(i, j) = k(j, i) = matern15((x[i] - x[j]).norm(), lengthscale, gp.signal_var);
    }
  }
  Eigen::VectorXd ys(n);
  for (Eigen::Index i = 0; i < n; ++i) ys[i] = (y[i] - mean) / gp.y_scale;

  double jitter = 0.0;
  for (;;) {
    Eigen::MatrixXd kn = k;
    kn.diagonal().array() += noise + jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(kn);
    if (llt.info() == Eigen::Success) {
      gp.chol = llt.matrixL();
      gp.alpha = llt.solve(ys);
      gp.jitter = jitter;
      return gp;
    }
    jitter = jitter == 0.0 ? 1e-10 : jitter * 10.0;
    if (jitter > 1e-4 * (1 + 1e-9)) {
      throw NumericFailure("gp_fit: covariance not positive definite after jitter 1e-4", jitter);
    }
  }
}

std::pair<double, double> gp_predict(const GpPosterior& gp, const Eigen::VectorXd& x) {
  const auto n = static_cast<Eigen::Index>(gp.x.size());
  Eigen::VectorXd ks(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    ks[i] = matern15((x - gp.x[i]).norm(), gp.lengthscale, gp.signal_var);
  }
  const double mu = ks.dot(gp.alpha);
  const Eigen::VectorXd v = gp.chol.triangularView<Eigen::Lower>().solve(ks);
  const double var = std::max(gp.signal_var - v.squaredNorm(), 0.0);
  return {gp.y_mean + gp.y_scale * mu, gp.y_scale * std::sqrt(var)};
}

Eigen::VectorXd to_unit(const Params& p, const TunerConfig& cfg) {
  Eigen::VectorXd u(3);
  for (int d = 0; d < 3; ++d) u[d] = (p[d] - cfg.lo[d]) / (cfg.hi[d] - cfg.lo[d]);
  return u;
}

Params from_unit(const Eigen::VectorXd& u, const TunerConfig& cfg) {
  Params p;
  for (int d = 0; d < 3; ++d) {
    p[d] = std::clamp(cfg.lo[d] + u[d] * (cfg.hi[d] - cfg.lo[d]), cfg.lo[d], cfg.hi[d]);
  }
  return p;
}

double van_der_corput(std::uint64_t i) {
  double v = 0.0;
  double f = 0.5;
  for (; i > 0; i >>= 1, f *= 0.5) {
    if (i & 1) v += f;
  }
  return v;
}

Eigen::VectorXd propose(const GpPosterior* gp, const TunerConfig& cfg, int partition,
                        const Eigen::VectorXd& incumbent) {
  if (partition < 0 || partition >= static_cast<int>(incumbent.size())) {
    throw InvalidParameter("propose: partition out of range");
  }
  Eigen::VectorXd x = incumbent;
  if (gp == nullptr) {
    x[partition] = 0.5;
    return x;
  }
  auto acq = [&](double t) {
    x[partition] = t;
    const auto [mu, sd] = gp_predict(*gp, x);
    return mu - cfg.kappa * sd;
  };
  // Index 1 first so that 0.5 wins ties; the faces come last.
  const int n = cfg.candidates;
  double best_t = 0.5;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double t = i < n - 2 ? van_der_corput(i + 1) : (i == n - 2 ? 0.0 : 1.0);
    const double a = acq(t);
    if (a < best) {
      best = a;
      best_t = t;
    }
  }
  // Golden-section refinement inside the candidate spacing.
  const double h = 2.0 / n;
  double a = std::max(0.0, best_t - h);
  double b = std::min(1.0, best_t + h);
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - g * (b - a);
  double d = a + g * (b - a);
  double fc = acq(c);
  double fd = acq(d);
  for (int it = 0; it < 40; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = acq(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = acq(d);
    }
  }
  const double t = fc < fd ? c : d;
  if (std::min(fc, fd) < best) best_t = t;
  x[partition] = best_t;
  return x;
}

namespace {

// Halton points in bases 2, 3, 5 with a seeded Cranley-Patterson shift.
std::vector<Eigen::VectorXd> initial_design(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double shift[3] = {unit(rng), unit(rng), unit(rng)};
  const int bases[3] = {2, 3, 5};
  std::vector<Eigen::VectorXd> pts;
  for (int i = 1; i <= n; ++i) {
    Eigen::VectorXd p(3);
    for (int d = 0; d < 3; ++d) {
      double v = 0.0;
      double f = 1.0 / bases[d];
      for (int k = i; k > 0; k /= bases[d], f /= bases[d]) v += f * (k % bases[d]);
      p[d] = std::fmod(v + shift[d], 1.0);
    }
    pts.push_back(p);
  }
  return pts;
}

}  // namespace

TuneResult tune(const TunerConfig& cfg, const Objective& objective) {
  cfg.validate();
  TuneResult res;
  std::vector<Eigen::VectorXd> xs;
  std::vector<double> ys;
  Eigen::VectorXd incumbent;
  double best = std::numeric_limits<double>::infinity();

  auto evaluate = [&](const Eigen::VectorXd& u, int iter, int partition) {
    TuneRecord rec;
    rec.iter = iter;
    rec.partition = partition;
    rec.params = from_unit(u, cfg);
    try {
      const double j = objective(rec.params, iter);
      if (!std::isfinite(j) || j < 0.0) {
        throw ObjectiveFailure("objective returned " + fmt_double(j));
      }
      rec.j = j;
      xs.push_back(to_unit(rec.params, cfg));
      ys.push_back(j);
      if (j < best) {
        best = j;
        incumbent = xs.back();
        res.best = rec.params;
      }
    } catch (const ObjectiveFailure&) {
      // discarded; the surrogate never sees it
    }
    rec.incumbent_j = best;
    res.history.push_back(rec);
  };

  const auto seeds = initial_design(cfg.initial_design, cfg.seed);
  for (int i = 0; i < cfg.initial_design; ++i) evaluate(seeds[i], i, -1);

  for (int iter = cfg.initial_design; iter < cfg.budget(); ++iter) {
    const int partition = (iter - cfg.initial_design) % cfg.partitions;
    std::optional<GpPosterior> gp;
    if (!xs.empty()) gp = gp_fit(xs, ys, cfg.noise, cfg.lengthscale);
    const Eigen::VectorXd base = xs.empty() ? Eigen::VectorXd::Constant(3, 0.5) : incumbent;
    evaluate(propose(gp ? &*gp : nullptr, cfg, partition, base), iter, partition);
  }
  if (xs.empty()) throw TuningFailure("tune: every objective evaluation failed");
  res.best_j = best;
  return res;
}

double shifted_abs_error(const Trajectory& t, long t_exit) {
  double j = 0.0;
  for (const auto& p : t) {
    if (p.step >= t_exit && p.error) j += std::abs(*p.error);
  }
  return j;
}

ObjectiveRun objective_run(const Params& params, const ProcessConfig& process,
                           const ObjectiveConfig& cfg, std::uint64_t seed) {
  if (cfg.steps < 1) throw InvalidParameter("objective: need at least one step");
  ControllerConfig c;
  c.kp = params[0];
  c.tau_i = params[1];
  c.tau_d = params[2];
  c.setpoint = cfg.setpoint;
  c.validate();
  std::shared_ptr<SensorPort> sensor = make_sensor_port(cfg.sensor, cfg.model_path);

  std::uint64_t s = seed;
  for (int attempt = 0; attempt < 2; ++attempt, s = seed ^ 0x9e3779b97f4a7c15ULL) {
    try {
      ClosedLoop loop(process, c, sensor, s);
      ObjectiveRun run;
      run.seed = s;
      run.trajectory.reserve(cfg.steps);
      for (int n = 0; n < cfg.steps; ++n) run.trajectory.push_back(loop.step());
      const auto exit = loop.process().first_exit_step();
      if (!exit) throw ObjectiveFailure("objective: no row left the belt within the horizon");
      run.t_exit = *exit;
      run.j = shifted_abs_error(run.trajectory, run.t_exit);
      return run;
    } catch (const NumericFailure&) {
      if (attempt == 1) throw ObjectiveFailure("objective: simulation failed twice");
    } catch (const ObjectiveFailure&) {
      if (attempt == 1) throw;
    }
  }
  throw ObjectiveFailure("objective: unreachable");
}

double objective(const Params& params, const ProcessConfig& process, const ObjectiveConfig& cfg,
                 std::uint64_t seed) {
  return objective_run(params, process, cfg, seed).j;
}

void write_tune_history_csv(const std::string& path, const std::vector<TuneRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("tune history: cannot write " + path);
  out << "iter,partition,K_P,tau_I,tau_D,J,incumbent_J\n";
  for (const auto& r : history) {
    out << r.iter << ',' << r.partition << ',' << fmt_double(r.params[0]) << ','
        << fmt_double(r.params[1]) << ',' << fmt_double(r.params[2]) << ',';
    if (r.j) out << fmt_double(*r.j);
    out << ',' << fmt_double(r.incumbent_j) << '\n';
  }
  if (!out) throw IoError("tune history: write failed on " + path);
}

std::vector<SurfacePoint> objective_surface(const TunerConfig& box, double tau_d, int n_kp,
                                            int n_tau_i, const ProcessConfig& process,
                                            const ObjectiveConfig& cfg, std::uint64_t seed,
                                            int jobs) {
  if (n_kp < 2 || n_tau_i < 2) throw InvalidParameter("surface: need at least 2x2 points");
  if (jobs < 1) throw InvalidParameter("surface: jobs must be >= 1");
  std::vector<SurfacePoint> pts;
  for (int a = 0; a < n_kp; ++a) {
    for (int b = 0; b < n_tau_i; ++b) {
      SurfacePoint p;
      p.kp = box.lo[0] + (box.hi[0] - box.lo[0]) * a / (n_kp - 1);
      p.tau_i = box.lo[1] + (box.hi[1] - box.lo[1]) * b / (n_tau_i - 1);
      p.tau_d = tau_d;
      pts.push_back(p);
    }
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < pts.size();) {
      try {
        pts[i].j = objective({pts[i].kp, pts[i].tau_i, pts[i].tau_d}, process, cfg, seed);
      } catch (const ObjectiveFailure&) {
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (int t = 1; t < jobs; ++t) pool.emplace_back(work);
    work();
  }
  return pts;
}

void write_surface_csv(const std::string& path, const std::vector<SurfacePoint>& surface) {
  std::ofstream out(path);
  if (!out) throw IoError("surface: cannot write " + path);
  out << "K_P,tau_I,tau_D,J\n";
  for (const auto& p : surface) {
    out << fmt_double(p.kp) << ',' << fmt_double(p.tau_i) << ',' << fmt_double(p.tau_d) << ',';
    if (p.j) out << fmt_double(*p.j);
    out << '\n';
  }
  if (!out) throw IoError("surface: write failed on " + path);
}

}  // namespace pastille
