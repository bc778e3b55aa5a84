#include "pastille/field.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

#include "pastille/errors.hpp"

namespace pastille {

FourierNumbers fourier_numbers(double alpha, double dt, double dx, double dy) {
  if (!(alpha > 0.0) || !(dt > 0.0) || !(dx > 0.0) || !(dy > 0.0)) {
    throw InvalidParameter("fourier_numbers: alpha, dt, dx and dy must be positive");
  }
  return {alpha * dt / (dx * dx), alpha * dt / (dy * dy)};
}

ThermalField::ThermalField(int nx, int ny, double alpha, double dx, double dy, double u_inf)
    : ThermalField(nx, ny, alpha, dx, dy, u_inf,
                   std::vector<double>(static_cast<std::size_t>(std::max(nx, 0)) *
                                           static_cast<std::size_t>(std::max(ny, 0)),
                                       u_inf)) {}

ThermalField::ThermalField(int nx, int ny, double alpha, double dx, double dy, double u_inf,
                           std::vector<double> initial)
    : nx_(nx), ny_(ny), alpha_(alpha), dx_(dx), dy_(dy), u_inf_(u_inf), u_(std::move(initial)) {
  if (nx < 3 || ny < 3) {
    throw InvalidParameter("ThermalField: grid needs at least 3 cells per direction");
  }
  if (!(alpha >= 0.0) || !(dx > 0.0) || !(dy > 0.0)) {
    throw InvalidParameter("ThermalField: alpha must be >= 0 and dx, dy > 0");
  }
  if (u_.size() != static_cast<std::size_t>(nx) * ny) {
    throw InvalidParameter("ThermalField: initial grid has " + std::to_string(u_.size()) +
                           " values, expected " + std::to_string(nx * ny));
  }
  apply_boundary();
}

void ThermalField::apply_boundary() noexcept {
  for (int i = 0; i < nx_; ++i) {
    at(i, 0) = u_inf_;
    at(i, ny_ - 1) = u_inf_;
  }
  for (int j = 0; j < ny_; ++j) {
    at(0, j) = u_inf_;
    at(nx_ - 1, j) = u_inf_;
  }
}

void ThermalField::shift_down_belt(int cells) {
  if (cells <= 0) return;
  const int first = 1;
  const int last = ny_ - 2;
  for (int j = last; j >= first; --j) {
    const int src = j - cells;
    for (int i = 1; i < nx_ - 1; ++i) {
      at(i, j) = src >= first ? at(i, src) : u_inf_;
    }
  }
}

double CoolingConfig::coefficient(const CellRegion& region, double dx, double dy) const {
  const double area = region.cell_count() * dx * dy;
  return intensity * jets_per_row * water_rate * cp_water /
         (area * belt_thickness * belt_density * cp_belt);
}

CoolingConfig CoolingConfig::uniform_bands(int nx, int ny, int rows) {
  if (rows < 1 || ny - 2 < rows || nx < 3) {
    throw InvalidParameter("uniform_bands: need 1 <= rows <= interior length");
  }
  CoolingConfig cfg;
  cfg.rows = rows;
  const int interior = ny - 2;
  for (int r = 0; r < rows; ++r) {
    CellRegion region;
    region.x0 = 1;
    region.x1 = nx - 1;
    region.y0 = 1 + static_cast<int>(static_cast<long long>(interior) * r / rows);
    region.y1 = 1 + static_cast<int>(static_cast<long long>(interior) * (r + 1) / rows);
    cfg.wetted_regions.push_back(region);
  }
  return cfg;
}

void validate_cooling(const CoolingConfig& cooling, int nx, int ny) {
  if (cooling.rows != static_cast<int>(cooling.wetted_regions.size())) {
    throw InvalidRegion("cooling: " + std::to_string(cooling.wetted_regions.size()) +
                        " wetted regions for " + std::to_string(cooling.rows) + " jet rows");
  }
  if (!(cooling.jets_per_row > 0) || !(cooling.water_rate > 0.0) ||
      !(cooling.belt_thickness > 0.0) || !(cooling.belt_density > 0.0) ||
      !(cooling.cp_water > 0.0) || !(cooling.cp_belt > 0.0) || !(cooling.intensity >= 0.0)) {
    throw InvalidParameter("cooling: physical constants must be positive");
  }
  for (std::size_t r = 0; r < cooling.wetted_regions.size(); ++r) {
    const auto& a = cooling.wetted_regions[r];
    if (a.x0 < 1 || a.y0 < 1 || a.x1 > nx - 1 || a.y1 > ny - 1 || a.x0 >= a.x1 ||
        a.y0 >= a.y1) {
      throw InvalidRegion("cooling: wetted region " + std::to_string(r) +
                          " is empty or leaves the grid interior");
    }
    for (std::size_t s = 0; s < r; ++s) {
      const auto& b = cooling.wetted_regions[s];
      const bool disjoint = a.x1 <= b.x0 || b.x1 <= a.x0 || a.y1 <= b.y0 || b.y1 <= a.y0;
      if (!disjoint) {
        throw InvalidRegion("cooling: wetted regions " + std::to_string(s) + " and " +
                            std::to_string(r) + " overlap");
      }
    }
  }
}

std::vector<double> forcing_grid(const ThermalField& field, const CoolingConfig& cooling) {
  validate_cooling(cooling, field.nx(), field.ny());
  std::vector<double> f(field.values().size(), 0.0);
  for (const auto& region : cooling.wetted_regions) {
    const double c = cooling.coefficient(region, field.dx(), field.dy());
    for (int j = region.y0; j < region.y1; ++j) {
      for (int i = region.x0; i < region.x1; ++i) {
        f[field.index(i, j)] = -c * (field.at(i, j) - cooling.water_temp);
      }
    }
  }
  return f;
}

namespace {

struct InteriorSystem {
  int mx;  // interior columns
  int my;  // interior rows
  double fx;
  double fy;
  double diag;

  std::size_t size() const { return static_cast<std::size_t>(mx) * my; }

  void apply(const std::vector<double>& v, std::vector<double>& out) const {
    for (int j = 0; j < my; ++j) {
      const std::size_t row = static_cast<std::size_t>(j) * mx;
      for (int i = 0; i < mx; ++i) {
        const std::size_t k = row + i;
        double s = diag * v[k];
        if (i > 0) s -= fx * v[k - 1];
        if (i + 1 < mx) s -= fx * v[k + 1];
        if (j > 0) s -= fy * v[k - mx];
        if (j + 1 < my) s -= fy * v[k + mx];
        out[k] = s;
      }
    }
  }
};

InteriorSystem make_system(const ThermalField& field, double dt) {
  if (!(dt > 0.0)) throw InvalidParameter("step_implicit: dt must be positive");
  double fx = 0.0;
  double fy = 0.0;
  if (field.alpha() > 0.0) {
    const auto fn = fourier_numbers(field.alpha(), dt, field.dx(), field.dy());
    fx = fn.fx;
    fy = fn.fy;
  }
  return {field.nx() - 2, field.ny() - 2, fx, fy, 1.0 + 2.0 * (fx + fy)};
}

// Right-hand side u^n + f^n dt with the fixed boundary values folded in.
std::vector<double> make_rhs(const ThermalField& field, const InteriorSystem& sys,
                             std::span<const double> forcing, double dt) {
  if (forcing.size() != field.values().size()) {
    throw ShapeError("step_implicit: forcing grid size does not match the field");
  }
  std::vector<double> b(sys.size());
  const double ub = field.u_inf();
  for (int j = 0; j < sys.my; ++j) {
    for (int i = 0; i < sys.mx; ++i) {
      const int gi = i + 1;
      const int gj = j + 1;
      double v = field.at(gi, gj) + forcing[field.index(gi, gj)] * dt;
      if (i == 0) v += sys.fx * ub;
      if (i + 1 == sys.mx) v += sys.fx * ub;
      if (j == 0) v += sys.fy * ub;
      if (j + 1 == sys.my) v += sys.fy * ub;
      b[static_cast<std::size_t>(j) * sys.mx + i] = v;
    }
  }
  return b;
}

double inf_norm(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

void scatter_interior(ThermalField& field, const InteriorSystem& sys,
                      const std::vector<double>& w) {
  for (int j = 0; j < sys.my; ++j) {
    for (int i = 0; i < sys.mx; ++i) {
      field.at(i + 1, j + 1) = w[static_cast<std::size_t>(j) * sys.mx + i];
    }
  }
  field.apply_boundary();
}

}  // namespace

SolveStats step_implicit(ThermalField& field, std::span<const double> forcing, double dt,
                         const SolverOptions& options) {
  const InteriorSystem sys = make_system(field, dt);
  const std::vector<double> b = make_rhs(field, sys, forcing, dt);
  const std::size_t n = sys.size();

  // The operator is SPD with a constant diagonal, so plain CG with a Jacobi
  // scaling is the same as unpreconditioned CG; start from u^n.
  std::vector<double> x(n);
  for (int j = 0; j < sys.my; ++j) {
    for (int i = 0; i < sys.mx; ++i) {
      x[static_cast<std::size_t>(j) * sys.mx + i] = field.at(i + 1, j + 1);
    }
  }
  std::vector<double> r(n), p(n), ap(n);
  sys.apply(x, ap);
  for (std::size_t k = 0; k < n; ++k) r[k] = b[k] - ap[k];

  const double bnorm = std::max(inf_norm(b), 1e-300);
  SolveStats stats;
  stats.residual = inf_norm(r) / bnorm;
  if (stats.residual <= options.tolerance) {
    scatter_interior(field, sys, x);
    return stats;
  }

  p = r;
  double rr = dot(r, r);
  for (int it = 1; it <= options.max_iterations; ++it) {
    sys.apply(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) break;
    const double alpha = rr / pap;
    for (std::size_t k = 0; k < n; ++k) {
      x[k] += alpha * p[k];
      r[k] -= alpha * ap[k];
    }
    stats.iterations = it;
    stats.residual = inf_norm(r) / bnorm;
    if (stats.residual <= options.tolerance) {
      // Recurrence residuals drift; confirm against the true residual.
      sys.apply(x, ap);
      for (std::size_t k = 0; k < n; ++k) r[k] = b[k] - ap[k];
      stats.residual = inf_norm(r) / bnorm;
      if (stats.residual <= options.tolerance) {
        scatter_interior(field, sys, x);
        return stats;
      }
      p = r;
      rr = dot(r, r);
      continue;
    }
    const double rr_next = dot(r, r);
    const double beta = rr_next / rr;
    rr = rr_next;
    for (std::size_t k = 0; k < n; ++k) p[k] = r[k] + beta * p[k];
  }
  throw NumericFailure("step_implicit: conjugate gradients did not converge (residual " +
                           std::to_string(stats.residual) + ")",
                       stats.residual);
}

void step_implicit_dense(ThermalField& field, std::span<const double> forcing, double dt) {
  const InteriorSystem sys = make_system(field, dt);
  const std::vector<double> b = make_rhs(field, sys, forcing, dt);
  const Eigen::Index n = static_cast<Eigen::Index>(sys.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (int j = 0; j < sys.my; ++j) {
    for (int i = 0; i < sys.mx; ++i) {
      const Eigen::Index k = static_cast<Eigen::Index>(j) * sys.mx + i;
      a(k, k) = sys.diag;
      if (i > 0) a(k, k - 1) = -sys.fx;
      if (i + 1 < sys.mx) a(k, k + 1) = -sys.fx;
      if (j > 0) a(k, k - sys.mx) = -sys.fy;
      if (j + 1 < sys.my) a(k, k + sys.mx) = -sys.fy;
    }
  }
  const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(b.data(), n);
  const Eigen::VectorXd w = a.partialPivLu().solve(rhs);
  scatter_interior(field, sys, std::vector<double>(w.data(), w.data() + n));
}

}  // namespace pastille
