#pragma once

// Belt temperature grid and the implicit finite-difference heat integrator.
//
// Storage is row-major with the belt length (y) as the slow axis, so
// `at(i, j)` addresses column i (across the belt) of row j (along the belt)
// and a rendered frame can copy rows straight out of `u`.

#include <cstddef>
#include <span>
#include <vector>

namespace pastille {

struct FourierNumbers {
  double fx;
  double fy;
};

// F_x = alpha*dt/dx^2, F_y = alpha*dt/dy^2. Throws InvalidParameter unless
// every argument is strictly positive.
FourierNumbers fourier_numbers(double alpha, double dt, double dx, double dy);

class ThermalField {
 public:
  // Uniform field at `u_inf`. Throws InvalidParameter for nx/ny < 3 or
  // non-positive dx/dy, and for negative alpha (alpha == 0 disables diffusion).
  ThermalField(int nx, int ny, double alpha, double dx, double dy, double u_inf);
  // Field seeded from an initial grid; boundary cells are forced to u_inf.
  ThermalField(int nx, int ny, double alpha, double dx, double dy, double u_inf,
               std::vector<double> initial);

  int nx() const noexcept { return nx_; }
  int ny() const noexcept { return ny_; }
  double alpha() const noexcept { return alpha_; }
  double dx() const noexcept { return dx_; }
  double dy() const noexcept { return dy_; }
  double u_inf() const noexcept { return u_inf_; }
  double length_x() const noexcept { return nx_ * dx_; }
  double length_y() const noexcept { return ny_ * dy_; }

  std::size_t index(int i, int j) const noexcept {
    return static_cast<std::size_t>(j) * nx_ + i;
  }
  double& at(int i, int j) noexcept { return u_[index(i, j)]; }
  double at(int i, int j) const noexcept { return u_[index(i, j)]; }
  bool is_boundary(int i, int j) const noexcept {
    return i == 0 || j == 0 || i == nx_ - 1 || j == ny_ - 1;
  }

  std::span<double> values() noexcept { return u_; }
  std::span<const double> values() const noexcept { return u_; }

  // Re-imposes the Dirichlet condition on all four edges.
  void apply_boundary() noexcept;

  // Moves interior rows `cells` positions toward larger j; rows entering at
  // the upstream end are filled with u_inf and content pushed past the last
  // interior row is dropped.
  void shift_down_belt(int cells);

 private:
  int nx_;
  int ny_;
  double alpha_;
  double dx_;
  double dy_;
  double u_inf_;
  std::vector<double> u_;
};

// Axis-aligned block of cells [x0, x1) x [y0, y1).
struct CellRegion {
  int x0 = 0;
  int x1 = 0;
  int y0 = 0;
  int y1 = 0;

  int cell_count() const noexcept { return (x1 - x0) * (y1 - y0); }
  bool contains(int i, int j) const noexcept {
    return i >= x0 && i < x1 && j >= y0 && j < y1;
  }
};

// Water-jet cooling on the underside of the belt. Each of the R jet rows
// wets one region; every cell of a region sees the same coefficient.
struct CoolingConfig {
  int rows = 5;               // R
  int jets_per_row = 4;       // q
  double water_rate = 3.77;   // mdot_W, mass per time unit per jet
  std::vector<CellRegion> wetted_regions;  // one per jet row
  double water_temp = 78.0;   // u_W
  double belt_thickness = 0.1;
  double belt_density = 7.85;
  double cp_water = 1.0;
  double cp_belt = 0.12;
  double intensity = 1.0;     // multiplies the coefficient; used by dataset randomization

  // Relaxation coefficient (1/time) of one region:
  // q*mdot*Cp_W / (area * ell * rho_B * Cp_B), area = cells * dx * dy.
  double coefficient(const CellRegion& region, double dx, double dy) const;

  // Contiguous bands tiling the interior length, full interior width.
  static CoolingConfig uniform_bands(int nx, int ny, int rows);
};

// Throws InvalidRegion if a region leaves the interior, two regions overlap,
// or the region count differs from `rows`; InvalidParameter for
// non-positive physical constants.
void validate_cooling(const CoolingConfig& cooling, int nx, int ny);

// Source term grid (temperature per time): negative inside wetted cells
// hotter than the water, zero elsewhere.
std::vector<double> forcing_grid(const ThermalField& field, const CoolingConfig& cooling);

struct SolveStats {
  int iterations = 0;
  double residual = 0.0;  // relative infinity norm of the final residual
};

struct SolverOptions {
  double tolerance = 1e-8;
  int max_iterations = 5000;
};

// One backward-Euler step: solves
//   (1 + 2(Fx+Fy)) u'_{ij} - Fx(u'_{i-1,j} + u'_{i+1,j}) - Fy(u'_{i,j-1} + u'_{i,j+1})
//     = u_{ij} + f_{ij} dt
// on the interior with conjugate gradients; boundaries stay at u_inf.
// Throws NumericFailure (carrying the residual) if CG does not converge.
SolveStats step_implicit(ThermalField& field, std::span<const double> forcing, double dt,
                         const SolverOptions& options = {});

// Same system assembled densely and solved by LU. Intended for small grids
// (tests cross-check the CG path against it).
void step_implicit_dense(ThermalField& field, std::span<const double> forcing, double dt);

}  // namespace pastille
