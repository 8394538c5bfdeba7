#pragma once

#include "mkvlab/matrix_core.hpp"

#include <Eigen/Cholesky>

#include <string>
#include <vector>

namespace mkvlab {

/// A Gaussian probability density, mean + covariance. The covariance may be
/// singular (point-mass limits); operations that need positive definiteness
/// check it themselves.
struct GaussianState {
    Vector mean;
    Matrix covariance;

    int dim() const { return static_cast<int>(mean.size()); }
};

/// Rectangular lattice for d <= 2 grid densities and residual evaluation.
/// Nodes are origin + (i0*h0, i1*h1), stored row-major (last axis fastest).
struct Lattice {
    Vector origin;
    Vector spacing;
    std::vector<int> counts;

    int dim() const { return static_cast<int>(counts.size()); }
    long node_count() const;
    Vector node(long flat_index) const;
    double cell_volume() const;
    /// Trapezoidal quadrature weight of a node (product of 1/2 edge factors).
    double weight(long flat_index) const;
};

/// Nonnegative density sampled on a lattice. mass() is the trapezoidal
/// integral over the grid box.
struct GridDensity {
    Lattice grid;
    Vector values;

    double mass() const;
    Vector first_moment() const;
    /// Multilinear interpolation, zero outside the grid box.
    double interpolate(const Vector& x) const;
};

GridDensity read_grid_density(const std::string& path);
void write_grid_density(const std::string& path, const GridDensity& density);

/// Samples a Gaussian density onto a lattice.
GridDensity sample_gaussian(const GaussianState& state, const Lattice& lattice);

/// Covariance accumulated by the flow up to time t:
///   Q(t) = 2 int_0^t e^{-As} B e^{-A^T s} ds,
/// evaluated in closed form from one block matrix exponential
/// exp(t [[-A, 2B], [0, A^T]]): Q(t) = (top-right block) * e^{-A^T t}.
Matrix gram_kernel(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B, double t);

/// Equilibrium state N(0, X) with A X + X A^T = 2 B. Requires (A, B)
/// admissible; throws std::domain_error naming the failed condition.
GaussianState equilibrium(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                          const SpectralOptions& opts = {});

/// Exact law at time t of the linear flow started from a Gaussian:
/// mean e^{-At} m0, covariance e^{-At} S0 e^{-A^T t} + Q(t).
GaussianState gaussian_flow(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                            const GaussianState& initial, double t);

/// Evaluates the time-t density for a grid initial datum by trapezoidal
/// quadrature of the Gaussian kernel against rho0. Built once per (A, B, t),
/// then cheap per evaluation point.
class FpDensityEvaluator {
  public:
    FpDensityEvaluator(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                       const GridDensity& rho0, double t);

    double operator()(const Vector& x) const;

  private:
    Matrix transported_;      // e^{-At} y_j for all grid nodes
    Vector weights_;          // quadrature weight * rho0 value per node
    Eigen::LLT<Matrix> llt_;  // Cholesky of Q(t)
    double norm_const_ = 0.0;
    int dim_ = 0;
};

/// One-off evaluation of the flow density at (x, t). At t = 0 returns the
/// interpolated initial datum. For 0 < t below 1e-6 of the relaxation time the
/// kernel is numerically singular and a std::domain_error advises a larger t.
double fp_density(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                  const GridDensity& rho0, const Vector& x, double t);

/// Relative entropy between Gaussians,
///   H(f|g) = 1/2 (tr(Sg^-1 Sf) - d + (mf-mg)^T Sg^-1 (mf-mg) + ln det Sg/det Sf).
/// Returns +inf when Sf is singular; throws std::domain_error when Sg is.
double gaussian_relative_entropy(const GaussianState& f, const GaussianState& g);

struct CkpResult {
    double l1_distance = 0.0;
    double entropy = 0.0;
    bool holds = false;  // l1 <= sqrt(2 H) up to quadrature noise (1e-6)
};

/// Checks the total-variation vs entropy inequality ||f-g||_L1 <= sqrt(2 H(f|g))
/// with the L1 distance computed by quadrature (d <= 2).
CkpResult ckp_check(const GaussianState& f, const GaussianState& g);
CkpResult ckp_check(const GridDensity& f, const GaussianState& g);

struct DecayTracePoint {
    double t = 0.0;
    double entropy = 0.0;
    double envelope = 0.0;  // (1 + t^{2n}) e^{-2 mu t}
    double ratio = 0.0;     // entropy / (entropy(0) * envelope)
};

/// Decay certificate along the exact Gaussian flow: the entropy trace, the
/// spectral envelope, the fitted constant c_hat = sup ratio, and a boundedness
/// verdict (the tail of the grid does not push the fit above the level seen on
/// the first part, within 10%).
struct DecayCertificate {
    double rate = 0.0;  // 2 mu
    int power = 0;      // 2 n1
    double c_hat = 0.0;
    bool ratio_bounded = false;
    std::vector<DecayTracePoint> trace;
};

DecayCertificate fp_decay_certificate(const Eigen::Ref<const Matrix>& A,
                                      const Eigen::Ref<const Matrix>& B,
                                      const GaussianState& initial,
                                      const std::vector<double>& t_grid,
                                      const SpectralOptions& opts = {});

}  // namespace mkvlab
