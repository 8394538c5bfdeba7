#pragma once

#include "mkvlab/fokker_planck.hpp"
#include "mkvlab/matrix_core.hpp"

#include <vector>

namespace mkvlab {

/// Full problem instance: drift C, interaction K, diffusion D, total mass m0
/// of the initial datum and its (unnormalized) first moment m1.
///
/// Mass enters only through the effective interaction m0*K; every operation
/// below works with the unit-mass normalization internally.
struct ModelTriple {
    Matrix C;
    Matrix K;
    Matrix D;
    double m0 = 1.0;
    Vector m1;

    Matrix effective_interaction() const { return m0 * K; }
    Matrix flow_matrix() const { return C + m0 * K; }
    Vector unit_first_moment() const { return m1 / m0; }
    int dim() const { return static_cast<int>(C.rows()); }
};

ModelTriple make_model(const Eigen::Ref<const Matrix>& C, const Eigen::Ref<const Matrix>& K,
                       const Eigen::Ref<const Matrix>& D, const GaussianState& initial,
                       double mass = 1.0);

/// Throws std::domain_error when (C + m0 K, D) is not admissible.
void validate_model(const ModelTriple& model, const SpectralOptions& opts = {});

/// Rescales the interaction matrix to the unit-mass formulation.
Matrix normalize_mass(const Eigen::Ref<const Matrix>& K, double mass);

/// First moment of the solution at time t: e^{-Ct} m1.
Vector first_moment(const ModelTriple& model, double t);

/// The translation turning the linear flow into the interacting solution:
///   s(t) = (1/m0) (e^{-Ct} - e^{-(C + m0 K) t}) m1.
Vector shift(const ModelTriple& model, double t);

/// General solution of the shift ODE with initial value s0:
/// shift(t) plus the homogeneous part e^{-(C + m0 K) t} s0.
Vector shift_general(const ModelTriple& model, const Vector& s0, double t);

/// Limit of the shift: the kernel projection of the unit first moment,
/// (1/m0) P_ker(C) m1. Requires C almost-positively stable and C + m0 K
/// positively stable.
Vector shift_limit(const ModelTriple& model, const SpectralOptions& opts = {});

struct ShiftTrajectory {
    ModelTriple model;
    Vector s_infinity;
    double mu = 0.0;
    double nu = 0.0;
    int n1 = 0;
    int n2 = 0;

    Vector operator()(double t) const { return shift(model, t); }
};

ShiftTrajectory make_shift_trajectory(const ModelTriple& model, const SpectralOptions& opts = {});

/// Fitted two-term envelope for |(e^{-At} - e^{-(A+B)t}) x - P_ker(A) x|:
///   c_kernel (1 + t^{n2}) e^{-nu t} |(I-P) x| + c_full (1 + t^{n1}) e^{-mu t} |x|.
/// Constants are semigroup-norm fits of A restricted to its co-kernel invariant
/// subspace and of A+B; valid for t within the fitted horizon.
class ShiftEnvelope {
  public:
    ShiftEnvelope(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                  double t_max = 50.0, const SpectralOptions& opts = {});

    double lhs(double t, const Vector& x) const;
    double rhs(double t, const Vector& x) const;

    /// Smallest lhs value the direct evaluation can resolve: the subtraction
    /// behind lhs carries rounding noise of a few hundred ulps of |x|, so
    /// inequality checks at large t compare against rhs plus this floor.
    double evaluation_floor(const Vector& x) const;

    const Matrix& projection() const { return projection_; }

  private:
    Matrix A_;
    Matrix sum_;
    Matrix projection_;
    SemigroupBound kernel_part_;  // restriction of A to its co-kernel subspace
    SemigroupBound full_part_;    // A + B
    bool has_kernel_part_ = false;
};

struct XiBoundResult {
    double lhs = 0.0;
    double rhs = 0.0;
};

/// Convergence bound for the shift operator at a single time.
XiBoundResult xi_bound(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                       double t, const Vector& x, const SpectralOptions& opts = {});

/// Exact law at time t for a Gaussian initial datum (unit-mass normalization):
/// the linear flow under (C + m0 K, D) translated by the shift.
GaussianState solve(const ModelTriple& model, const GaussianState& rho0, double t);

/// Density value of the solution at (x, t).
double solve(const ModelTriple& model, const GaussianState& rho0, const Vector& x, double t);

/// Density value for a grid initial datum: the linear-flow density evaluated at
/// the shifted point x - s(t).
double solve(const ModelTriple& model, const GridDensity& rho0, const Vector& x, double t);

/// Split of the distance to the translated equilibrium into the profile term
/// and the two shift terms:
///   total = profile + cross + quadratic  (exact for Gaussian laws),
/// with cross = (s-s_inf)^T Kinv e^{-Ct} m1 and
/// quadratic = -1/2 (s-s_inf)^T Kinv (s+s_inf), Kinv the equilibrium precision.
struct EntropyDecomposition {
    double total = 0.0;
    double profile = 0.0;
    double cross = 0.0;
    double quadratic = 0.0;

    double residual() const { return total - (profile + cross + quadratic); }
    bool holds(double tol = 1e-8) const { return std::abs(residual()) <= tol; }
};

EntropyDecomposition entropy_decomposition(const ModelTriple& model, const GaussianState& rho_t,
                                           double t, const SpectralOptions& opts = {});

struct BoundTracePoint {
    double t = 0.0;
    double total = 0.0;
    double profile = 0.0;
    double cross = 0.0;
    double quadratic = 0.0;
    double envelope1 = 0.0;  // H(rho0|rho_inf) (1 + t^{2 n1}) e^{-2 mu t}
    double envelope2 = 0.0;  // shift bracket product
    double shift_error = 0.0;
};

struct EntropyBoundReport {
    SpectralSummary spectral;
    double h0 = 0.0;
    double c_hat = 0.0;
    bool ratio_bounded = false;
    double max_decomposition_residual = 0.0;
    bool decomposition_ok = false;
    std::vector<BoundTracePoint> trace;
};

/// Entropy decay trace against the structural envelope (profile term plus the
/// shift bracket). A single c_hat is fitted over the whole grid; the report
/// also carries the decomposition-identity residuals.
EntropyBoundReport mkv_entropy_bound(const ModelTriple& model, const GaussianState& rho0,
                                     const std::vector<double>& t_grid,
                                     const SpectralOptions& opts = {});

struct PdeResidualReport {
    double max_residual = 0.0;
    bool grid_adequate = true;     // spacing <= sigma_min / 10
    double suggested_spacing = 0.0;
};

/// Finite-difference residual of the nonlinear equation at time t for a
/// Gaussian initial datum: centered differences in x on the lattice, centered
/// difference in t with the given time step. d <= 2.
PdeResidualReport pde_residual(const ModelTriple& model, const GaussianState& rho0, double t,
                               const Lattice& lattice, double time_step = 1e-3);

}  // namespace mkvlab
