#pragma once

#include <Eigen/Dense>

#include <complex>
#include <string>
#include <vector>

namespace mkvlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ComplexVector = Eigen::VectorXcd;

/// Tolerances for eigenvalue clustering and numerical rank decisions.
/// Both are relative: cluster_tol scales with ||A||, rank_tol with sigma_max.
struct SpectralOptions {
    double cluster_tol = 1e-7;
    double rank_tol = 1e-9;
};

/// One cluster of numerically coincident eigenvalues.
/// defect = size of the largest Jordan block of the cluster minus one,
/// detected by rank stagnation of (A - lambda I)^k.
struct EigenvalueCluster {
    std::complex<double> value;  // cluster mean
    int algebraic = 0;
    int geometric = 0;
    int defect = 0;
};

/// Matrix exponential e^{A t}. Throws std::invalid_argument on non-finite input.
Matrix expm(const Eigen::Ref<const Matrix>& A, double t = 1.0);

/// Symmetric PSD square root. Throws std::domain_error when B is asymmetric or
/// has a negative eigenvalue (the offending eigenvalue is named in the message).
Matrix psd_sqrt(const Eigen::Ref<const Matrix>& B);

/// Orthonormal basis of the numerical null space: singular values below
/// tol * sigma_max are treated as zero. Empty when A is injective.
std::vector<Vector> kernel_basis(const Eigen::Ref<const Matrix>& A, double tol = 1e-9);

/// Orthonormal basis of the numerical range (column space), as matrix columns.
Matrix range_basis(const Eigen::Ref<const Matrix>& A, double tol = 1e-9);

/// Numerical rank with threshold tol * sigma_max.
int numerical_rank(const Eigen::Ref<const Matrix>& A, double tol = 1e-9);

/// Solves A X + X A^T = 2 D for symmetric X via the d^2 x d^2 Kronecker system.
/// Throws std::domain_error when some eigenvalue sum lambda_i + lambda_j of A
/// is numerically zero (no unique solution).
Matrix solve_lyapunov(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& D,
                      const SpectralOptions& opts = {});

/// Verdict of the admissibility test for a drift/diffusion pair:
///   - diffusion_psd_rank_ok: B symmetric PSD with 1 <= rank(B) <= d
///   - drift_positively_stable: all eigenvalues of A have positive real part
///   - no_invariant_kernel_subspace: rank [B, AB, ..., A^{d-1}B] = d, which is
///     equivalent to ker(B) containing no A^T-invariant subspace
struct AdmissibilityReport {
    bool admissible = false;
    bool diffusion_psd_rank_ok = false;
    bool drift_positively_stable = false;
    bool no_invariant_kernel_subspace = false;
    int diffusion_rank = 0;
    int controllability_rank = 0;
};

AdmissibilityReport is_admissible(const Eigen::Ref<const Matrix>& A,
                                  const Eigen::Ref<const Matrix>& B,
                                  const SpectralOptions& opts = {});

/// Verdict for almost-positive stability: every eigenvalue either has positive
/// real part or is zero with equal algebraic and geometric multiplicity.
struct StabilityReport {
    bool holds = false;
    std::string reason;  // empty when holds
};

StabilityReport is_almost_positively_stable(const Eigen::Ref<const Matrix>& A,
                                            const SpectralOptions& opts = {});

bool is_positively_stable(const Eigen::Ref<const Matrix>& A, const SpectralOptions& opts = {});

/// Eigenvalues grouped into clusters (tolerance cluster_tol * ||A||), each with
/// algebraic/geometric multiplicity and maximal Jordan defect.
std::vector<EigenvalueCluster> eigenvalue_clusters(const Eigen::Ref<const Matrix>& A,
                                                   const SpectralOptions& opts = {});

/// Projection onto ker(C) along range(C). Valid when C is almost-positively
/// stable, so that kernel and range are complementary. Built from the block
/// inverse of [U_ker | U_range].
Matrix kernel_projection(const Eigen::Ref<const Matrix>& C, const SpectralOptions& opts = {});

/// Spectral data entering the decay rates: mu/n1 from C+K, nu/n2 from C, plus
/// the projection onto ker(C).
struct SpectralSummary {
    ComplexVector eigenvalues;        // of C+K
    ComplexVector drift_eigenvalues;  // of C
    double mu = 0.0;
    double nu = 0.0;
    int n1 = 0;
    int n2 = 0;
    Matrix ker_projection;
    int ker_dimension = 0;
};

/// Requires C almost-positively stable and C+K positively stable; throws
/// std::domain_error naming the violated property otherwise.
SpectralSummary spectral_summary(const Eigen::Ref<const Matrix>& C,
                                 const Eigen::Ref<const Matrix>& K,
                                 const SpectralOptions& opts = {});

/// Envelope data for ||e^{-A t}|| <= c (1 + t^n) e^{-rate t}:
/// rate is the spectral abscissa min Re(lambda), power the maximal defect
/// there, and constant the supremum of the ratio over a dense time grid.
struct SemigroupBound {
    double rate = 0.0;
    int power = 0;
    double constant = 1.0;
};

/// Requires A positively stable. The fit grid covers [0, t_max].
SemigroupBound matrix_semigroup_bound(const Eigen::Ref<const Matrix>& A, double t_max = 50.0,
                                      const SpectralOptions& opts = {});

/// Polynomial envelope factor: 1 when n == 0, else 1 + t^n.
double poly_factor(double t, int n);

/// Spectral (2-)norm, used for envelope ratios on small dense matrices.
double spectral_norm(const Eigen::Ref<const Matrix>& A);

}  // namespace mkvlab
