#include "mkvlab/matrix_core.hpp"

#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mkvlab {

namespace {

void require_finite(const Eigen::Ref<const Matrix>& A, const char* what) {
    if (!A.allFinite()) {
        throw std::invalid_argument(std::string(what) + ": matrix has non-finite entries");
    }
}

double cluster_scale(const Eigen::Ref<const Matrix>& A, const SpectralOptions& opts) {
    return opts.cluster_tol * std::max(A.norm(), 1e-100);
}

// Ranks of (A - lambda I)^k with thresholds relative to sigma_max(A - lambda I)^k,
// so that powers of a nilpotent part collapse to rank zero instead of picking up
// rounding noise. Returns the size of the largest Jordan block of the cluster.
int largest_jordan_block(const Eigen::MatrixXcd& A, std::complex<double> lambda, int algebraic,
                         const SpectralOptions& opts) {
    const int d = static_cast<int>(A.rows());
    Eigen::MatrixXcd shifted = A;
    shifted.diagonal().array() -= lambda;

    const double scale = shifted.jacobiSvd().singularValues()(0);
    if (scale <= opts.rank_tol * std::max(1.0, A.norm())) {
        return 1;  // A is lambda I on the whole space
    }

    Eigen::MatrixXcd power = Eigen::MatrixXcd::Identity(d, d);
    int prev_rank = d;
    double threshold = opts.rank_tol;
    for (int k = 1; k <= algebraic + 1; ++k) {
        power = power * shifted;
        threshold *= scale;
        const Eigen::VectorXd sv = power.jacobiSvd().singularValues();
        const int rank = static_cast<int>((sv.array() > threshold).count());
        if (rank == prev_rank) {
            return k - 1;
        }
        prev_rank = rank;
    }
    return algebraic;  // rank kept dropping until the multiplicity bound
}

}  // namespace

double poly_factor(double t, int n) {
    return n == 0 ? 1.0 : 1.0 + std::pow(t, n);
}

double spectral_norm(const Eigen::Ref<const Matrix>& A) {
    if (A.size() == 0) return 0.0;
    return A.jacobiSvd().singularValues()(0);
}

Matrix expm(const Eigen::Ref<const Matrix>& A, double t) {
    require_finite(A, "expm");
    if (!std::isfinite(t)) {
        throw std::invalid_argument("expm: non-finite time");
    }
    return (A * t).exp();
}

Matrix psd_sqrt(const Eigen::Ref<const Matrix>& B) {
    require_finite(B, "psd_sqrt");
    const double scale = std::max(B.norm(), 1e-100);
    if ((B - B.transpose()).norm() > 1e-9 * scale) {
        throw std::domain_error("psd_sqrt: matrix is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (B + B.transpose()));
    Vector lambda = es.eigenvalues();
    const double floor = -1e-9 * std::max(lambda.cwiseAbs().maxCoeff(), 1e-100);
    for (int i = 0; i < lambda.size(); ++i) {
        if (lambda(i) < floor) {
            std::ostringstream msg;
            msg << "psd_sqrt: matrix is indefinite, eigenvalue " << lambda(i) << " < 0";
            throw std::domain_error(msg.str());
        }
        lambda(i) = std::max(lambda(i), 0.0);
    }
    Matrix S = es.eigenvectors() * lambda.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (S + S.transpose());
}

std::vector<Vector> kernel_basis(const Eigen::Ref<const Matrix>& A, double tol) {
    require_finite(A, "kernel_basis");
    if (tol <= 0.0) {
        throw std::invalid_argument("kernel_basis: tolerance must be positive");
    }
    const int d = static_cast<int>(A.cols());
    Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeFullV);
    const Eigen::VectorXd sv = svd.singularValues();
    const double smax = sv.size() > 0 ? sv(0) : 0.0;
    std::vector<Vector> basis;
    for (int i = 0; i < d; ++i) {
        const double s = i < sv.size() ? sv(i) : 0.0;
        if (s <= tol * smax) {
            basis.push_back(svd.matrixV().col(i));
        }
    }
    return basis;
}

Matrix range_basis(const Eigen::Ref<const Matrix>& A, double tol) {
    Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeFullU);
    const Eigen::VectorXd sv = svd.singularValues();
    const double smax = sv.size() > 0 ? sv(0) : 0.0;
    int rank = 0;
    for (int i = 0; i < sv.size(); ++i) {
        if (sv(i) > tol * smax && smax > 0.0) ++rank;
    }
    return svd.matrixU().leftCols(rank);
}

int numerical_rank(const Eigen::Ref<const Matrix>& A, double tol) {
    const Eigen::VectorXd sv = A.jacobiSvd().singularValues();
    const double smax = sv.size() > 0 ? sv(0) : 0.0;
    if (smax == 0.0) return 0;
    return static_cast<int>((sv.array() > tol * smax).count());
}

std::vector<EigenvalueCluster> eigenvalue_clusters(const Eigen::Ref<const Matrix>& A,
                                                   const SpectralOptions& opts) {
    require_finite(A, "eigenvalue_clusters");
    const int d = static_cast<int>(A.rows());
    if (A.cols() != d) {
        throw std::invalid_argument("eigenvalue_clusters: matrix must be square");
    }
    if (d == 0) return {};
    Eigen::EigenSolver<Matrix> es(A, /*computeEigenvectors=*/false);
    const ComplexVector ev = es.eigenvalues();
    const double tol = cluster_scale(A, opts);

    // Union-find grouping of eigenvalues within the cluster tolerance.
    std::vector<int> parent(d);
    std::iota(parent.begin(), parent.end(), 0);
    const auto find = [&](int i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    };
    for (int i = 0; i < d; ++i) {
        for (int j = i + 1; j < d; ++j) {
            if (std::abs(ev(i) - ev(j)) <= tol) parent[find(i)] = find(j);
        }
    }

    const Eigen::MatrixXcd Ac = A.cast<std::complex<double>>();
    std::vector<EigenvalueCluster> clusters;
    for (int root = 0; root < d; ++root) {
        if (find(root) != root) continue;
        EigenvalueCluster c;
        std::complex<double> sum = 0.0;
        for (int i = 0; i < d; ++i) {
            if (find(i) == root) {
                sum += ev(i);
                ++c.algebraic;
            }
        }
        // The cluster mean cancels the leading perturbation of a defective
        // eigenvalue, so it is the right shift for the rank-stagnation scan.
        c.value = sum / static_cast<double>(c.algebraic);
        if (std::abs(c.value) <= tol) c.value = 0.0;

        Eigen::MatrixXcd shifted = Ac;
        shifted.diagonal().array() -= c.value;
        c.geometric = c.algebraic;
        {
            const Eigen::VectorXd sv = shifted.jacobiSvd().singularValues();
            const double smax = sv(0);
            if (smax > 0.0) {
                const int rank = static_cast<int>((sv.array() > opts.rank_tol * smax).count());
                c.geometric = d - rank;
            } else {
                c.geometric = d;
            }
        }
        c.defect = largest_jordan_block(Ac, c.value, c.algebraic, opts) - 1;
        clusters.push_back(c);
    }
    std::sort(clusters.begin(), clusters.end(), [](const auto& a, const auto& b) {
        if (a.value.real() != b.value.real()) return a.value.real() < b.value.real();
        return a.value.imag() < b.value.imag();
    });
    return clusters;
}

Matrix solve_lyapunov(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& D,
                      const SpectralOptions& opts) {
    require_finite(A, "solve_lyapunov");
    require_finite(D, "solve_lyapunov");
    const int d = static_cast<int>(A.rows());
    if (A.cols() != d || D.rows() != d || D.cols() != d) {
        throw std::invalid_argument("solve_lyapunov: dimension mismatch");
    }

    const ComplexVector ev = Eigen::EigenSolver<Matrix>(A, false).eigenvalues();
    const double tol = opts.rank_tol * std::max(1.0, 2.0 * ev.cwiseAbs().maxCoeff());
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            if (std::abs(ev(i) + ev(j)) <= tol) {
                std::ostringstream msg;
                msg << "solve_lyapunov: no unique solution, eigenvalue sum " << ev(i) << " + "
                    << ev(j) << " is numerically zero";
                throw std::domain_error(msg.str());
            }
        }
    }

    const Matrix I = Matrix::Identity(d, d);
    Matrix system = Eigen::kroneckerProduct(I, A) + Eigen::kroneckerProduct(A, I);
    Vector rhs = 2.0 * D.reshaped();
    Vector x = system.partialPivLu().solve(rhs);
    Matrix X = x.reshaped(d, d);
    return 0.5 * (X + X.transpose());
}

bool is_positively_stable(const Eigen::Ref<const Matrix>& A, const SpectralOptions& opts) {
    const ComplexVector ev = Eigen::EigenSolver<Matrix>(A, false).eigenvalues();
    const double tol = cluster_scale(A, opts);
    for (int i = 0; i < ev.size(); ++i) {
        if (ev(i).real() <= tol) return false;
    }
    return true;
}

AdmissibilityReport is_admissible(const Eigen::Ref<const Matrix>& A,
                                  const Eigen::Ref<const Matrix>& B,
                                  const SpectralOptions& opts) {
    require_finite(A, "is_admissible");
    require_finite(B, "is_admissible");
    const int d = static_cast<int>(A.rows());
    if (A.cols() != d || B.rows() != d || B.cols() != d) {
        throw std::invalid_argument("is_admissible: matrices must be square with equal dimension");
    }

    AdmissibilityReport report;

    const double bscale = std::max(B.norm(), 1e-100);
    bool symmetric = (B - B.transpose()).norm() <= 1e-9 * bscale;
    bool psd = false;
    if (symmetric) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (B + B.transpose()),
                                                 Eigen::EigenvaluesOnly);
        psd = es.eigenvalues().minCoeff() >= -1e-9 * bscale;
    }
    report.diffusion_rank = numerical_rank(B, opts.rank_tol);
    report.diffusion_psd_rank_ok = symmetric && psd && report.diffusion_rank >= 1;

    report.drift_positively_stable = is_positively_stable(A, opts);

    // Kalman controllability block [B, AB, ..., A^{d-1}B]: full rank iff ker(B)
    // contains no A^T-invariant subspace.
    Matrix blocks(d, d * d);
    Matrix power = B;
    blocks.leftCols(d) = power;
    for (int k = 1; k < d; ++k) {
        power = A * power;
        blocks.middleCols(k * d, d) = power;
    }
    report.controllability_rank = numerical_rank(blocks, opts.rank_tol);
    report.no_invariant_kernel_subspace = report.controllability_rank == d;

    report.admissible = report.diffusion_psd_rank_ok && report.drift_positively_stable &&
                        report.no_invariant_kernel_subspace;
    return report;
}

StabilityReport is_almost_positively_stable(const Eigen::Ref<const Matrix>& A,
                                            const SpectralOptions& opts) {
    StabilityReport report;
    const double tol = cluster_scale(A, opts);
    const auto clusters = eigenvalue_clusters(A, opts);
    for (const auto& c : clusters) {
        if (c.value == 0.0) {
            if (c.geometric != c.algebraic) {
                std::ostringstream msg;
                msg << "zero eigenvalue is defective: algebraic multiplicity " << c.algebraic
                    << ", geometric multiplicity " << c.geometric;
                report.reason = msg.str();
                return report;
            }
        } else if (c.value.real() <= tol) {
            std::ostringstream msg;
            msg << "eigenvalue " << c.value << " has non-positive real part";
            report.reason = msg.str();
            return report;
        }
    }
    report.holds = true;
    return report;
}

Matrix kernel_projection(const Eigen::Ref<const Matrix>& C, const SpectralOptions& opts) {
    const int d = static_cast<int>(C.rows());
    const auto kernel = kernel_basis(C, opts.rank_tol);
    const int r = static_cast<int>(kernel.size());
    if (r == 0) return Matrix::Zero(d, d);
    if (r == d) return Matrix::Identity(d, d);

    Matrix M(d, d);
    for (int i = 0; i < r; ++i) M.col(i) = kernel[static_cast<size_t>(i)];
    M.rightCols(d - r) = range_basis(C, opts.rank_tol);

    Eigen::FullPivLU<Matrix> lu(M);
    if (!lu.isInvertible()) {
        throw std::domain_error(
            "kernel_projection: kernel and range are not complementary "
            "(matrix is not almost-positively stable)");
    }
    Matrix Minv = lu.inverse();
    return M.leftCols(r) * Minv.topRows(r);
}

SpectralSummary spectral_summary(const Eigen::Ref<const Matrix>& C,
                                 const Eigen::Ref<const Matrix>& K,
                                 const SpectralOptions& opts) {
    const int d = static_cast<int>(C.rows());
    if (C.cols() != d || K.rows() != d || K.cols() != d) {
        throw std::invalid_argument("spectral_summary: dimension mismatch");
    }

    const StabilityReport drift = is_almost_positively_stable(C, opts);
    if (!drift.holds) {
        throw std::domain_error("spectral_summary: drift matrix is not almost-positively stable: " +
                                drift.reason);
    }

    const Matrix A = C + K;
    const auto a_clusters = eigenvalue_clusters(A, opts);
    const double a_tol = cluster_scale(A, opts);

    SpectralSummary s;
    s.eigenvalues = Eigen::EigenSolver<Matrix>(A, false).eigenvalues();
    s.drift_eigenvalues = Eigen::EigenSolver<Matrix>(Matrix(C), false).eigenvalues();

    s.mu = a_clusters.front().value.real();
    for (const auto& c : a_clusters) s.mu = std::min(s.mu, c.value.real());
    if (s.mu <= a_tol) {
        throw std::domain_error("spectral_summary: drift+interaction matrix is not positively stable");
    }
    s.n1 = 0;
    for (const auto& c : a_clusters) {
        if (c.value.real() <= s.mu + a_tol) s.n1 = std::max(s.n1, c.defect);
    }

    const auto c_clusters = eigenvalue_clusters(C, opts);
    const double c_tol = cluster_scale(C, opts);
    bool has_nonzero = false;
    for (const auto& c : c_clusters) {
        if (c.value != 0.0) {
            s.nu = has_nonzero ? std::min(s.nu, c.value.real()) : c.value.real();
            has_nonzero = true;
        }
    }
    if (!has_nonzero) {
        s.nu = 0.0;  // C = 0: no nonzero spectrum
        s.n2 = 0;
    } else {
        s.n2 = 0;
        for (const auto& c : c_clusters) {
            if (c.value != 0.0 && c.value.real() <= s.nu + c_tol) s.n2 = std::max(s.n2, c.defect);
        }
    }

    s.ker_projection = kernel_projection(C, opts);
    s.ker_dimension = static_cast<int>(kernel_basis(C, opts.rank_tol).size());
    return s;
}

SemigroupBound matrix_semigroup_bound(const Eigen::Ref<const Matrix>& A, double t_max,
                                      const SpectralOptions& opts) {
    const auto clusters = eigenvalue_clusters(A, opts);
    if (clusters.empty()) {
        throw std::invalid_argument("matrix_semigroup_bound: empty matrix");
    }
    const double tol = cluster_scale(A, opts);
    double alpha = clusters.front().value.real();
    for (const auto& c : clusters) alpha = std::min(alpha, c.value.real());
    if (alpha <= tol) {
        throw std::domain_error("matrix_semigroup_bound: matrix is not positively stable");
    }
    int n = 0;
    for (const auto& c : clusters) {
        if (c.value.real() <= alpha + tol) n = std::max(n, c.defect);
    }

    // Fit c as the supremum of ||e^{-At}|| / ((1 + t^n) e^{-alpha t}) on a grid
    // dense near zero and extending past the requested horizon. Beyond
    // t ~ 600/alpha the exponentials underflow and the ratio has settled.
    const double horizon = std::min(std::max(t_max, 10.0 / alpha), 600.0 / alpha);
    const int samples = 600;
    double c_fit = 1.0;  // ratio at t = 0
    for (int i = 1; i <= samples; ++i) {
        const double t = horizon * static_cast<double>(i) / samples;
        const double envelope = poly_factor(t, n) * std::exp(-alpha * t);
        if (envelope < 1e-280) break;
        const double ratio = spectral_norm(expm(A, -t)) / envelope;
        c_fit = std::max(c_fit, ratio);
    }
    // refine near zero where the transient growth of non-normal matrices peaks
    for (int i = 1; i <= 100; ++i) {
        const double t = std::min(2.0 / alpha, horizon) * static_cast<double>(i) / 100.0;
        const double envelope = poly_factor(t, n) * std::exp(-alpha * t);
        const double ratio = spectral_norm(expm(A, -t)) / envelope;
        c_fit = std::max(c_fit, ratio);
    }
    return SemigroupBound{alpha, n, c_fit};
}

}  // namespace mkvlab
