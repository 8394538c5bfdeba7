#include "mkvlab/mckean_vlasov.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mkvlab {

namespace {

void require_time(double t, const char* what) {
    if (t < 0.0 || !std::isfinite(t)) {
        throw std::domain_error(std::string(what) + ": time must be finite and nonnegative");
    }
}

}  // namespace

ModelTriple make_model(const Eigen::Ref<const Matrix>& C, const Eigen::Ref<const Matrix>& K,
                       const Eigen::Ref<const Matrix>& D, const GaussianState& initial,
                       double mass) {
    if (mass <= 0.0) throw std::invalid_argument("make_model: mass must be positive");
    ModelTriple model;
    model.C = C;
    model.K = K;
    model.D = D;
    model.m0 = mass;
    model.m1 = mass * initial.mean;
    return model;
}

void validate_model(const ModelTriple& model, const SpectralOptions& opts) {
    const int d = model.dim();
    if (model.K.rows() != d || model.K.cols() != d || model.D.rows() != d ||
        model.D.cols() != d || model.C.cols() != d || model.m1.size() != d) {
        throw std::invalid_argument("validate_model: inconsistent dimensions");
    }
    if (model.m0 <= 0.0) throw std::invalid_argument("validate_model: mass must be positive");
    const AdmissibilityReport report = is_admissible(model.flow_matrix(), model.D, opts);
    if (!report.admissible) {
        std::ostringstream msg;
        msg << "validate_model: (C + m0 K, D) is not admissible:";
        if (!report.diffusion_psd_rank_ok) msg << " diffusion matrix not PSD of rank >= 1;";
        if (!report.drift_positively_stable) msg << " drift+interaction not positively stable;";
        if (!report.no_invariant_kernel_subspace)
            msg << " controllability rank " << report.controllability_rank << " < " << d << ";";
        throw std::domain_error(msg.str());
    }
}

Matrix normalize_mass(const Eigen::Ref<const Matrix>& K, double mass) {
    if (mass <= 0.0 || !std::isfinite(mass)) {
        throw std::invalid_argument("normalize_mass: mass must be positive and finite");
    }
    return mass * K;
}

Vector first_moment(const ModelTriple& model, double t) {
    require_time(t, "first_moment");
    return expm(model.C, -t) * model.m1;
}

Vector shift(const ModelTriple& model, double t) {
    require_time(t, "shift");
    const Matrix xi = expm(model.C, -t) - expm(model.flow_matrix(), -t);
    return xi * model.unit_first_moment();
}

Vector shift_general(const ModelTriple& model, const Vector& s0, double t) {
    require_time(t, "shift_general");
    return shift(model, t) + expm(model.flow_matrix(), -t) * s0;
}

Vector shift_limit(const ModelTriple& model, const SpectralOptions& opts) {
    const StabilityReport drift = is_almost_positively_stable(model.C, opts);
    if (!drift.holds) {
        throw std::domain_error("shift_limit: drift matrix is not almost-positively stable: " +
                                drift.reason);
    }
    if (!is_positively_stable(model.flow_matrix(), opts)) {
        throw std::domain_error("shift_limit: C + m0 K is not positively stable");
    }
    return kernel_projection(model.C, opts) * model.unit_first_moment();
}

ShiftTrajectory make_shift_trajectory(const ModelTriple& model, const SpectralOptions& opts) {
    const SpectralSummary s = spectral_summary(model.C, model.effective_interaction(), opts);
    ShiftTrajectory traj;
    traj.model = model;
    traj.s_infinity = s.ker_projection * model.unit_first_moment();
    traj.mu = s.mu;
    traj.nu = s.nu;
    traj.n1 = s.n1;
    traj.n2 = s.n2;
    return traj;
}

ShiftEnvelope::ShiftEnvelope(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                             double t_max, const SpectralOptions& opts)
    : A_(A), sum_(A + B) {
    const StabilityReport report = is_almost_positively_stable(A, opts);
    if (!report.holds) {
        throw std::domain_error("xi_bound: matrix is not almost-positively stable: " +
                                report.reason);
    }
    if (!is_positively_stable(sum_, opts)) {
        throw std::domain_error("xi_bound: A + B is not positively stable");
    }
    projection_ = kernel_projection(A_, opts);
    full_part_ = matrix_semigroup_bound(sum_, t_max, opts);

    // Restrict A to its invariant complement of the kernel (the range, since A
    // is almost-positively stable); the restriction is positively stable.
    const Matrix range = range_basis(A_, opts.rank_tol);
    if (range.cols() > 0) {
        const Matrix restricted = range.transpose() * A_ * range;
        kernel_part_ = matrix_semigroup_bound(restricted, t_max, opts);
        has_kernel_part_ = true;
    }
}

double ShiftEnvelope::lhs(double t, const Vector& x) const {
    const Vector xi = (expm(A_, -t) - expm(sum_, -t)) * x;
    return (xi - projection_ * x).norm();
}

double ShiftEnvelope::rhs(double t, const Vector& x) const {
    double bound = full_part_.constant * poly_factor(t, full_part_.power) *
                   std::exp(-full_part_.rate * t) * x.norm();
    if (has_kernel_part_) {
        const double complement = (x - projection_ * x).norm();
        bound += kernel_part_.constant * poly_factor(t, kernel_part_.power) *
                 std::exp(-kernel_part_.rate * t) * complement;
    }
    return bound;
}

double ShiftEnvelope::evaluation_floor(const Vector& x) const {
    return 1e-13 * (1.0 + projection_.norm()) * (1.0 + x.norm());
}

XiBoundResult xi_bound(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                       double t, const Vector& x, const SpectralOptions& opts) {
    require_time(t, "xi_bound");
    const ShiftEnvelope envelope(A, B, std::max(50.0, 1.5 * t), opts);
    return XiBoundResult{envelope.lhs(t, x), envelope.rhs(t, x)};
}

GaussianState solve(const ModelTriple& model, const GaussianState& rho0, double t) {
    require_time(t, "solve");
    const Vector expected_mean = model.unit_first_moment();
    if ((rho0.mean - expected_mean).norm() > 1e-9 * (1.0 + expected_mean.norm())) {
        throw std::invalid_argument(
            "solve: initial datum's first moment does not match the model's m1/m0");
    }
    GaussianState law = gaussian_flow(model.flow_matrix(), model.D, rho0, t);
    law.mean += shift(model, t);
    return law;
}

double solve(const ModelTriple& model, const GaussianState& rho0, const Vector& x, double t) {
    const GaussianState law = solve(model, rho0, t);
    Eigen::LLT<Matrix> llt(law.covariance);
    if (llt.info() != Eigen::Success) {
        throw std::domain_error("solve: law covariance is singular at the requested time");
    }
    const Vector u = llt.matrixL().solve(x - law.mean);
    const double log_det =
        2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    const int d = model.dim();
    return std::exp(-0.5 * (u.squaredNorm() + d * std::log(2.0 * std::numbers::pi) + log_det));
}

double solve(const ModelTriple& model, const GridDensity& rho0, const Vector& x, double t) {
    require_time(t, "solve");
    if (std::abs(rho0.mass() - model.m0) > 0.01 * model.m0) {
        throw std::invalid_argument("solve: grid density mass deviates from m0 by more than 1%");
    }
    const Vector shifted = x - shift(model, t);
    return fp_density(model.flow_matrix(), model.D, rho0, shifted, t);
}

EntropyDecomposition entropy_decomposition(const ModelTriple& model, const GaussianState& rho_t,
                                           double t, const SpectralOptions& opts) {
    require_time(t, "entropy_decomposition");
    const GaussianState eq = equilibrium(model.flow_matrix(), model.D, opts);
    const Vector s_t = shift(model, t);
    const Vector s_inf = shift_limit(model, opts);

    EntropyDecomposition parts;
    parts.total = gaussian_relative_entropy(rho_t, GaussianState{s_inf, eq.covariance});
    parts.profile = gaussian_relative_entropy(rho_t, GaussianState{s_t, eq.covariance});

    Eigen::LLT<Matrix> llt(eq.covariance);
    const Vector delta = s_t - s_inf;
    const Vector moment = expm(model.C, -t) * model.unit_first_moment();
    parts.cross = delta.dot(llt.solve(moment));
    parts.quadratic = -0.5 * delta.dot(llt.solve(s_t + s_inf));
    return parts;
}

EntropyBoundReport mkv_entropy_bound(const ModelTriple& model, const GaussianState& rho0,
                                     const std::vector<double>& t_grid,
                                     const SpectralOptions& opts) {
    validate_model(model, opts);
    EntropyBoundReport report;
    report.spectral = spectral_summary(model.C, model.effective_interaction(), opts);

    const GaussianState eq = equilibrium(model.flow_matrix(), model.D, opts);
    const Vector m1 = model.unit_first_moment();
    const Vector s_inf = report.spectral.ker_projection * m1;
    const Vector m1_kernel = report.spectral.ker_projection * m1;
    const Vector m1_complement = m1 - m1_kernel;

    report.h0 = gaussian_relative_entropy(rho0, eq);
    const bool degenerate = report.h0 <= 1e-14 && m1.norm() <= 1e-14;

    const double mu = report.spectral.mu;
    const double nu = report.spectral.nu;
    const int n1 = report.spectral.n1;
    const int n2 = report.spectral.n2;

    report.trace.reserve(t_grid.size());
    for (double t : t_grid) {
        BoundTracePoint p;
        p.t = t;
        const GaussianState law = solve(model, rho0, t);
        const EntropyDecomposition parts = entropy_decomposition(model, law, t, opts);
        p.total = parts.total;
        p.profile = parts.profile;
        p.cross = parts.cross;
        p.quadratic = parts.quadratic;
        report.max_decomposition_residual =
            std::max(report.max_decomposition_residual, std::abs(parts.residual()));

        p.envelope1 = report.h0 * poly_factor(t, 2 * n1) * std::exp(-2.0 * mu * t);
        const double profile_decay = poly_factor(t, n1) * std::exp(-mu * t);
        const double kernel_decay = poly_factor(t, n2) * std::exp(-nu * t);
        p.envelope2 = (kernel_decay * m1_complement.norm() + profile_decay * m1.norm()) *
                      ((1.0 + profile_decay) * m1_kernel.norm() +
                       kernel_decay * m1_complement.norm());
        p.shift_error = (shift(model, t) - s_inf).norm();

        const double envelope = p.envelope1 + p.envelope2;
        if (envelope > 0.0) {
            report.c_hat = std::max(report.c_hat, p.total / envelope);
        }
        report.trace.push_back(p);
    }
    report.decomposition_ok = report.max_decomposition_residual <= 1e-8;

    if (degenerate) {
        report.ratio_bounded = true;  // everything is identically zero
        return report;
    }
    const size_t split = report.trace.size() / 2;
    double c_early = 0.0;
    double c_late = 0.0;
    for (size_t i = 0; i < report.trace.size(); ++i) {
        const double envelope = report.trace[i].envelope1 + report.trace[i].envelope2;
        if (envelope <= 0.0) continue;
        double& bucket = i <= split ? c_early : c_late;
        bucket = std::max(bucket, report.trace[i].total / envelope);
    }
    report.ratio_bounded = c_late <= 1.10 * std::max(c_early, 1e-300);
    return report;
}

PdeResidualReport pde_residual(const ModelTriple& model, const GaussianState& rho0, double t,
                               const Lattice& lattice, double time_step) {
    const int d = model.dim();
    if (lattice.dim() != d || d > 2) {
        throw std::invalid_argument("pde_residual: lattice must match the model dimension, d <= 2");
    }
    if (t <= time_step) {
        throw std::domain_error("pde_residual: need t > time_step for the centered t-difference");
    }

    const GaussianState law = solve(model, rho0, t);
    PdeResidualReport report;
    {
        Eigen::SelfAdjointEigenSolver<Matrix> es(law.covariance, Eigen::EigenvaluesOnly);
        const double sigma_min = std::sqrt(std::max(es.eigenvalues().minCoeff(), 0.0));
        report.suggested_spacing = sigma_min / 10.0;
        report.grid_adequate = lattice.spacing.maxCoeff() <= report.suggested_spacing + 1e-15;
    }

    const GridDensity rho = sample_gaussian(law, lattice);
    const GridDensity rho_minus =
        sample_gaussian(solve(model, rho0, t - time_step), lattice);
    const GridDensity rho_plus = sample_gaussian(solve(model, rho0, t + time_step), lattice);

    const Matrix drift = model.flow_matrix();
    const Vector transport =
        model.effective_interaction() * (expm(model.C, -t) * model.unit_first_moment());

    // flux F_i = (drift x - transport)_i rho + sum_j D_ij d_j rho on the grid,
    // then residual = d_t rho - div F with centered differences (margin 2).
    const long nx = lattice.counts[0];
    const long ny = d == 2 ? lattice.counts[1] : 1;
    const auto flat = [ny](long i, long j) { return i * ny + j; };
    const long j_margin = d == 2 ? 1 : 0;

    Matrix grad0 = Matrix::Zero(nx, ny);
    Matrix grad1 = Matrix::Zero(nx, ny);
    std::vector<Matrix> flux(static_cast<size_t>(d), Matrix::Zero(nx, ny));
    for (long i = 1; i + 1 < nx; ++i) {
        for (long j = j_margin; j + j_margin < ny; ++j) {
            grad0(i, j) = (rho.values(flat(i + 1, j)) - rho.values(flat(i - 1, j))) /
                          (2.0 * lattice.spacing(0));
            if (d == 2) {
                grad1(i, j) = (rho.values(flat(i, j + 1)) - rho.values(flat(i, j - 1))) /
                              (2.0 * lattice.spacing(1));
            }
            Vector x(d);
            x(0) = lattice.origin(0) + lattice.spacing(0) * static_cast<double>(i);
            if (d == 2) x(1) = lattice.origin(1) + lattice.spacing(1) * static_cast<double>(j);
            const Vector a = drift * x - transport;
            const double r = rho.values(flat(i, j));
            for (int axis = 0; axis < d; ++axis) {
                double diffusion = model.D(axis, 0) * grad0(i, j);
                if (d == 2) diffusion += model.D(axis, 1) * grad1(i, j);
                flux[static_cast<size_t>(axis)](i, j) = a(axis) * r + diffusion;
            }
        }
    }

    double max_residual = 0.0;
    for (long i = 2; i + 2 < nx; ++i) {
        for (long j = 2 * j_margin; j + 2 * j_margin < ny; ++j) {
            const double dt_rho =
                (rho_plus.values(flat(i, j)) - rho_minus.values(flat(i, j))) / (2.0 * time_step);
            double div = (flux[0](i + 1, j) - flux[0](i - 1, j)) / (2.0 * lattice.spacing(0));
            if (d == 2) {
                div += (flux[1](i, j + 1) - flux[1](i, j - 1)) / (2.0 * lattice.spacing(1));
            }
            max_residual = std::max(max_residual, std::abs(dt_rho - div));
        }
    }
    report.max_residual = max_residual;
    return report;
}

}  // namespace mkvlab
