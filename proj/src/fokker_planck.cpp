#include "mkvlab/fokker_planck.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mkvlab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double min_real_eigenvalue(const Eigen::Ref<const Matrix>& A) {
    const ComplexVector ev = Eigen::EigenSolver<Matrix>(A, false).eigenvalues();
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i < ev.size(); ++i) m = std::min(m, ev(i).real());
    return m;
}

// log det of a PD matrix from its Cholesky factor
double log_det_from_llt(const Eigen::LLT<Matrix>& llt) {
    return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

struct PdfEvaluator {
    Vector mean;
    Eigen::LLT<Matrix> llt;
    double norm_const;

    explicit PdfEvaluator(const GaussianState& g) : mean(g.mean), llt(g.covariance) {
        if (llt.info() != Eigen::Success) {
            throw std::domain_error("gaussian pdf: covariance is not positive definite");
        }
        const int d = g.dim();
        norm_const = std::exp(-0.5 * (d * std::log(kTwoPi) + log_det_from_llt(llt)));
    }

    double operator()(const Vector& x) const {
        const Vector u = llt.matrixL().solve(x - mean);
        return norm_const * std::exp(-0.5 * u.squaredNorm());
    }
};

}  // namespace

long Lattice::node_count() const {
    long n = 1;
    for (int c : counts) n *= c;
    return n;
}

Vector Lattice::node(long flat_index) const {
    const int d = dim();
    Vector x(d);
    for (int axis = d - 1; axis >= 0; --axis) {
        const long n = counts[static_cast<size_t>(axis)];
        x(axis) = origin(axis) + spacing(axis) * static_cast<double>(flat_index % n);
        flat_index /= n;
    }
    return x;
}

double Lattice::cell_volume() const {
    double v = 1.0;
    for (int axis = 0; axis < dim(); ++axis) v *= spacing(axis);
    return v;
}

double Lattice::weight(long flat_index) const {
    double w = 1.0;
    for (int axis = dim() - 1; axis >= 0; --axis) {
        const long n = counts[static_cast<size_t>(axis)];
        const long i = flat_index % n;
        if (i == 0 || i == n - 1) w *= 0.5;
        flat_index /= n;
    }
    return w;
}

double GridDensity::mass() const {
    double acc = 0.0;
    for (long j = 0; j < grid.node_count(); ++j) acc += grid.weight(j) * values(j);
    return acc * grid.cell_volume();
}

Vector GridDensity::first_moment() const {
    Vector m = Vector::Zero(grid.dim());
    for (long j = 0; j < grid.node_count(); ++j) {
        m += grid.weight(j) * values(j) * grid.node(j);
    }
    return m * grid.cell_volume();
}

double GridDensity::interpolate(const Vector& x) const {
    const int d = grid.dim();
    std::vector<long> lo(static_cast<size_t>(d));
    std::vector<double> frac(static_cast<size_t>(d));
    for (int axis = 0; axis < d; ++axis) {
        const double s = (x(axis) - grid.origin(axis)) / grid.spacing(axis);
        if (s < 0.0 || s > grid.counts[static_cast<size_t>(axis)] - 1) return 0.0;
        long i = static_cast<long>(std::floor(s));
        i = std::min<long>(i, grid.counts[static_cast<size_t>(axis)] - 2);
        lo[static_cast<size_t>(axis)] = i;
        frac[static_cast<size_t>(axis)] = s - static_cast<double>(i);
    }
    double acc = 0.0;
    for (int corner = 0; corner < (1 << d); ++corner) {
        long flat = 0;
        double w = 1.0;
        for (int axis = 0; axis < d; ++axis) {
            const bool hi = (corner >> axis) & 1;
            flat = flat * grid.counts[static_cast<size_t>(axis)] +
                   (lo[static_cast<size_t>(axis)] + (hi ? 1 : 0));
            w *= hi ? frac[static_cast<size_t>(axis)] : 1.0 - frac[static_cast<size_t>(axis)];
        }
        acc += w * values(flat);
    }
    return acc;
}

GridDensity read_grid_density(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("read_grid_density: cannot open " + path);
    int d = 0;
    if (!(in >> d) || (d != 1 && d != 2)) {
        throw std::invalid_argument("read_grid_density: dimension must be 1 or 2 in " + path);
    }
    GridDensity gd;
    gd.grid.spacing.resize(d);
    gd.grid.origin.resize(d);
    gd.grid.counts.resize(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        if (!(in >> gd.grid.spacing(i)) || gd.grid.spacing(i) <= 0.0) {
            throw std::invalid_argument("read_grid_density: bad spacing in " + path);
        }
    }
    for (int i = 0; i < d; ++i) {
        if (!(in >> gd.grid.counts[static_cast<size_t>(i)]) ||
            gd.grid.counts[static_cast<size_t>(i)] < 2) {
            throw std::invalid_argument("read_grid_density: bad node count in " + path);
        }
    }
    for (int i = 0; i < d; ++i) {
        if (!(in >> gd.grid.origin(i))) {
            throw std::invalid_argument("read_grid_density: bad origin in " + path);
        }
    }
    const long n = gd.grid.node_count();
    gd.values.resize(n);
    for (long j = 0; j < n; ++j) {
        if (!(in >> gd.values(j))) {
            throw std::invalid_argument("read_grid_density: expected " + std::to_string(n) +
                                        " values in " + path);
        }
        if (gd.values(j) < 0.0) {
            throw std::invalid_argument("read_grid_density: negative value at node " +
                                        std::to_string(j) + " in " + path);
        }
    }
    return gd;
}

void write_grid_density(const std::string& path, const GridDensity& density) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("write_grid_density: cannot open " + path);
    const int d = density.grid.dim();
    out.precision(17);
    out << d;
    for (int i = 0; i < d; ++i) out << ' ' << density.grid.spacing(i);
    for (int i = 0; i < d; ++i) out << ' ' << density.grid.counts[static_cast<size_t>(i)];
    for (int i = 0; i < d; ++i) out << ' ' << density.grid.origin(i);
    out << '\n';
    for (long j = 0; j < density.grid.node_count(); ++j) {
        out << density.values(j) << ((j + 1) % 8 == 0 ? '\n' : ' ');
    }
    out << '\n';
}

GridDensity sample_gaussian(const GaussianState& state, const Lattice& lattice) {
    const PdfEvaluator pdf(state);
    GridDensity gd;
    gd.grid = lattice;
    gd.values.resize(lattice.node_count());
    for (long j = 0; j < lattice.node_count(); ++j) gd.values(j) = pdf(lattice.node(j));
    return gd;
}

Matrix gram_kernel(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                   double t) {
    if (t < 0.0) throw std::domain_error("gram_kernel: time must be nonnegative");
    const int d = static_cast<int>(A.rows());
    if (t == 0.0) return Matrix::Zero(d, d);

    // Base step h small enough that the block exponential is well conditioned
    // (the bottom-right block grows like e^{||A|| h}); then double with the
    // exact semigroup identity Q(2s) = Q(s) + e^{-As} Q(s) e^{-A^T s}, whose
    // terms stay of the order of the stationary covariance.
    int doublings = 0;
    double h = t;
    while (h * A.norm() > 0.5 && doublings < 80) {
        h *= 0.5;
        ++doublings;
    }

    Matrix block = Matrix::Zero(2 * d, 2 * d);
    block.topLeftCorner(d, d) = -A;
    block.topRightCorner(d, d) = 2.0 * B;
    block.bottomRightCorner(d, d) = A.transpose();
    const Matrix E = expm(block, h);
    // top-left block is e^{-Ah}; its transpose is e^{-A^T h}
    Matrix Q = E.topRightCorner(d, d) * E.topLeftCorner(d, d).transpose();
    Matrix flow = E.topLeftCorner(d, d);
    for (int k = 0; k < doublings; ++k) {
        Q = Q + flow * Q * flow.transpose();
        flow = flow * flow;
    }
    return 0.5 * (Q + Q.transpose());
}

GaussianState equilibrium(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                          const SpectralOptions& opts) {
    const AdmissibilityReport report = is_admissible(A, B, opts);
    if (!report.admissible) {
        std::ostringstream msg;
        msg << "equilibrium: pair is not admissible:";
        if (!report.diffusion_psd_rank_ok) msg << " diffusion matrix not PSD of rank >= 1;";
        if (!report.drift_positively_stable) msg << " drift matrix not positively stable;";
        if (!report.no_invariant_kernel_subspace)
            msg << " controllability rank " << report.controllability_rank << " < " << A.rows()
                << ";";
        throw std::domain_error(msg.str());
    }
    GaussianState state;
    state.mean = Vector::Zero(A.rows());
    state.covariance = solve_lyapunov(A, B, opts);
    Eigen::LLT<Matrix> llt(state.covariance);
    if (llt.info() != Eigen::Success) {
        throw std::domain_error("equilibrium: computed covariance is not positive definite");
    }
    return state;
}

GaussianState gaussian_flow(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                            const GaussianState& initial, double t) {
    if (t < 0.0) throw std::domain_error("gaussian_flow: time must be nonnegative");
    if (t == 0.0) return initial;
    const Matrix flow = expm(A, -t);
    GaussianState out;
    out.mean = flow * initial.mean;
    Matrix cov = flow * initial.covariance * flow.transpose() + gram_kernel(A, B, t);
    out.covariance = 0.5 * (cov + cov.transpose());
    return out;
}

FpDensityEvaluator::FpDensityEvaluator(const Eigen::Ref<const Matrix>& A,
                                       const Eigen::Ref<const Matrix>& B, const GridDensity& rho0,
                                       double t) {
    dim_ = static_cast<int>(A.rows());
    if (rho0.grid.dim() != dim_) {
        throw std::invalid_argument("fp_density: grid dimension does not match the matrices");
    }
    if (t <= 0.0) throw std::domain_error("fp_density: evaluator requires t > 0");
    const double mu = min_real_eigenvalue(A);
    if (mu > 0.0 && t < 1e-6 / mu) {
        throw std::domain_error(
            "fp_density: kernel is numerically singular this early; evaluate at larger t");
    }

    const Matrix Q = gram_kernel(A, B, t);
    llt_.compute(Q);
    if (llt_.info() != Eigen::Success) {
        throw std::domain_error(
            "fp_density: time-t kernel is numerically singular; evaluate at larger t");
    }
    norm_const_ = std::exp(-0.5 * (dim_ * std::log(kTwoPi) + log_det_from_llt(llt_)));

    const Matrix flow = expm(A, -t);
    const long n = rho0.grid.node_count();
    transported_.resize(dim_, n);
    weights_.resize(n);
    const double vol = rho0.grid.cell_volume();
    for (long j = 0; j < n; ++j) {
        transported_.col(j) = flow * rho0.grid.node(j);
        weights_(j) = rho0.grid.weight(j) * rho0.values(j) * vol;
    }
}

double FpDensityEvaluator::operator()(const Vector& x) const {
    Matrix diff = (-transported_).colwise() + x;
    llt_.matrixL().solveInPlace(diff);
    const Eigen::ArrayXd q = diff.colwise().squaredNorm().transpose().array();
    return norm_const_ * (weights_.array() * (-0.5 * q).exp()).sum();
}

double fp_density(const Eigen::Ref<const Matrix>& A, const Eigen::Ref<const Matrix>& B,
                  const GridDensity& rho0, const Vector& x, double t) {
    if (t < 0.0) throw std::domain_error("fp_density: time must be nonnegative");
    if (t == 0.0) return rho0.interpolate(x);
    return FpDensityEvaluator(A, B, rho0, t)(x);
}

double gaussian_relative_entropy(const GaussianState& f, const GaussianState& g) {
    const int d = f.dim();
    if (g.dim() != d) throw std::invalid_argument("gaussian_relative_entropy: dimension mismatch");
    Eigen::LLT<Matrix> lltg(g.covariance);
    if (lltg.info() != Eigen::Success) {
        throw std::domain_error("gaussian_relative_entropy: reference covariance is singular");
    }

    // Whitened form: with W = L^-1 Sf L^-T (g = N(mg, L L^T)),
    //   H = 1/2 [ sum_i (w_i - 1 - ln w_i) + |L^-1 (mf - mg)|^2 ].
    // Each eigenvalue term has a double root at w = 1, so evaluating it as
    // (w-1) - log1p(w-1) keeps tiny entropies accurate: rounding noise in W
    // enters only quadratically instead of as an absolute eps-level error.
    const Matrix half = lltg.matrixL().solve(f.covariance);
    const Matrix whitened = lltg.matrixL().solve(half.transpose()).transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (whitened + whitened.transpose()),
                                             Eigen::EigenvaluesOnly);
    const Vector w = es.eigenvalues();
    if (w.minCoeff() <= 0.0) {
        return std::numeric_limits<double>::infinity();  // f is degenerate
    }
    double covariance_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const double u = w(i) - 1.0;
        covariance_term += u - std::log1p(u);
    }
    const double maha = lltg.matrixL().solve(f.mean - g.mean).squaredNorm();
    return std::max(0.0, 0.5 * (covariance_term + maha));
}

namespace {

// L1 distance between a callable density and a Gaussian over a box, by
// trapezoidal quadrature; adds the reference mass outside the box.
template <typename F>
double l1_against_gaussian(const F& f, const GaussianState& g, const Vector& lo, const Vector& hi,
                           int nodes_per_axis) {
    const PdfEvaluator gpdf(g);
    const int d = g.dim();
    Lattice box;
    box.origin = lo;
    box.counts.assign(static_cast<size_t>(d), nodes_per_axis);
    box.spacing = (hi - lo) / static_cast<double>(nodes_per_axis - 1);
    double l1 = 0.0;
    double gmass = 0.0;
    for (long j = 0; j < box.node_count(); ++j) {
        const Vector x = box.node(j);
        const double w = box.weight(j);
        const double gv = gpdf(x);
        l1 += w * std::abs(f(x) - gv);
        gmass += w * gv;
    }
    l1 *= box.cell_volume();
    gmass *= box.cell_volume();
    return l1 + std::max(0.0, 1.0 - gmass);
}

}  // namespace

CkpResult ckp_check(const GaussianState& f, const GaussianState& g) {
    const int d = f.dim();
    if (d > 2) throw std::invalid_argument("ckp_check: quadrature limited to d <= 2");
    CkpResult r;
    r.entropy = gaussian_relative_entropy(f, g);

    Eigen::SelfAdjointEigenSolver<Matrix> esf(f.covariance, Eigen::EigenvaluesOnly);
    Eigen::SelfAdjointEigenSolver<Matrix> esg(g.covariance, Eigen::EigenvaluesOnly);
    const double sigma = std::sqrt(std::max(esf.eigenvalues().maxCoeff(),
                                            esg.eigenvalues().maxCoeff()));
    const Vector lo = f.mean.cwiseMin(g.mean).array() - 8.0 * sigma;
    const Vector hi = f.mean.cwiseMax(g.mean).array() + 8.0 * sigma;

    const PdfEvaluator fpdf(f);
    const int nodes = d == 1 ? 4001 : 501;
    r.l1_distance = l1_against_gaussian(fpdf, g, lo, hi, nodes);
    r.holds = std::sqrt(2.0 * r.entropy) - r.l1_distance >= -1e-6;
    return r;
}

CkpResult ckp_check(const GridDensity& f, const GaussianState& g) {
    const int d = f.grid.dim();
    if (d != g.dim()) throw std::invalid_argument("ckp_check: dimension mismatch");
    if (std::abs(f.mass() - 1.0) > 0.01) {
        throw std::invalid_argument("ckp_check: grid density mass deviates from 1 by more than 1%");
    }
    CkpResult r;

    // Both integrals run over the same refined lattice with f taken as the
    // unit-mass normalized interpolant, so the pair (L1, entropy) describes
    // one and the same density. The reference mass outside the grid box is
    // added to the L1.
    const double scale = 1.0 / f.mass();
    const PdfEvaluator gpdf(g);
    Lattice box = f.grid;
    for (int axis = 0; axis < d; ++axis) {
        const int refine = d == 1 ? 8 : 4;
        box.counts[static_cast<size_t>(axis)] =
            (f.grid.counts[static_cast<size_t>(axis)] - 1) * refine + 1;
        box.spacing(axis) = f.grid.spacing(axis) / refine;
    }
    double l1 = 0.0;
    double entropy = 0.0;
    double gmass = 0.0;
    for (long j = 0; j < box.node_count(); ++j) {
        const Vector x = box.node(j);
        const double w = box.weight(j);
        const double fv = scale * f.interpolate(x);
        const double gv = gpdf(x);
        l1 += w * std::abs(fv - gv);
        gmass += w * gv;
        if (fv > 0.0) entropy += w * fv * std::log(fv / gv);
    }
    const double vol = box.cell_volume();
    r.l1_distance = l1 * vol + std::max(0.0, 1.0 - gmass * vol);
    r.entropy = entropy * vol;
    r.holds = std::sqrt(2.0 * std::max(r.entropy, 0.0)) - r.l1_distance >= -1e-6;
    return r;
}

DecayCertificate fp_decay_certificate(const Eigen::Ref<const Matrix>& A,
                                      const Eigen::Ref<const Matrix>& B,
                                      const GaussianState& initial,
                                      const std::vector<double>& t_grid,
                                      const SpectralOptions& opts) {
    const AdmissibilityReport report = is_admissible(A, B, opts);
    if (!report.admissible) {
        throw std::domain_error("fp_decay_certificate: pair is not admissible");
    }
    const GaussianState eq = equilibrium(A, B, opts);
    const double h0 = gaussian_relative_entropy(initial, eq);
    if (!(h0 > 1e-14) || !std::isfinite(h0)) {
        throw std::invalid_argument(
            "fp_decay_certificate: initial state coincides with equilibrium (or has singular "
            "covariance); the normalized ratio is undefined");
    }

    const auto clusters = eigenvalue_clusters(A, opts);
    double mu = clusters.front().value.real();
    for (const auto& c : clusters) mu = std::min(mu, c.value.real());
    int n1 = 0;
    const double tol = opts.cluster_tol * std::max(A.norm(), 1e-100);
    for (const auto& c : clusters) {
        if (c.value.real() <= mu + tol) n1 = std::max(n1, c.defect);
    }

    DecayCertificate cert;
    cert.rate = 2.0 * mu;
    cert.power = 2 * n1;
    cert.trace.reserve(t_grid.size());
    for (double t : t_grid) {
        DecayTracePoint p;
        p.t = t;
        p.entropy = gaussian_relative_entropy(gaussian_flow(A, B, initial, t), eq);
        p.envelope = poly_factor(t, cert.power) * std::exp(-cert.rate * t);
        p.ratio = p.entropy / (h0 * p.envelope);
        cert.trace.push_back(p);
        cert.c_hat = std::max(cert.c_hat, p.ratio);
    }

    // boundedness heuristic: the fit from the first part of the grid is not
    // exceeded by more than 10% on the tail
    const size_t split = cert.trace.size() / 2;
    double c_early = 0.0;
    double c_late = 0.0;
    for (size_t i = 0; i < cert.trace.size(); ++i) {
        double& bucket = i <= split ? c_early : c_late;
        bucket = std::max(bucket, cert.trace[i].ratio);
    }
    cert.ratio_bounded = c_late <= 1.10 * c_early;
    return cert;
}

}  // namespace mkvlab
