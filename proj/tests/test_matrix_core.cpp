#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mkvlab/matrix_core.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace mkvlab;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("expm of the zero matrix is the identity") {
    const Matrix Z = Matrix::Zero(3, 3);
    CHECK((expm(Z, 5.0) - Matrix::Identity(3, 3)).norm() == doctest::Approx(0.0));
}

TEST_CASE("expm of a diagonal matrix exponentiates the diagonal") {
    Matrix A = Matrix::Zero(2, 2);
    A.diagonal() << 1.0, 2.0;
    const Matrix E = expm(A, 1.0);
    CHECK(E(0, 0) == doctest::Approx(std::exp(1.0)).epsilon(1e-14));
    CHECK(E(1, 1) == doctest::Approx(std::exp(2.0)).epsilon(1e-14));
    CHECK(std::abs(E(0, 1)) + std::abs(E(1, 0)) < 1e-15);
}

TEST_CASE("expm matches the Taylor oracle and the semigroup identity") {
    std::mt19937_64 gen(11);
    const MatrixXd A = oracle::random_matrix(4, gen);
    CHECK((expm(A, 1.0) - oracle::expm_taylor(A)).norm() < 1e-12);
    CHECK((expm(A, 1.0) * expm(A, 1.0) - expm(A, 2.0)).norm() < 1e-10);
}

TEST_CASE("expm semigroup property on random matrices up to d = 6") {
    std::mt19937_64 gen(17);
    for (int d = 2; d <= 6; ++d) {
        const MatrixXd A = oracle::random_matrix(d, gen);
        for (double s : {0.1, 1.0, 3.0}) {
            for (double t : {0.1, 1.0, 3.0}) {
                CHECK((expm(A, s + t) - expm(A, s) * expm(A, t)).norm() < 1e-9);
            }
        }
    }
}

TEST_CASE("expm rejects non-finite input") {
    Matrix A = Matrix::Zero(2, 2);
    A(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(expm(A, 1.0), std::invalid_argument);
}

TEST_CASE("psd_sqrt on identity and a singular diagonal") {
    CHECK((psd_sqrt(Matrix::Identity(3, 3)) - Matrix::Identity(3, 3)).norm() < 1e-14);
    Matrix B = Matrix::Zero(2, 2);
    B(0, 0) = 4.0;
    const Matrix S = psd_sqrt(B);
    CHECK(S(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(std::abs(S(1, 1)) < 1e-14);
}

TEST_CASE("psd_sqrt reconstructs random Gram matrices") {
    std::mt19937_64 gen(23);
    for (int trial = 0; trial < 20; ++trial) {
        const MatrixXd M = oracle::random_matrix(4, gen);
        const MatrixXd B = M.transpose() * M;
        const Matrix S = psd_sqrt(B);
        CHECK((S * S - B).norm() < 1e-10);
        CHECK((S - S.transpose()).norm() < 1e-12);
    }
}

TEST_CASE("psd_sqrt rejects asymmetric and indefinite input") {
    Matrix A(2, 2);
    A << 1.0, 1.0, 0.0, 1.0;
    CHECK_THROWS_AS(psd_sqrt(A), std::domain_error);
    Matrix B(2, 2);
    B << 1.0, 0.0, 0.0, -2.0;
    CHECK_THROWS_WITH_AS(psd_sqrt(B), doctest::Contains("-2"), std::domain_error);
}

TEST_CASE("kernel_basis on injective and singular matrices") {
    CHECK(kernel_basis(Matrix::Identity(3, 3), 1e-12).empty());

    Matrix A = Matrix::Zero(2, 2);
    A(1, 1) = 1.0;
    const auto basis = kernel_basis(A, 1e-12);
    REQUIRE(basis.size() == 1);
    CHECK(std::abs(std::abs(basis[0](0)) - 1.0) < 1e-14);
    CHECK(std::abs(basis[0](1)) < 1e-14);
}

TEST_CASE("kernel_basis of a rank-1 outer product has two orthonormal vectors") {
    VectorXd u(3), v(3);
    u << 1.0, -2.0, 0.5;
    v << 0.3, 1.0, -1.2;
    const Matrix A = u * v.transpose();  // exact rank 1, kernel = v-orthogonal plane
    const auto basis = kernel_basis(A, 1e-12);
    REQUIRE(basis.size() == 2);
    for (const auto& w : basis) {
        CHECK(std::abs(w.dot(v)) < 1e-12 * v.norm());
        CHECK(w.norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(std::abs(basis[0].dot(basis[1])) < 1e-12);
}

TEST_CASE("solve_lyapunov on decoupled diagonal data") {
    CHECK((solve_lyapunov(Matrix::Identity(2, 2), Matrix::Identity(2, 2)) -
           Matrix::Identity(2, 2))
              .norm() < 1e-13);
    Matrix A = Matrix::Zero(2, 2);
    A.diagonal() << 1.0, 2.0;
    const Matrix X = solve_lyapunov(A, Matrix::Identity(2, 2));
    CHECK(X(0, 0) == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(X(1, 1) == doctest::Approx(0.5).epsilon(1e-13));
}

TEST_CASE("solve_lyapunov residual and symmetry on random stable instances") {
    std::mt19937_64 gen(31);
    for (int trial = 0; trial < 25; ++trial) {
        const int d = 2 + static_cast<int>(gen() % 5);
        const MatrixXd A = oracle::random_stable(d, gen);
        const MatrixXd D = oracle::random_psd(d, d, gen);
        const Matrix X = solve_lyapunov(A, D);
        CHECK((2.0 * D - A * X - X * A.transpose()).norm() < 1e-9 * std::max(1.0, D.norm()));
        CHECK((X - X.transpose()).norm() < 1e-12 * std::max(1.0, X.norm()));
    }
}

TEST_CASE("solve_lyapunov reports vanishing eigenvalue sums") {
    Matrix A = Matrix::Zero(2, 2);
    A.diagonal() << 1.0, -1.0;  // 1 + (-1) = 0: singular operator
    CHECK_THROWS_AS(solve_lyapunov(A, Matrix::Identity(2, 2)), std::domain_error);
}

TEST_CASE("admissibility of the kinetic pair with degenerate diffusion") {
    Matrix A(2, 2), B(2, 2);
    A << 0.0, -1.0, 1.0, 1.0;
    B << 0.0, 0.0, 0.0, 1.0;
    const auto report = is_admissible(A, B);
    CHECK(report.admissible);
    CHECK(report.diffusion_rank == 1);
    CHECK(report.controllability_rank == 2);
}

TEST_CASE("admissibility fails when the kernel is invariant") {
    Matrix B = Matrix::Zero(2, 2);
    B(0, 0) = 1.0;  // ker(B) = span{e2}, invariant under any diagonal drift
    const auto report = is_admissible(Matrix::Identity(2, 2), B);
    CHECK_FALSE(report.admissible);
    CHECK(report.diffusion_psd_rank_ok);
    CHECK(report.drift_positively_stable);
    CHECK_FALSE(report.no_invariant_kernel_subspace);
    CHECK(report.controllability_rank == 1);
}

TEST_CASE("full-rank diffusion is admissible for any stable drift") {
    std::mt19937_64 gen(37);
    for (int trial = 0; trial < 10; ++trial) {
        const int d = 2 + static_cast<int>(gen() % 4);
        const auto report = is_admissible(oracle::random_stable(d, gen), MatrixXd::Identity(d, d));
        CHECK(report.admissible);
    }
}

TEST_CASE("admissibility rejects mismatched dimensions") {
    CHECK_THROWS_AS(is_admissible(Matrix::Identity(2, 2), Matrix::Identity(3, 3)),
                    std::invalid_argument);
}

TEST_CASE("controllability verdict matches brute-force invariant-subspace search") {
    // all 2x2 integer drifts with entries in {-1,0,1} that are positively
    // stable (trace > 0 and det > 0), against the three test diffusions
    Eigen::Matrix2i candidates[3];
    candidates[0] << 1, 0, 0, 0;
    candidates[1] << 0, 0, 0, 1;
    candidates[2] << 1, 0, 0, 1;
    int checked = 0;
    for (int a = -1; a <= 1; ++a) {
        for (int b = -1; b <= 1; ++b) {
            for (int c = -1; c <= 1; ++c) {
                for (int d = -1; d <= 1; ++d) {
                    Eigen::Matrix2i Ai;
                    Ai << a, b, c, d;
                    if (a + d <= 0 || a * d - b * c <= 0) continue;  // not positively stable
                    for (const auto& Bi : candidates) {
                        const auto report = is_admissible(Ai.cast<double>(), Bi.cast<double>());
                        const bool brute = oracle::has_invariant_kernel_subspace_2x2(Ai, Bi);
                        CHECK(report.no_invariant_kernel_subspace == !brute);
                        CHECK(report.drift_positively_stable);
                        ++checked;
                    }
                }
            }
        }
    }
    CHECK(checked > 0);
}

TEST_CASE("almost-positive stability verdicts") {
    CHECK(is_almost_positively_stable(Matrix::Zero(3, 3)).holds);

    Matrix nilpotent = Matrix::Zero(2, 2);
    nilpotent(0, 1) = 1.0;
    const auto verdict = is_almost_positively_stable(nilpotent);
    CHECK_FALSE(verdict.holds);
    CHECK(verdict.reason.find("defective") != std::string::npos);

    Matrix C = Matrix::Zero(3, 3);
    C.diagonal() << 0.0, 2.0, 3.0;
    CHECK(is_almost_positively_stable(C).holds);

    Matrix negative = Matrix::Identity(2, 2);
    negative(1, 1) = -0.5;
    CHECK_FALSE(is_almost_positively_stable(negative).holds);
}

TEST_CASE("spectral summary of a defective interaction") {
    Matrix K(2, 2);
    K << 1.0, 1.0, 0.0, 1.0;
    const auto s = spectral_summary(Matrix::Zero(2, 2), K);
    CHECK(s.mu == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s.n1 == 1);
    CHECK(s.nu == 0.0);  // zero drift
    CHECK(s.n2 == 0);
    CHECK((s.ker_projection - Matrix::Identity(2, 2)).norm() < 1e-12);
    CHECK(s.ker_dimension == 2);
}

TEST_CASE("spectral summary of a partially degenerate drift") {
    Matrix C = Matrix::Zero(3, 3);
    C.diagonal() << 0.0, 2.0, 3.0;
    const auto s = spectral_summary(C, Matrix::Identity(3, 3));
    CHECK(s.mu == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s.nu == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(s.n1 == 0);
    CHECK(s.n2 == 0);
    CHECK(s.ker_dimension == 1);
    Matrix P = Matrix::Zero(3, 3);
    P(0, 0) = 1.0;
    CHECK((s.ker_projection - P).norm() < 1e-10);
}

TEST_CASE("spectral summary rejects violated hypotheses") {
    Matrix nilpotent = Matrix::Zero(2, 2);
    nilpotent(0, 1) = 1.0;
    CHECK_THROWS_WITH_AS(spectral_summary(nilpotent, Matrix::Identity(2, 2)),
                         doctest::Contains("almost-positively stable"), std::domain_error);
    CHECK_THROWS_WITH_AS(spectral_summary(Matrix::Zero(2, 2), Matrix::Zero(2, 2)),
                         doctest::Contains("positively stable"), std::domain_error);
}

TEST_CASE("spectral summary recovers prescribed Jordan data") {
    // C similar to diag(0, 0, [2 1; 0 2]); K = I shifts the spectrum by one
    std::mt19937_64 gen(41);
    Matrix J = Matrix::Zero(4, 4);
    J(2, 2) = 2.0;
    J(2, 3) = 1.0;
    J(3, 3) = 2.0;
    const MatrixXd S = oracle::random_similarity(4, gen);
    const Matrix C = S * J * S.inverse();
    const auto summary = spectral_summary(C, Matrix::Identity(4, 4));
    CHECK(summary.mu == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(summary.n1 == 0);  // eigenvalue 1 comes from the diagonalizable kernel
    CHECK(summary.nu == doctest::Approx(2.0).epsilon(1e-7));
    CHECK(summary.n2 == 1);
    CHECK(summary.ker_dimension == 2);
}

TEST_CASE("eigenvalue clusters detect defects under well-conditioned similarity") {
    std::mt19937_64 gen(43);
    Matrix J = Matrix::Zero(4, 4);
    // blocks: lambda = 1 of sizes 2 and 1, lambda = 3 of size 1
    J(0, 0) = 1.0;
    J(0, 1) = 1.0;
    J(1, 1) = 1.0;
    J(2, 2) = 1.0;
    J(3, 3) = 3.0;
    const MatrixXd S = oracle::random_similarity(4, gen);
    const Matrix A = S * J * S.inverse();
    const auto clusters = eigenvalue_clusters(A);
    REQUIRE(clusters.size() == 2);
    CHECK(clusters[0].value.real() == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(clusters[0].algebraic == 3);
    CHECK(clusters[0].geometric == 2);
    CHECK(clusters[0].defect == 1);
    CHECK(clusters[1].value.real() == doctest::Approx(3.0).epsilon(1e-7));
    CHECK(clusters[1].defect == 0);
}

TEST_CASE("kernel projection properties") {
    std::mt19937_64 gen(47);
    Matrix J = Matrix::Zero(4, 4);
    J(1, 1) = 1.5;
    J(2, 2) = 2.0;
    J(2, 3) = 1.0;
    J(3, 3) = 2.0;
    const MatrixXd S = oracle::random_similarity(4, gen);
    const Matrix C = S * J * S.inverse();

    const Matrix P = kernel_projection(C);
    CHECK((P * P - P).norm() < 1e-10);
    CHECK((C * P).norm() < 1e-9 * C.norm());  // range of P is the kernel
    for (const auto& v : kernel_basis(C, 1e-9)) {
        CHECK((P * v - v).norm() < 1e-9);
    }
    CHECK(numerical_rank(P) + numerical_rank(Matrix::Identity(4, 4) - P) == 4);
    // range of I - P is the range of C
    const Matrix U = range_basis(C, 1e-9);
    const Matrix complement = Matrix::Identity(4, 4) - P;
    CHECK(((Matrix::Identity(4, 4) - U * U.transpose()) * complement).norm() < 1e-9);
}

TEST_CASE("semigroup bound on normal and defective matrices") {
    const auto id_bound = matrix_semigroup_bound(Matrix::Identity(2, 2));
    CHECK(id_bound.rate == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(id_bound.power == 0);
    CHECK(id_bound.constant == doctest::Approx(1.0).epsilon(1e-6));

    Matrix diag = Matrix::Zero(2, 2);
    diag.diagonal() << 2.0, 3.0;
    const auto diag_bound = matrix_semigroup_bound(diag);
    CHECK(diag_bound.rate == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(diag_bound.power == 0);
    CHECK(diag_bound.constant == doctest::Approx(1.0).epsilon(1e-6));

    Matrix jordan(2, 2);
    jordan << 1.0, 1.0, 0.0, 1.0;
    const auto bound = matrix_semigroup_bound(jordan);
    CHECK(bound.rate == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(bound.power == 1);
    for (int i = 0; i <= 100; ++i) {
        const double t = 50.0 * i / 100.0;
        const double lhs = spectral_norm(expm(jordan, -t));
        CHECK(lhs <= bound.constant * poly_factor(t, bound.power) * std::exp(-bound.rate * t) *
                         (1.0 + 1e-12));
    }
}

TEST_CASE("semigroup bound requires positive stability") {
    Matrix A = Matrix::Zero(2, 2);
    A.diagonal() << 1.0, 0.0;
    CHECK_THROWS_AS(matrix_semigroup_bound(A), std::domain_error);
}
