#pragma once

#include "mkvlab/fokker_planck.hpp"
#include "mkvlab/matrix_core.hpp"
#include "mkvlab/mckean_vlasov.hpp"

#include <cstdint>
#include <vector>

namespace mkvlab {

/// Counter-based random numbers: every (seed, step, particle, draw) tuple maps
/// to one variate through a splitmix64 finalizer, so draws are independent of
/// evaluation order and of how particles are split across threads. Rerunning
/// with the same seed reproduces trajectories bit for bit.
namespace rng {

uint64_t mix(uint64_t key);

/// Uniform in the open interval (0, 1).
double uniform(uint64_t seed, uint64_t step, uint64_t particle, uint64_t draw);

/// Standard normal via the inverse CDF of one uniform.
double normal(uint64_t seed, uint64_t step, uint64_t particle, uint64_t draw);

/// Rational approximation of the standard normal quantile (relative error
/// below 1.2e-9 everywhere).
double inverse_normal_cdf(double p);

}  // namespace rng

/// N particles as columns of a d x N matrix, plus the step metadata that keys
/// the noise stream.
struct ParticleEnsemble {
    Matrix positions;
    long step_count = 0;
    double dt = 0.0;
    uint64_t seed = 0;
    Matrix noise_factor;  // sqrt(2 D); noise_factor * noise_factor^T = 2 D

    int dim() const { return static_cast<int>(positions.rows()); }
    long size() const { return positions.cols(); }
};

/// i.i.d. draws from the initial law. Gaussian sampling goes through the
/// symmetric covariance factor; grid sampling through the inverse CDF of the
/// flattened node weights. Deterministic given the seed.
ParticleEnsemble init_ensemble(long n, const GaussianState& sampler, uint64_t seed, double dt,
                               const Eigen::Ref<const Matrix>& D);
ParticleEnsemble init_ensemble(long n, const GridDensity& sampler, uint64_t seed, double dt,
                               const Eigen::Ref<const Matrix>& D);

/// One explicit Euler step with additive noise:
///   X_i <- X_i - [C X_i + K (X_i - mean)] dt + noise_factor sqrt(dt) xi_i.
/// The pairwise interaction sum (1/N) sum_j K (X_i - X_j) reduces exactly to
/// K (X_i - mean) for a linear kernel, which is what makes the step O(N).
/// Prints a stability warning when dt > 0.1 / ||C + K||; throws on blow-up.
void em_step(ParticleEnsemble& ens, const Eigen::Ref<const Matrix>& C,
             const Eigen::Ref<const Matrix>& K);

/// Mean and covariance (1/N normalization) with a fixed chunked summation
/// order, so parallel and serial runs agree bitwise.
Vector ensemble_mean(const ParticleEnsemble& ens);
Matrix ensemble_covariance(const ParticleEnsemble& ens);

struct ParticleSnapshot {
    double t = 0.0;
    Vector mean;
    Matrix covariance;
};

/// Runs the particle system for the model (interaction m0 K) and records
/// empirical moments at the requested times, rounded to step boundaries.
/// Honors MKVLAB_THREADS for the per-chunk update; results do not depend on
/// the thread count.
std::vector<ParticleSnapshot> simulate(const ModelTriple& model, const GaussianState& sampler,
                                       long n, double t_end, double dt, uint64_t seed,
                                       const std::vector<double>& snapshot_times);
std::vector<ParticleSnapshot> simulate(const ModelTriple& model, const GridDensity& sampler,
                                       long n, double t_end, double dt, uint64_t seed,
                                       const std::vector<double>& snapshot_times);

/// Entropy proxy: fit a Gaussian to the ensemble (or snapshot moments) and
/// take its relative entropy against the reference. Consistent when the true
/// law is Gaussian; requires n >= 10 d^2.
double gaussian_fit_entropy(const ParticleEnsemble& ens, const GaussianState& reference);
double gaussian_fit_entropy(const ParticleSnapshot& snapshot, const GaussianState& reference);

/// Checkpoint format: one text header line "N d step seed", then the raw
/// little-endian binary64 positions, particle by particle. The noise factor
/// is not stored; pass the model diffusion when loading.
void write_checkpoint(const std::string& path, const ParticleEnsemble& ens);
ParticleEnsemble read_checkpoint(const std::string& path, const Eigen::Ref<const Matrix>& D,
                                 double dt);

}  // namespace mkvlab
