#include "mkvlab/particles.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace mkvlab {

namespace rng {

uint64_t mix(uint64_t key) {
    key = (key ^ (key >> 30)) * 0xBF58476D1CE4E5B9ull;
    key = (key ^ (key >> 27)) * 0x94D049BB133111EBull;
    return key ^ (key >> 31);
}

namespace {

uint64_t tuple_key(uint64_t seed, uint64_t step, uint64_t particle, uint64_t draw) {
    return seed + step * 0x9E3779B97F4A7C15ull + particle * 0xC2B2AE3D27D4EB4Full +
           draw * 0x165667B19E3779F9ull;
}

}  // namespace

double uniform(uint64_t seed, uint64_t step, uint64_t particle, uint64_t draw) {
    const uint64_t bits = mix(tuple_key(seed, step, particle, draw));
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

double inverse_normal_cdf(double p) {
    // Acklam's two-region rational approximation of the probit function.
    static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
    static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double e[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((e[0] * q + e[1]) * q + e[2]) * q + e[3]) * q + 1.0);
    }
    if (p > 1.0 - p_low) {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((e[0] * q + e[1]) * q + e[2]) * q + e[3]) * q + 1.0);
    }
    const double q = p - 0.5;
    const double r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

double normal(uint64_t seed, uint64_t step, uint64_t particle, uint64_t draw) {
    return inverse_normal_cdf(uniform(seed, step, particle, draw));
}

}  // namespace rng

namespace {

constexpr long kChunk = 4096;  // fixed summation block, independent of threads
constexpr uint64_t kInitStep = 0xFFFFFFFFFFFFFFFFull;

int thread_budget() {
    long budget = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MKVLAB_THREADS")) {
        char* end = nullptr;
        const long parsed = std::strtol(env, &end, 10);
        if (end != env && parsed >= 1) budget = parsed;
    }
    return static_cast<int>(std::min<long>(budget, 256));
}

// Persistent workers that execute chunk bodies. Chunks are handed out through
// an atomic counter; every chunk writes only its own column range, so the
// result does not depend on which worker ran which chunk. Workers spin briefly
// before falling back to a condition variable, which keeps the per-step
// hand-off far below a futex round trip when steps arrive back to back.
class ChunkPool {
  public:
    static ChunkPool& instance() {
        static ChunkPool pool;
        return pool;
    }

    void run(long chunks, const std::function<void(long)>& body) {
        const int helpers =
            std::min<long>(std::min(static_cast<long>(workers_.size()), chunks - 1),
                           thread_budget() - 1);
        if (helpers <= 0) {
            for (long c = 0; c < chunks; ++c) body(c);
            return;
        }
        body_ = &body;
        chunks_ = chunks;
        next_.store(0, std::memory_order_relaxed);
        pending_.store(helpers, std::memory_order_relaxed);
        active_.store(helpers, std::memory_order_relaxed);
        generation_.fetch_add(1, std::memory_order_release);
        if (sleepers_.load(std::memory_order_acquire) > 0) {
            std::lock_guard<std::mutex> lock(mutex_);
            start_.notify_all();
        }
        for (long c = next_.fetch_add(1); c < chunks; c = next_.fetch_add(1)) body(c);
        while (pending_.load(std::memory_order_acquire) != 0) {
            cpu_pause();
        }
        body_ = nullptr;
    }

    static void cpu_pause() {
#if defined(__x86_64__) || defined(__i386__)
        __builtin_ia32_pause();
#else
        std::this_thread::yield();
#endif
    }

  private:
    ChunkPool() {
        const unsigned count = std::max(1u, std::thread::hardware_concurrency()) - 1;
        for (unsigned i = 0; i < count; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~ChunkPool() {
        stop_.store(true, std::memory_order_release);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            start_.notify_all();
        }
        for (auto& w : workers_) w.join();
    }

    void worker_loop() {
        uint64_t seen = 0;
        while (true) {
            long spins = 0;
            while (generation_.load(std::memory_order_acquire) == seen &&
                   !stop_.load(std::memory_order_relaxed)) {
                if (++spins > 200000) {
                    sleepers_.fetch_add(1, std::memory_order_acq_rel);
                    std::unique_lock<std::mutex> lock(mutex_);
                    start_.wait(lock, [&] {
                        return stop_.load(std::memory_order_relaxed) ||
                               generation_.load(std::memory_order_acquire) != seen;
                    });
                    sleepers_.fetch_sub(1, std::memory_order_acq_rel);
                    break;
                }
                cpu_pause();
            }
            if (stop_.load(std::memory_order_relaxed)) return;
            if (generation_.load(std::memory_order_acquire) == seen) continue;
            seen = generation_.load(std::memory_order_acquire);
            // claim participation; runs with fewer requested helpers proceed
            // without this worker
            if (active_.fetch_sub(1, std::memory_order_acq_rel) <= 0) {
                active_.fetch_add(1, std::memory_order_acq_rel);
                continue;
            }
            const std::function<void(long)>* body = body_;
            const long chunks = chunks_;
            for (long c = next_.fetch_add(1); c < chunks; c = next_.fetch_add(1)) (*body)(c);
            pending_.fetch_sub(1, std::memory_order_acq_rel);
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable start_;
    const std::function<void(long)>* body_ = nullptr;
    long chunks_ = 0;
    std::atomic<long> next_{0};
    std::atomic<int> pending_{0};
    std::atomic<int> active_{0};
    std::atomic<int> sleepers_{0};
    std::atomic<uint64_t> generation_{0};
    std::atomic<bool> stop_{false};
};

void parallel_chunks(long n, const std::function<void(long)>& body) {
    const long chunks = (n + kChunk - 1) / kChunk;
    ChunkPool::instance().run(chunks, body);
}

// Chunk-ordered column sums keep the reduction bitwise independent of the
// thread count (the update path is chunked the same way).
Vector chunked_mean(const Matrix& X) {
    const long n = X.cols();
    Vector total = Vector::Zero(X.rows());
    for (long lo = 0; lo < n; lo += kChunk) {
        const long len = std::min(kChunk, n - lo);
        total += X.middleCols(lo, len).rowwise().sum();
    }
    return total / static_cast<double>(n);
}

Matrix chunked_second_moment(const Matrix& X) {
    const long n = X.cols();
    Matrix total = Matrix::Zero(X.rows(), X.rows());
    for (long lo = 0; lo < n; lo += kChunk) {
        const long len = std::min(kChunk, n - lo);
        total += X.middleCols(lo, len) * X.middleCols(lo, len).transpose();
    }
    return total / static_cast<double>(n);
}

ParticleEnsemble make_ensemble(long n, int d, uint64_t seed, double dt,
                               const Eigen::Ref<const Matrix>& D) {
    if (n < 2) {
        throw std::invalid_argument("init_ensemble: need at least two particles");
    }
    if (dt <= 0.0 || !std::isfinite(dt)) {
        throw std::invalid_argument("init_ensemble: dt must be positive");
    }
    ParticleEnsemble ens;
    ens.positions.resize(d, n);
    ens.dt = dt;
    ens.seed = seed;
    ens.noise_factor = psd_sqrt(2.0 * D);
    const double err = (ens.noise_factor * ens.noise_factor.transpose() - 2.0 * D).norm();
    if (err > 1e-10 * std::max(1.0, 2.0 * D.norm())) {
        throw std::logic_error("particles: noise factor does not square to 2D");
    }
    return ens;
}

// One explicit step over a column range, hand-rolled for small fixed d: no
// temporaries, no dynamic-product dispatch. Normals are drawn only for noise
// columns that act (draw index = column, so the stream layout is the same as
// in the dense case).
template <int Dim>
void step_chunk(Matrix& positions, long lo, long len, const Matrix& update, const Vector& offset,
                const Matrix& noise, const std::vector<int>& active, uint64_t seed,
                uint64_t step) {
    const Eigen::Matrix<double, Dim, Dim> u = update;
    const Eigen::Matrix<double, Dim, Dim> nf = noise;
    const Eigen::Matrix<double, Dim, 1> off = offset;
    for (long j = 0; j < len; ++j) {
        const long col = lo + j;
        const uint64_t particle = static_cast<uint64_t>(col);
        Eigen::Matrix<double, Dim, 1> x = positions.col(col).template head<Dim>();
        Eigen::Matrix<double, Dim, 1> next = u * x + off;
        for (int k : active) {
            const double z = rng::normal(seed, step, particle, static_cast<uint64_t>(k));
            next += nf.col(k) * z;
        }
        positions.col(col).template head<Dim>() = next;
    }
}

void step_chunk_dynamic(Matrix& positions, long lo, long len, const Matrix& update,
                        const Vector& offset, const Matrix& noise, const std::vector<int>& active,
                        uint64_t seed, uint64_t step) {
    const int d = static_cast<int>(positions.rows());
    Vector x(d), next(d);
    for (long j = 0; j < len; ++j) {
        const long col = lo + j;
        const uint64_t particle = static_cast<uint64_t>(col);
        x = positions.col(col);
        next.noalias() = update * x;
        next += offset;
        for (int k : active) {
            const double z = rng::normal(seed, step, particle, static_cast<uint64_t>(k));
            next += noise.col(k) * z;
        }
        positions.col(col) = next;
    }
}

void step_in_place(ParticleEnsemble& ens, const Matrix& C, const Matrix& K) {
    const int d = ens.dim();
    const long n = ens.size();
    const Vector mean = chunked_mean(ens.positions);
    const Matrix update = Matrix::Identity(d, d) - ens.dt * (C + K);
    const Vector offset = ens.dt * (K * mean);
    const Matrix noise = std::sqrt(ens.dt) * ens.noise_factor;
    const uint64_t step = static_cast<uint64_t>(ens.step_count);

    std::vector<int> active;
    for (int k = 0; k < d; ++k) {
        if (noise.col(k).norm() > 0.0) active.push_back(k);
    }

    Matrix& positions = ens.positions;
    const uint64_t seed = ens.seed;
    parallel_chunks(n, [&](long c) {
        const long lo = c * kChunk;
        const long len = std::min(kChunk, n - lo);
        switch (d) {
            case 1:
                step_chunk<1>(positions, lo, len, update, offset, noise, active, seed, step);
                break;
            case 2:
                step_chunk<2>(positions, lo, len, update, offset, noise, active, seed, step);
                break;
            case 3:
                step_chunk<3>(positions, lo, len, update, offset, noise, active, seed, step);
                break;
            case 4:
                step_chunk<4>(positions, lo, len, update, offset, noise, active, seed, step);
                break;
            default:
                step_chunk_dynamic(positions, lo, len, update, offset, noise, active, seed, step);
                break;
        }
    });
    ++ens.step_count;
}

}  // namespace

ParticleEnsemble init_ensemble(long n, const GaussianState& sampler, uint64_t seed, double dt,
                               const Eigen::Ref<const Matrix>& D) {
    const int d = sampler.dim();
    ParticleEnsemble ens = make_ensemble(n, d, seed, dt, D);
    const Matrix factor = psd_sqrt(sampler.covariance);
    Matrix& positions = ens.positions;
    const Vector mean = sampler.mean;
    parallel_chunks(n, [&](long c) {
        const long lo = c * kChunk;
        const long len = std::min(kChunk, n - lo);
        Vector z(d);
        for (long j = 0; j < len; ++j) {
            const uint64_t particle = static_cast<uint64_t>(lo + j);
            for (int k = 0; k < d; ++k) {
                z(k) = rng::normal(seed, kInitStep, particle, static_cast<uint64_t>(k));
            }
            positions.col(lo + j) = factor * z + mean;
        }
    });
    return ens;
}

ParticleEnsemble init_ensemble(long n, const GridDensity& sampler, uint64_t seed, double dt,
                               const Eigen::Ref<const Matrix>& D) {
    const int d = sampler.grid.dim();
    ParticleEnsemble ens = make_ensemble(n, d, seed, dt, D);

    const long nodes = sampler.grid.node_count();
    std::vector<double> cumulative(static_cast<size_t>(nodes));
    double total = 0.0;
    for (long j = 0; j < nodes; ++j) {
        total += sampler.grid.weight(j) * sampler.values(j);
        cumulative[static_cast<size_t>(j)] = total;
    }
    if (!(total > 0.0)) {
        throw std::invalid_argument("init_ensemble: grid density has no mass to sample");
    }
    for (long i = 0; i < n; ++i) {
        const double u = total * rng::uniform(seed, kInitStep, static_cast<uint64_t>(i), 0);
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        const long idx = std::min<long>(nodes - 1, it - cumulative.begin());
        ens.positions.col(i) = sampler.grid.node(idx);
    }
    return ens;
}

void em_step(ParticleEnsemble& ens, const Eigen::Ref<const Matrix>& C,
             const Eigen::Ref<const Matrix>& K) {
    if (ens.dt * spectral_norm(C + K) > 0.1) {
        std::cerr << "mkvlab: warning: dt = " << ens.dt
                  << " exceeds the stability budget 0.1/||C+K||\n";
    }
    step_in_place(ens, C, K);
    if (!ens.positions.allFinite()) {
        throw std::runtime_error("em_step: particle positions blew up (non-finite values) at step " +
                                 std::to_string(ens.step_count));
    }
}

Vector ensemble_mean(const ParticleEnsemble& ens) { return chunked_mean(ens.positions); }

Matrix ensemble_covariance(const ParticleEnsemble& ens) {
    const Vector mean = chunked_mean(ens.positions);
    const Matrix second = chunked_second_moment(ens.positions);
    Matrix cov = second - mean * mean.transpose();
    return 0.5 * (cov + cov.transpose());
}

namespace {

template <typename Sampler>
std::vector<ParticleSnapshot> simulate_impl(const ModelTriple& model, const Sampler& sampler,
                                            long n, double t_end, double dt, uint64_t seed,
                                            const std::vector<double>& snapshot_times) {
    if (t_end < 0.0 || dt <= 0.0) {
        throw std::invalid_argument("simulate: need t_end >= 0 and dt > 0");
    }
    const Matrix K_eff = model.effective_interaction();
    if (dt * spectral_norm(model.C + K_eff) > 0.1) {
        std::cerr << "mkvlab: warning: dt = " << dt
                  << " exceeds the stability budget 0.1/||C + m0 K||\n";
    }

    const long total_steps = static_cast<long>(std::llround(t_end / dt));
    std::vector<long> snapshot_steps;
    snapshot_steps.reserve(snapshot_times.size());
    for (double t : snapshot_times) {
        const long s = std::clamp<long>(static_cast<long>(std::llround(t / dt)), 0, total_steps);
        snapshot_steps.push_back(s);
    }
    std::sort(snapshot_steps.begin(), snapshot_steps.end());
    snapshot_steps.erase(std::unique(snapshot_steps.begin(), snapshot_steps.end()),
                         snapshot_steps.end());

    ParticleEnsemble ens = init_ensemble(n, sampler, seed, dt, model.D);
    std::vector<ParticleSnapshot> out;
    out.reserve(snapshot_steps.size());
    size_t next = 0;
    for (long step = 0; step <= total_steps; ++step) {
        if (next < snapshot_steps.size() && snapshot_steps[next] == step) {
            const double t_snap = static_cast<double>(step) * dt;
            if (!ens.positions.allFinite()) {
                throw std::runtime_error("simulate: particle positions blew up before t = " +
                                         std::to_string(t_snap));
            }
            ParticleSnapshot snap;
            snap.t = t_snap;
            snap.mean = ensemble_mean(ens);
            snap.covariance = ensemble_covariance(ens);
            out.push_back(std::move(snap));
            ++next;
        }
        if (step < total_steps) step_in_place(ens, model.C, K_eff);
    }
    return out;
}

}  // namespace

std::vector<ParticleSnapshot> simulate(const ModelTriple& model, const GaussianState& sampler,
                                       long n, double t_end, double dt, uint64_t seed,
                                       const std::vector<double>& snapshot_times) {
    return simulate_impl(model, sampler, n, t_end, dt, seed, snapshot_times);
}

std::vector<ParticleSnapshot> simulate(const ModelTriple& model, const GridDensity& sampler,
                                       long n, double t_end, double dt, uint64_t seed,
                                       const std::vector<double>& snapshot_times) {
    return simulate_impl(model, sampler, n, t_end, dt, seed, snapshot_times);
}

double gaussian_fit_entropy(const ParticleEnsemble& ens, const GaussianState& reference) {
    const int d = ens.dim();
    if (ens.size() < 10L * d * d) {
        throw std::invalid_argument("gaussian_fit_entropy: need at least 10 d^2 particles");
    }
    ParticleSnapshot snap;
    snap.mean = ensemble_mean(ens);
    snap.covariance = ensemble_covariance(ens);
    return gaussian_fit_entropy(snap, reference);
}

double gaussian_fit_entropy(const ParticleSnapshot& snapshot, const GaussianState& reference) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(snapshot.covariance, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 0.0) {
        throw std::domain_error(
            "gaussian_fit_entropy: fitted covariance is singular; increase the ensemble size");
    }
    return gaussian_relative_entropy(GaussianState{snapshot.mean, snapshot.covariance}, reference);
}

void write_checkpoint(const std::string& path, const ParticleEnsemble& ens) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("write_checkpoint: cannot open " + path);
    out << ens.size() << ' ' << ens.dim() << ' ' << ens.step_count << ' ' << ens.seed << '\n';
    out.write(reinterpret_cast<const char*>(ens.positions.data()),
              static_cast<std::streamsize>(sizeof(double)) * ens.positions.size());
    if (!out) throw std::runtime_error("write_checkpoint: short write to " + path);
}

ParticleEnsemble read_checkpoint(const std::string& path, const Eigen::Ref<const Matrix>& D,
                                 double dt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("read_checkpoint: cannot open " + path);
    long n = 0;
    int d = 0;
    long step = 0;
    uint64_t seed = 0;
    if (!(in >> n >> d >> step >> seed) || n < 2 || d < 1) {
        throw std::invalid_argument("read_checkpoint: malformed header in " + path);
    }
    in.ignore(1);  // newline after the header
    ParticleEnsemble ens = make_ensemble(n, d, seed, dt, D);
    ens.step_count = step;
    in.read(reinterpret_cast<char*>(ens.positions.data()),
            static_cast<std::streamsize>(sizeof(double)) * ens.positions.size());
    if (in.gcount() != static_cast<std::streamsize>(sizeof(double)) * ens.positions.size()) {
        throw std::invalid_argument("read_checkpoint: truncated positions in " + path);
    }
    if (!ens.positions.allFinite()) {
        throw std::invalid_argument("read_checkpoint: non-finite positions in " + path);
    }
    return ens;
}

}  // namespace mkvlab
