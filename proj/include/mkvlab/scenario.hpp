#pragma once

#include "mkvlab/fokker_planck.hpp"
#include "mkvlab/matrix_core.hpp"
#include "mkvlab/mckean_vlasov.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mkvlab {

/// Shortest decimal representation that round-trips binary64.
std::string format_double(double x);

struct TimeGridSpec {
    double t_end = 20.0;
    int samples = 200;
    bool geometric = false;

    bool operator==(const TimeGridSpec&) const = default;
};

struct ParticleRunOptions {
    long count = 10000;
    double dt = 1e-3;
    uint64_t seed = 0;

    bool operator==(const ParticleRunOptions&) const = default;
};

/// One experiment description: matrices, initial datum (inline Gaussian or a
/// grid-density file), mass, time grid, particle options and tolerances.
struct Scenario {
    std::string name = "scenario";
    Matrix C;
    Matrix K;
    Matrix D;
    std::optional<GaussianState> gaussian_initial;
    std::optional<std::string> grid_initial_path;
    double mass = 1.0;
    TimeGridSpec time;
    ParticleRunOptions particles;
    SpectralOptions tolerances;
    std::string output_dir = ".";

    /// Directory the scenario file lives in; grid paths resolve against it.
    /// Not part of the document.
    std::string base_dir;

    int dim() const { return static_cast<int>(C.rows()); }
};

bool operator==(const Scenario& a, const Scenario& b);

/// Parses and validates a scenario document (JSON). Field errors name the
/// offending key; syntax errors carry the byte position.
Scenario parse_scenario(const std::string& path);
Scenario parse_scenario_text(const std::string& text, const std::string& origin = "<inline>");

std::string serialize_scenario(const Scenario& s);

/// Evaluation times from the grid spec (geometric grids start at t_end/1000).
std::vector<double> time_grid(const TimeGridSpec& spec);

/// Builds the model triple (m1 from the declared initial datum).
ModelTriple scenario_model(const Scenario& s);

GridDensity load_grid_initial(const Scenario& s);

struct RunOptions {
    std::string output_dir_override;
    std::optional<double> rank_tol;
    std::optional<double> cluster_tol;
    bool quiet = false;
};

/// Experiment drivers. Each returns a process exit status: 0 when every
/// module-level assertion in the run held, nonzero otherwise. Trace files are
/// written atomically (no partial output survives a failure).
int run_check(const Scenario& s, const RunOptions& opts, std::ostream& out);
int run_flow(const Scenario& s, const RunOptions& opts, std::ostream& out);
int run_bound(const Scenario& s, const RunOptions& opts, std::ostream& out);
int run_particles(const Scenario& s, const RunOptions& opts, std::ostream& out);

}  // namespace mkvlab
