#include "mkvlab/scenario.hpp"

#include "mkvlab/particles.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mkvlab {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_double(double x) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

namespace {

[[noreturn]] void field_error(const std::string& field, const std::string& what) {
    throw std::invalid_argument("scenario field '" + field + "': " + what);
}

const json& require_field(const json& j, const std::string& key, const std::string& context) {
    const auto it = j.find(key);
    if (it == j.end()) field_error(context.empty() ? key : context + "." + key, "missing");
    return *it;
}

double number_field(const json& j, const std::string& field) {
    if (!j.is_number()) field_error(field, "expected a number");
    return j.get<double>();
}

Matrix parse_matrix(const json& j, const std::string& field) {
    if (!j.is_object()) field_error(field, "expected an object {dim, data}");
    const int dim = static_cast<int>(number_field(require_field(j, "dim", field), field + ".dim"));
    if (dim < 1) field_error(field + ".dim", "must be a positive integer");
    const json& data = require_field(j, "data", field);
    if (!data.is_array() || static_cast<int>(data.size()) != dim * dim) {
        field_error(field + ".data", "expected a row-major array of " + std::to_string(dim) +
                                         "*" + std::to_string(dim) + " numbers");
    }
    Matrix m(dim, dim);
    for (int r = 0; r < dim; ++r) {
        for (int c = 0; c < dim; ++c) {
            m(r, c) = number_field(data[static_cast<size_t>(r * dim + c)],
                                   field + ".data[" + std::to_string(r * dim + c) + "]");
        }
    }
    return m;
}

Vector parse_vector(const json& j, const std::string& field, int dim) {
    if (!j.is_array() || static_cast<int>(j.size()) != dim) {
        field_error(field, "expected an array of " + std::to_string(dim) + " numbers");
    }
    Vector v(dim);
    for (int i = 0; i < dim; ++i) {
        v(i) = number_field(j[static_cast<size_t>(i)], field + "[" + std::to_string(i) + "]");
    }
    return v;
}

json matrix_to_json(const Matrix& m) {
    json j;
    j["dim"] = m.rows();
    json data = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    }
    j["data"] = data;
    return j;
}

Scenario parse_document(const json& doc, const std::string& origin) {
    Scenario s;
    if (doc.contains("name")) {
        if (!doc["name"].is_string()) field_error("name", "expected a string");
        s.name = doc["name"].get<std::string>();
    }
    s.C = parse_matrix(require_field(doc, "C", ""), "C");
    s.K = parse_matrix(require_field(doc, "K", ""), "K");
    s.D = parse_matrix(require_field(doc, "D", ""), "D");
    const int d = s.dim();
    for (const auto& [field, m] : {std::pair<const char*, const Matrix*>{"K", &s.K}, {"D", &s.D}}) {
        if (m->rows() != d) {
            throw std::invalid_argument("scenario dimension mismatch: C is " + std::to_string(d) +
                                        "x" + std::to_string(d) + " but " + field + " is " +
                                        std::to_string(m->rows()) + "x" +
                                        std::to_string(m->rows()));
        }
    }

    const json& initial = require_field(doc, "initial", "");
    const std::string type =
        require_field(initial, "type", "initial").get<std::string>();
    if (type == "gaussian") {
        GaussianState g;
        g.mean = parse_vector(require_field(initial, "mean", "initial"), "initial.mean", d);
        g.covariance =
            parse_matrix(require_field(initial, "covariance", "initial"), "initial.covariance");
        if (g.covariance.rows() != d) {
            throw std::invalid_argument(
                "scenario dimension mismatch: C is " + std::to_string(d) + "x" +
                std::to_string(d) + " but initial.covariance is " +
                std::to_string(g.covariance.rows()) + "x" + std::to_string(g.covariance.rows()));
        }
        if ((g.covariance - g.covariance.transpose()).norm() >
            1e-12 * std::max(1.0, g.covariance.norm())) {
            field_error("initial.covariance", "must be symmetric");
        }
        s.gaussian_initial = std::move(g);
    } else if (type == "grid") {
        s.grid_initial_path = require_field(initial, "path", "initial").get<std::string>();
    } else {
        field_error("initial.type", "must be \"gaussian\" or \"grid\"");
    }

    if (doc.contains("mass")) {
        s.mass = number_field(doc["mass"], "mass");
        if (s.mass <= 0.0) field_error("mass", "must be positive");
    }
    if (doc.contains("time")) {
        const json& time = doc["time"];
        if (time.contains("t_end")) s.time.t_end = number_field(time["t_end"], "time.t_end");
        if (time.contains("samples")) {
            s.time.samples = static_cast<int>(number_field(time["samples"], "time.samples"));
        }
        if (time.contains("spacing")) {
            const std::string spacing = time["spacing"].get<std::string>();
            if (spacing == "geometric") {
                s.time.geometric = true;
            } else if (spacing != "linear") {
                field_error("time.spacing", "must be \"linear\" or \"geometric\"");
            }
        }
        if (s.time.t_end <= 0.0) field_error("time.t_end", "must be positive");
        if (s.time.samples < 2) field_error("time.samples", "need at least 2 samples");
    }
    if (doc.contains("particles")) {
        const json& p = doc["particles"];
        if (p.contains("n")) s.particles.count = static_cast<long>(number_field(p["n"], "particles.n"));
        if (p.contains("dt")) s.particles.dt = number_field(p["dt"], "particles.dt");
        if (p.contains("seed")) {
            if (!p["seed"].is_number_unsigned() && !p["seed"].is_number_integer()) {
                field_error("particles.seed", "expected an integer");
            }
            s.particles.seed = p["seed"].get<uint64_t>();
        }
        if (s.particles.count < 2) field_error("particles.n", "need at least 2 particles");
        if (s.particles.dt <= 0.0) field_error("particles.dt", "must be positive");
    }
    if (doc.contains("tolerances")) {
        const json& tol = doc["tolerances"];
        if (tol.contains("rank")) s.tolerances.rank_tol = number_field(tol["rank"], "tolerances.rank");
        if (tol.contains("cluster")) {
            s.tolerances.cluster_tol = number_field(tol["cluster"], "tolerances.cluster");
        }
        if (s.tolerances.rank_tol <= 0.0) field_error("tolerances.rank", "must be positive");
        if (s.tolerances.cluster_tol <= 0.0) field_error("tolerances.cluster", "must be positive");
    }
    if (doc.contains("output")) s.output_dir = doc["output"].get<std::string>();

    (void)origin;
    return s;
}

}  // namespace

bool operator==(const Scenario& a, const Scenario& b) {
    const auto gaussian_equal = [](const std::optional<GaussianState>& x,
                                   const std::optional<GaussianState>& y) {
        if (x.has_value() != y.has_value()) return false;
        if (!x) return true;
        return x->mean == y->mean && x->covariance == y->covariance;
    };
    return a.name == b.name && a.C == b.C && a.K == b.K && a.D == b.D &&
           gaussian_equal(a.gaussian_initial, b.gaussian_initial) &&
           a.grid_initial_path == b.grid_initial_path && a.mass == b.mass && a.time == b.time &&
           a.particles == b.particles && a.tolerances.rank_tol == b.tolerances.rank_tol &&
           a.tolerances.cluster_tol == b.tolerances.cluster_tol && a.output_dir == b.output_dir;
}

Scenario parse_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("parse_scenario: cannot open " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    Scenario s = parse_scenario_text(buffer.str(), path);
    s.base_dir = fs::path(path).parent_path().string();
    return s;
}

Scenario parse_scenario_text(const std::string& text, const std::string& origin) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& err) {
        throw std::invalid_argument("parse_scenario: " + origin + ": " + err.what());
    }
    try {
        return parse_document(doc, origin);
    } catch (const json::exception& err) {
        throw std::invalid_argument("parse_scenario: " + origin + ": " + err.what());
    }
}

std::string serialize_scenario(const Scenario& s) {
    json doc;
    doc["name"] = s.name;
    doc["C"] = matrix_to_json(s.C);
    doc["K"] = matrix_to_json(s.K);
    doc["D"] = matrix_to_json(s.D);
    json initial;
    if (s.gaussian_initial) {
        initial["type"] = "gaussian";
        json mean = json::array();
        for (Eigen::Index i = 0; i < s.gaussian_initial->mean.size(); ++i) {
            mean.push_back(s.gaussian_initial->mean(i));
        }
        initial["mean"] = mean;
        initial["covariance"] = matrix_to_json(s.gaussian_initial->covariance);
    } else {
        initial["type"] = "grid";
        initial["path"] = s.grid_initial_path.value_or("");
    }
    doc["initial"] = initial;
    doc["mass"] = s.mass;
    doc["time"] = {{"t_end", s.time.t_end},
                   {"samples", s.time.samples},
                   {"spacing", s.time.geometric ? "geometric" : "linear"}};
    doc["particles"] = {{"n", s.particles.count}, {"dt", s.particles.dt}, {"seed", s.particles.seed}};
    doc["tolerances"] = {{"rank", s.tolerances.rank_tol}, {"cluster", s.tolerances.cluster_tol}};
    doc["output"] = s.output_dir;
    return doc.dump(2) + "\n";
}

std::vector<double> time_grid(const TimeGridSpec& spec) {
    std::vector<double> grid;
    grid.reserve(static_cast<size_t>(spec.samples));
    if (spec.geometric && spec.samples > 2) {
        const double t0 = spec.t_end / 1000.0;
        const double ratio = std::pow(spec.t_end / t0, 1.0 / (spec.samples - 2));
        grid.push_back(0.0);
        double t = t0;
        for (int i = 1; i < spec.samples; ++i, t *= ratio) grid.push_back(std::min(t, spec.t_end));
    } else {
        for (int i = 0; i < spec.samples; ++i) {
            grid.push_back(spec.t_end * static_cast<double>(i) / (spec.samples - 1));
        }
    }
    return grid;
}

GridDensity load_grid_initial(const Scenario& s) {
    if (!s.grid_initial_path) {
        throw std::invalid_argument("scenario '" + s.name + "' has no grid initial datum");
    }
    fs::path p(*s.grid_initial_path);
    if (p.is_relative() && !s.base_dir.empty()) p = fs::path(s.base_dir) / p;
    return read_grid_density(p.string());
}

ModelTriple scenario_model(const Scenario& s) {
    ModelTriple model;
    model.C = s.C;
    model.K = s.K;
    model.D = s.D;
    model.m0 = s.mass;
    if (s.gaussian_initial) {
        model.m1 = s.mass * s.gaussian_initial->mean;
    } else {
        const GridDensity grid = load_grid_initial(s);
        model.m1 = grid.first_moment();
    }
    return model;
}

namespace {

SpectralOptions effective_tolerances(const Scenario& s, const RunOptions& opts) {
    SpectralOptions tol = s.tolerances;
    if (opts.rank_tol) tol.rank_tol = *opts.rank_tol;
    if (opts.cluster_tol) tol.cluster_tol = *opts.cluster_tol;
    return tol;
}

fs::path output_directory(const Scenario& s, const RunOptions& opts) {
    fs::path dir = opts.output_dir_override.empty() ? fs::path(s.output_dir)
                                                    : fs::path(opts.output_dir_override);
    if (dir.is_relative() && !s.base_dir.empty() && opts.output_dir_override.empty()) {
        dir = fs::path(s.base_dir) / dir;
    }
    fs::create_directories(dir);
    return dir;
}

/// Writes through a temporary name and renames on success, so failed runs
/// leave no partial trace file behind.
class AtomicCsvWriter {
  public:
    explicit AtomicCsvWriter(fs::path target)
        : target_(std::move(target)), temp_(target_.string() + ".tmp"), out_(temp_) {
        if (!out_) {
            throw std::runtime_error("cannot open output file " + temp_.string());
        }
    }

    ~AtomicCsvWriter() {
        if (!committed_) {
            out_.close();
            std::error_code ec;
            fs::remove(temp_, ec);
        }
    }

    std::ofstream& stream() { return out_; }

    void row(const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i) {
            out_ << cells[i] << (i + 1 == cells.size() ? "\n" : ",");
        }
    }

    void commit() {
        out_.close();
        fs::rename(temp_, target_);
        committed_ = true;
    }

    const fs::path& target() const { return target_; }

  private:
    fs::path target_;
    fs::path temp_;
    std::ofstream out_;
    bool committed_ = false;
};

void print_matrix(std::ostream& out, const std::string& label, const Matrix& m) {
    out << label << " =\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out << "  ";
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out << format_double(m(r, c)) << (c + 1 == m.cols() ? "" : " ");
        }
        out << "\n";
    }
}

GaussianState scenario_gaussian_initial(const Scenario& s) {
    if (!s.gaussian_initial) {
        throw std::invalid_argument(
            "scenario '" + s.name +
            "': this experiment needs an inline gaussian initial datum (grid data is only "
            "supported by the check and particles experiments)");
    }
    return *s.gaussian_initial;
}

}  // namespace

int run_check(const Scenario& s, const RunOptions& opts, std::ostream& out) {
    const SpectralOptions tol = effective_tolerances(s, opts);
    const ModelTriple model = scenario_model(s);
    const Matrix flow = model.flow_matrix();

    if (!opts.quiet) {
        out << "scenario: " << s.name << " (d = " << s.dim() << ", mass = " << format_double(s.mass)
            << ")\n";
    }

    const AdmissibilityReport adm = is_admissible(flow, model.D, tol);
    out << "pair (C + m0 K, D): " << (adm.admissible ? "admissible" : "NOT admissible")
        << ", rank(D) = " << adm.diffusion_rank << "\n";
    if (!adm.diffusion_psd_rank_ok) {
        out << "  diffusion matrix is not symmetric PSD with rank >= 1\n";
    }
    if (!adm.drift_positively_stable) out << "  C + m0 K is not positively stable\n";
    if (!adm.no_invariant_kernel_subspace) {
        out << "  ker(D) contains an invariant subspace: controllability rank "
            << adm.controllability_rank << " < " << s.dim() << "\n";
    }

    const StabilityReport aps = is_almost_positively_stable(s.C, tol);
    out << "drift C almost-positively stable: " << (aps.holds ? "yes" : "no") << "\n";
    if (!aps.holds) out << "  " << aps.reason << "\n";

    if (!adm.admissible || !aps.holds) {
        out << "decay hypotheses: FAIL\n";
        return 1;
    }

    const SpectralSummary spec = spectral_summary(s.C, model.effective_interaction(), tol);
    out << "mu = " << format_double(spec.mu) << ", n1 = " << spec.n1
        << ", nu = " << format_double(spec.nu) << ", n2 = " << spec.n2
        << ", dim ker(C) = " << spec.ker_dimension << "\n";
    const GaussianState eq = equilibrium(flow, model.D, tol);
    print_matrix(out, "equilibrium covariance", eq.covariance);
    const Vector s_inf = shift_limit(model, tol);
    out << "s_infinity =";
    for (Eigen::Index i = 0; i < s_inf.size(); ++i) out << ' ' << format_double(s_inf(i));
    out << "\ndecay hypotheses: OK\n";
    return 0;
}

int run_flow(const Scenario& s, const RunOptions& opts, std::ostream& out) {
    const SpectralOptions tol = effective_tolerances(s, opts);
    const ModelTriple model = scenario_model(s);
    validate_model(model, tol);
    const GaussianState initial = scenario_gaussian_initial(s);
    const Matrix flow = model.flow_matrix();
    const std::vector<double> grid = time_grid(s.time);

    AtomicCsvWriter csv(output_directory(s, opts) / ("flow_" + s.name + ".csv"));
    csv.row({"t", "entropy", "envelope", "ratio"});

    const GaussianState eq = equilibrium(flow, model.D, tol);
    const double h0 = gaussian_relative_entropy(initial, eq);
    bool ok = true;
    if (h0 <= 1e-14) {
        // stationary start: the trace is identically zero and there is no
        // normalized ratio to certify
        for (double t : grid) {
            const double h = gaussian_relative_entropy(gaussian_flow(flow, model.D, initial, t), eq);
            csv.row({format_double(t), format_double(h), format_double(1.0), format_double(0.0)});
            if (h > 1e-10) {
                ok = false;
                out << "stationarity violated at t = " << format_double(t)
                    << ": entropy = " << format_double(h) << " > 1e-10\n";
            }
        }
    } else {
        const DecayCertificate cert = fp_decay_certificate(flow, model.D, initial, grid, tol);
        for (const auto& p : cert.trace) {
            csv.row({format_double(p.t), format_double(p.entropy), format_double(p.envelope),
                     format_double(p.ratio)});
        }
        if (!opts.quiet) {
            out << "decay rate 2 mu = " << format_double(cert.rate) << ", polynomial power "
                << cert.power << ", fitted constant = " << format_double(cert.c_hat) << "\n";
        }
        if (!cert.ratio_bounded) {
            ok = false;
            out << "entropy/envelope ratio is not bounded over the grid (late-grid fit exceeds "
                   "the early fit by more than 10%)\n";
        }
    }
    csv.commit();
    if (!opts.quiet) out << "wrote " << csv.target().string() << "\n";
    return ok ? 0 : 1;
}

int run_bound(const Scenario& s, const RunOptions& opts, std::ostream& out) {
    const SpectralOptions tol = effective_tolerances(s, opts);
    const ModelTriple model = scenario_model(s);
    validate_model(model, tol);
    const GaussianState initial = scenario_gaussian_initial(s);
    const std::vector<double> grid = time_grid(s.time);

    const EntropyBoundReport report = mkv_entropy_bound(model, initial, grid, tol);

    AtomicCsvWriter csv(output_directory(s, opts) / ("bound_" + s.name + ".csv"));
    csv.row({"t", "H_total", "H_profile", "cross_term", "quadratic_term", "envelope_term1",
             "envelope_term2", "shift_error"});
    for (const auto& p : report.trace) {
        csv.row({format_double(p.t), format_double(p.total), format_double(p.profile),
                 format_double(p.cross), format_double(p.quadratic), format_double(p.envelope1),
                 format_double(p.envelope2), format_double(p.shift_error)});
    }

    bool ok = true;
    if (!report.decomposition_ok) {
        ok = false;
        int listed = 0;
        for (const auto& p : report.trace) {
            const double lhs = p.total;
            const double rhs = p.profile + p.cross + p.quadratic;
            if (std::abs(lhs - rhs) > 1e-8 && listed++ < 5) {
                out << "decomposition identity violated at t = " << format_double(p.t)
                    << ": lhs = " << format_double(lhs) << ", rhs = " << format_double(rhs)
                    << "\n";
            }
        }
        out << "entropy decomposition identity violated: max residual = "
            << format_double(report.max_decomposition_residual) << " > 1e-8\n";
    }
    if (!report.ratio_bounded) {
        ok = false;
        out << "entropy/envelope ratio is not bounded over the grid\n";
    }

    // shift convergence against the fitted two-term envelope
    const ShiftEnvelope envelope(model.C, model.effective_interaction(),
                                 std::max(50.0, 1.5 * grid.back()), tol);
    const Vector m1 = model.unit_first_moment();
    for (double t : grid) {
        const double lhs = envelope.lhs(t, m1);
        const double rhs = envelope.rhs(t, m1);
        if (lhs > rhs * (1.0 + 1e-9) + envelope.evaluation_floor(m1)) {
            ok = false;
            out << "shift envelope violated at t = " << format_double(t) << ": |s(t)-s_inf| = "
                << format_double(lhs) << " > " << format_double(rhs) << "\n";
        }
    }

    csv.commit();
    if (!opts.quiet) {
        out << "fitted constant = " << format_double(report.c_hat)
            << ", max decomposition residual = "
            << format_double(report.max_decomposition_residual) << "\n";
        out << "wrote " << csv.target().string() << "\n";
    }
    return ok ? 0 : 1;
}

int run_particles(const Scenario& s, const RunOptions& opts, std::ostream& out) {
    const SpectralOptions tol = effective_tolerances(s, opts);
    const ModelTriple model = scenario_model(s);
    validate_model(model, tol);
    const std::vector<double> grid = time_grid(s.time);

    std::vector<ParticleSnapshot> snapshots;
    if (s.gaussian_initial) {
        snapshots = simulate(model, *s.gaussian_initial, s.particles.count, s.time.t_end,
                             s.particles.dt, s.particles.seed, grid);
    } else {
        snapshots = simulate(model, load_grid_initial(s), s.particles.count, s.time.t_end,
                             s.particles.dt, s.particles.seed, grid);
    }

    // long-time reference N(s_inf, equilibrium covariance) for the entropy
    // proxy, when the decay hypotheses hold
    std::optional<GaussianState> reference;
    if (is_almost_positively_stable(s.C, tol).holds) {
        GaussianState ref = equilibrium(model.flow_matrix(), model.D, tol);
        ref.mean = shift_limit(model, tol);
        reference = std::move(ref);
    }

    const int d = s.dim();
    AtomicCsvWriter csv(output_directory(s, opts) / ("particles_" + s.name + ".csv"));
    std::vector<std::string> header{"t"};
    for (int i = 0; i < d; ++i) header.push_back("mean_" + std::to_string(i));
    for (int i = 0; i < d; ++i) {
        for (int j = i; j < d; ++j) {
            header.push_back("cov_" + std::to_string(i) + std::to_string(j));
        }
    }
    header.push_back("proxy_entropy");
    csv.row(header);

    for (const auto& snap : snapshots) {
        std::vector<std::string> cells{format_double(snap.t)};
        for (int i = 0; i < d; ++i) cells.push_back(format_double(snap.mean(i)));
        for (int i = 0; i < d; ++i) {
            for (int j = i; j < d; ++j) cells.push_back(format_double(snap.covariance(i, j)));
        }
        if (reference) {
            cells.push_back(format_double(gaussian_fit_entropy(snap, *reference)));
        } else {
            cells.push_back("");
        }
        csv.row(cells);
    }
    csv.commit();
    if (!opts.quiet) {
        out << "simulated " << s.particles.count << " particles to t = "
            << format_double(s.time.t_end) << " (dt = " << format_double(s.particles.dt)
            << ", seed = " << s.particles.seed << ")\n";
        out << "wrote " << csv.target().string() << "\n";
    }
    return 0;
}

}  // namespace mkvlab
