#include "mkvlab/scenario.hpp"

#include <CLI11.hpp>

#include <exception>
#include <functional>
#include <iostream>
#include <string>

namespace {

struct CommonArgs {
    std::string scenario_path;
    mkvlab::RunOptions run;
    double rank_tol = -1.0;
    double cluster_tol = -1.0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--scenario", args.scenario_path, "scenario document (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.run.output_dir_override,
                    "output directory (overrides the scenario)");
    cmd->add_option("--tol-rank", args.rank_tol, "relative rank tolerance override");
    cmd->add_option("--tol-cluster", args.cluster_tol, "eigenvalue cluster tolerance override");
    cmd->add_flag("--quiet", args.run.quiet, "suppress informational output");
}

int dispatch(const CommonArgs& args,
             const std::function<int(const mkvlab::Scenario&, const mkvlab::RunOptions&,
                                     std::ostream&)>& runner) {
    mkvlab::RunOptions run = args.run;
    if (args.rank_tol > 0.0) run.rank_tol = args.rank_tol;
    if (args.cluster_tol > 0.0) run.cluster_tol = args.cluster_tol;
    try {
        const mkvlab::Scenario scenario = mkvlab::parse_scenario(args.scenario_path);
        return runner(scenario, run, std::cout);
    } catch (const std::exception& err) {
        std::cerr << "mkvlab: error: " << err.what() << "\n";
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "mkvlab: admissibility checks, exact entropy-decay traces and particle simulations for "
        "linear drift-interaction-diffusion models"};
    app.require_subcommand(1);

    CommonArgs check_args, flow_args, bound_args, particles_args;
    CLI::App* check = app.add_subcommand(
        "check", "admissibility and stability report (rates, equilibrium, shift limit)");
    add_common(check, check_args);
    CLI::App* flow = app.add_subcommand(
        "flow", "entropy decay trace of the linear flow against its spectral envelope");
    add_common(flow, flow_args);
    CLI::App* bound = app.add_subcommand(
        "bound", "full entropy bound trace with shift terms and decomposition identity");
    add_common(bound, bound_args);
    CLI::App* particles =
        app.add_subcommand("particles", "interacting-particle simulation with moment snapshots");
    add_common(particles, particles_args);

    CLI11_PARSE(app, argc, argv);

    if (check->parsed()) return dispatch(check_args, mkvlab::run_check);
    if (flow->parsed()) return dispatch(flow_args, mkvlab::run_flow);
    if (bound->parsed()) return dispatch(bound_args, mkvlab::run_bound);
    return dispatch(particles_args, mkvlab::run_particles);
}
