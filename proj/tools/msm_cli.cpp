// msm: command-line front end for multiscale-sampling experiments.

#include <msm/harness.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

struct Common {
    std::string config;
    std::vector<std::string> set;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> chains;
    std::optional<std::size_t> iters;
    std::string out;
};

void add_common(CLI::App* app, Common& c, bool run_flags) {
    app->add_option("--config", c.config, "experiment config (INI)")->required()->check(CLI::ExistingFile);
    app->add_option("--set", c.set, "override a config value, section.key=value (repeatable)");
    app->add_option("--seed", c.seed, "seed (overrides the config)");
    app->add_option("--out", c.out, "output directory (overrides the config)");
    if (run_flags) {
        app->add_option("--chains", c.chains, "number of chains");
        app->add_option("--iters", c.iters, "proposals per chain");
    }
}

// Precedence: built-in defaults < config file < --set < dedicated flags.
msm::ExperimentConfig resolve(const Common& c) {
    auto cfg = msm::apply_overrides(msm::load_config(c.config), c.set);
    if (c.chains)
        cfg.chains = *c.chains;
    if (c.iters)
        cfg.iterations = *c.iters;
    cfg.validate();
    return cfg;
}

void print_report(const msm::DiagnosticsReport& r) {
    if (r.checkpoints.empty())
        return;
    std::cout << "final psrf_max " << r.psrf_max.back() << "  mpsrf " << r.mpsrf.back() << '\n';
    if (auto it = r.converged_at())
        std::cout << "below threshold " << r.threshold << " from iteration " << *it << '\n';
    else
        std::cout << "not below threshold " << r.threshold << '\n';
    for (const auto& w : r.warnings)
        std::cerr << "warning: " << w << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multiscale sampling MCMC for Darcy-flow permeability inversion"};
    app.require_subcommand(1);

    Common gen, run, demo;
    auto* g = app.add_subcommand("generate-reference", "draw a reference field and write its observations");
    add_common(g, gen, false);
    bool zero = false;
    g->add_flag("--zero-theta", zero, "use theta = 0 (homogeneous field)");

    auto* r = app.add_subcommand("run", "run the chains of an experiment");
    add_common(r, run, true);
    std::optional<std::size_t> workers;
    bool resume = false;
    r->add_option("--workers", workers, "worker threads (default: one per chain, capped by the hardware)");
    r->add_flag("--resume", resume, "continue chains from their checkpoints");

    auto* d = app.add_subcommand("diagnose", "recompute convergence diagnostics of a run");
    std::string diag_dir, diag_out;
    double burn = 0.0, threshold = 1.2;
    d->add_option("run", diag_dir, "run directory")->required();
    d->add_option("--burn-in", burn, "fraction of each chain to discard")->check(CLI::Range(0.0, 0.999));
    d->add_option("--threshold", threshold, "convergence threshold");
    d->add_option("--out", diag_out, "CSV output (default: <run>/diagnostics_rerun.csv)");

    auto* c = app.add_subcommand("compare", "align diagnostics and acceptance rates of several runs");
    std::vector<std::string> runs;
    std::string cmp_out = "comparison";
    c->add_option("runs", runs, "run directories")->required();
    c->add_option("--out", cmp_out, "output directory");

    auto* cd = app.add_subcommand("condition-demo", "condition prior samples on measurements and check the data");
    add_common(cd, demo, false);
    std::size_t samples = 10;
    cd->add_option("--samples", samples, "number of conditioned samples");

    auto* rp = app.add_subcommand("reproduce", "re-run a finished run from its manifest and compare hashes");
    std::string rp_dir, rp_out;
    rp->add_option("run", rp_dir, "run directory")->required();
    rp->add_option("--out", rp_out, "fresh output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*g) {
            auto cfg = resolve(gen);
            const auto seed = gen.seed.value_or(cfg.reference_seed);
            const auto dir = gen.out.empty() ? cfg.reference_dir : gen.out;
            msm::generate_reference(cfg, seed, dir, zero);
            std::cout << "reference written to " << dir << " (seed " << seed << ")\n";
        } else if (*r) {
            auto cfg = resolve(run);
            if (run.seed)
                cfg.seed = *run.seed;
            if (!run.out.empty())
                cfg.output_dir = run.out;
            if (workers)
                cfg.workers = *workers;
            const auto sum = msm::run_experiment(cfg, {resume});
            for (std::size_t k = 0; k < sum.acceptance_rates.size(); ++k)
                std::cout << "acceptance rate " << sum.acceptance_rates[k] << '\n';
            if (sum.report)
                print_report(*sum.report);
            for (const auto& f : sum.failures)
                std::cerr << "chain " << f.chain_id << " failed: " << f.message << '\n';
            std::cout << "run written to " << cfg.output_dir << (sum.degraded ? " (degraded)" : "") << '\n';
            return sum.degraded ? 4 : 0;
        } else if (*d) {
            msm::DiagnosticsOptions opts;
            opts.burn_in_fraction = burn;
            opts.threshold = threshold;
            const auto rep = msm::diagnose_run(diag_dir, opts);
            std::ostringstream os;
            msm::write_diagnostics_csv(os, rep);
            const std::string out = diag_out.empty() ? (msm::fs::path(diag_dir) / "diagnostics_rerun.csv").string() : diag_out;
            msm::write_file_atomic(out, os.str());
            print_report(rep);
        } else if (*c) {
            std::vector<msm::fs::path> dirs(runs.begin(), runs.end());
            std::cout << msm::compare_runs(dirs, cmp_out).text;
        } else if (*cd) {
            auto cfg = resolve(demo);
            const auto seed = demo.seed.value_or(cfg.seed);
            const auto dir = demo.out.empty() ? cfg.output_dir : demo.out;
            const auto res = msm::condition_demo(cfg, samples, seed, dir);
            double worst = 0.0, worst_out = 0.0;
            for (std::size_t k = 0; k < res.max_error.size(); ++k) {
                worst = std::max(worst, res.max_error[k]);
                worst_out = std::max(worst_out, res.max_error_outside_band[k]);
            }
            std::cout << "max |field - data|: " << worst << " (outside averaging band: " << worst_out << ")\n";
        } else if (*rp) {
            const auto rep = msm::reproduce_run(rp_dir, rp_out);
            for (const auto& f : rep.mismatched)
                std::cout << "hash mismatch: " << f << '\n';
            std::cout << (rep.ok() ? "all output hashes reproduced\n" : "reproduction failed\n");
            return rep.ok() ? 0 : 5;
        }
    } catch (const msm::ConfigurationError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const msm::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
