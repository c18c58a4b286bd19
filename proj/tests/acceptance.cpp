// Acceptance suite: one PASS/FAIL line per criterion.

#include <msm/diagnostics.hpp>
#include <msm/harness.hpp>

#include "oracles.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace msm;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const std::string& title, double budget_s, const std::function<Verdict()>& body) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
        v = body();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (secs > budget_s) {
        v.pass = false;
        v.detail += " (over runtime budget)";
    }
    if (!v.pass)
        ++failures;
    std::printf("%s AC%d %s: %s [%.2fs / %.0fs]\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), v.detail.c_str(),
                secs, budget_s);
    std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Kolmogorov-Smirnov statistic against N(0, 1).
double ks_statistic(std::vector<double> x) {
    std::sort(x.begin(), x.end());
    const double n = static_cast<double>(x.size());
    double d = 0.0;
    for (std::size_t a = 0; a < x.size(); ++a) {
        const double f = normal_cdf(x[a]);
        d = std::max({d, (a + 1) / n - f, f - a / n});
    }
    return d;
}

// ---------------------------------------------------------------------------

Verdict energy_example1() {
    const auto b = build_kl_basis(build_grid(16, 16), {1.0, 0.2, 0.2}, TruncationPolicy::fixed(20));
    return {b.energy >= 0.955 && b.energy <= 0.995, fmt("E(20) = %.5f, want [0.955, 0.995]", b.energy)};
}

Verdict energy_example3() {
    const auto b = build_kl_basis(build_grid(64, 64), {1.0, 0.1, 0.1}, TruncationPolicy::fixed(64));
    return {std::abs(b.energy - 0.958) <= 0.010, fmt("E(64) = %.5f, want 0.958 +- 0.010", b.energy)};
}

Verdict solver_exactness() {
    const SolverOptions tight{1e-13, 20000};
    double err = 0.0;
    const auto g = build_grid(16, 16);
    ScalarField homo(g, 2.5), layered(g);
    for (std::size_t j = 0; j < 16; ++j)
        for (std::size_t i = 0; i < 16; ++i)
            layered[g.index(i, j)] = 1.0 + 9.0 * (j % 2) + 0.25 * j;
    for (const auto* k : {&homo, &layered}) {
        const auto p = solve_pressure(*k, {}, tight);
        for (std::size_t c = 0; c < g.cell_count(); ++c)
            err = std::max(err, std::abs(p[c] - (1.0 - g.center(c).x)));
    }
    ScalarField two(g);
    for (std::size_t c = 0; c < g.cell_count(); ++c)
        two[c] = g.center(c).x < 0.5 ? 1.0 : 3.0;
    const PressureSystem sys(two, two, {});
    const auto f = sys.fluxes(sys.solve(tight));
    const double flux_err = std::max(std::abs(f.inflow_left - 1.5), std::abs(f.outflow_right - 1.5));
    return {err <= 1e-10 && flux_err <= 1e-8,
            fmt("max |p - (1 - x)| = %.2e (<= 1e-10), flux error = %.2e (<= 1e-8)", err, flux_err)};
}

Verdict eigensolver_oracle() {
    const auto g = build_grid(8, 8);
    const CovarianceSpec spec{1.0, 0.3, 0.2};
    std::vector<double> ref;
    std::vector<std::vector<double>> vecs;
    testing::jacobi_eigen(testing::dense_kernel(g, spec), ref, vecs);
    const auto pairs = eigendecompose(assemble_covariance(g, spec), 10);
    const double sw = std::sqrt(g.cell_area());
    double val_err = 0.0, fn_err = 0.0;
    for (std::size_t k = 0; k < 10; ++k) {
        val_err = std::max(val_err, std::abs(pairs.values[k] - ref[k]) / ref[k]);
        double dot = 0.0;
        for (std::size_t c = 0; c < 64; ++c)
            dot += pairs.functions(c, k) * sw * vecs[c][k];
        const double sign = dot >= 0 ? 1.0 : -1.0;
        for (std::size_t c = 0; c < 64; ++c)
            fn_err = std::max(fn_err, std::abs(pairs.functions(c, k) - sign * vecs[c][k] / sw));
    }
    return {val_err <= 1e-8 && fn_err <= 1e-6,
            fmt("eigenvalue rel. error %.2e (<= 1e-8), eigenfunction error %.2e (<= 1e-6)", val_err, fn_err)};
}

Verdict diagnostics_fixtures() {
    std::vector<Eigen::MatrixXd> hand{Eigen::MatrixXd(2, 1), Eigen::MatrixXd(2, 1)};
    hand[0] << 0, 2;
    hand[1] << 1, 3;
    const auto cov = chain_covariances(hand);
    const double p = psrf(cov).values[0];
    bool ok = std::abs(cov.within(0, 0) - 2.0) <= 1e-10 && std::abs(cov.between(0, 0) - 1.0) <= 1e-10 &&
              std::abs(p - std::sqrt(0.875)) <= 1e-10;

    std::mt19937_64 gen(11);
    std::normal_distribution<double> nd;
    const Eigen::Index l = 50;
    Eigen::MatrixXd same(l, 3);
    for (Eigen::Index t = 0; t < l; ++t)
        for (Eigen::Index i = 0; i < 3; ++i)
            same(t, i) = nd(gen);
    const std::vector<Eigen::MatrixXd> ident{same, same, same};
    const double want = std::sqrt((l - 1.0) / l);
    const auto pi = psrf(ident);
    double ident_err = std::abs(mpsrf(ident) - want);
    for (Eigen::Index i = 0; i < 3; ++i)
        ident_err = std::max(ident_err, std::abs(pi.values[i] - want));
    ok = ok && ident_err <= 1e-10;

    std::size_t bounded = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 2 + trial % 4, n = 1 + trial % 6;
        const Eigen::Index len = 20 + trial;
        std::vector<Eigen::MatrixXd> chains;
        for (std::size_t j = 0; j < m; ++j) {
            Eigen::MatrixXd c(len, static_cast<Eigen::Index>(n));
            for (Eigen::Index t = 0; t < len; ++t)
                for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i)
                    c(t, i) = nd(gen) * (1.0 + i) + 0.3 * j * (trial % 3) + (i ? 0.4 * c(t, i - 1) : 0.0);
            chains.push_back(c);
        }
        const auto cv = chain_covariances(chains);
        if (mpsrf(cv) >= psrf(cv).max - 1e-12)
            ++bounded;
    }
    ok = ok && bounded == 100;
    std::ostringstream os;
    os << "PSRF(hand) = " << fmt("%.10f", p) << ", identical-chain error " << fmt("%.1e", ident_err)
       << ", MPSRF >= max PSRF in " << bounded << "/100 sets";
    return {ok, os.str()};
}

// Flat likelihood, 16x16 MSM 2x2 prior: each coordinate thinned to a lag
// where the pCN autocorrelation (1 - beta^2)^{k/2} is below 0.01.
Verdict prior_stationarity() {
    const auto fine = build_grid(16, 16), coarse = build_grid(8, 8);
    const DomainDecomposition dd(fine, 2, 2);
    const CovarianceSpec cov{1.0, 0.2, 0.2};
    SamplerConfig cfg;
    cfg.beta = 0.5;
    cfg.n_lb = 1;
    cfg.hbar = 0.1;
    const ObservationVector f0{chessboard_cells(fine), std::vector<double>(chessboard_cells(fine).size(), 0.5)};
    const ObservationVector c0{chessboard_cells(coarse), std::vector<double>(chessboard_cells(coarse).size(), 0.5)};
    const MsmModel model(fine, coarse, dd, build_kl_basis(dd.local_grid(), cov, TruncationPolicy::fixed(5)), cfg,
                         LikelihoodParams::flat(), f0, c0);
    const std::size_t total = 100000, dim = model.layout.total();
    RunOptions opts;
    opts.base_seed = 606;
    const ChainRecord rec = run_chain(model, 0, total, opts);
    const std::size_t sweeps = total / dim;
    const double rho = std::sqrt(1.0 - cfg.beta * cfg.beta);
    const auto lag = static_cast<std::size_t>(std::ceil(std::log(0.01) / std::log(rho)));
    double worst = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < dim; ++i) {
        std::vector<double> x;
        for (std::size_t s = lag; s < sweeps; s += lag)
            x.push_back(rec.row(s * dim - 1)[i]);
        n = x.size();
        worst = std::max(worst, ks_statistic(x));
    }
    const double critical = 1.6276 / std::sqrt(static_cast<double>(n));
    std::ostringstream os;
    os << "acceptance " << fmt("%.3f", rec.acceptance_rate()) << ", " << dim << " coordinates, lag " << lag
       << " sweeps, n = " << n << ", max KS " << fmt("%.4f", worst) << " vs 1% critical " << fmt("%.4f", critical);
    return {worst < critical && rec.acceptance_rate() == 1.0, os.str()};
}

// A two-stage chain on the global KLE written without the block machinery.
struct ClassicalChain {
    const KLBasis& basis;
    const CartesianGrid& coarse;
    const ObservationVector& ref_f;
    const ObservationVector& ref_c;
    double beta, sf2, sc2;

    double loglike(const ObservationVector& sim, const ObservationVector& ref, double s2) const {
        double m = 0.0;
        for (std::size_t a = 0; a < sim.values.size(); ++a)
            m += (sim.values[a] - ref.values[a]) * (sim.values[a] - ref.values[a]);
        return -m / (2.0 * s2);
    }
    std::pair<double, double> evaluate(const std::vector<double>& theta, bool fine_too) const {
        ScalarField k(basis.grid, 0.0);
        for (std::size_t c = 0; c < k.size(); ++c) {
            double y = 0.0;
            for (std::size_t i = 0; i < theta.size(); ++i)
                y += std::sqrt(basis.eigenvalues[i]) * basis.eigenfunctions(c, i) * theta[i];
            k[c] = std::exp(y);
        }
        const auto up = upscale(k, coarse);
        const double lc = loglike(observe(solve_pressure(up.kxx, up.kyy, {}, {})), ref_c, sc2);
        const double lf = fine_too ? loglike(observe(solve_pressure(k, {})), ref_f, sf2) : 0.0;
        return {lc, lf};
    }

    std::vector<std::pair<bool, bool>> run(std::uint64_t seed, std::size_t steps) const {
        std::mt19937_64 eng(seed);
        std::normal_distribution<double> nd;
        std::uniform_real_distribution<double> ud;
        std::vector<double> theta(basis.modes());
        for (double& v : theta)
            v = 2.0 * nd(eng);
        auto [lc, lf] = evaluate(theta, true);
        std::vector<std::pair<bool, bool>> out;
        for (std::size_t t = 0; t < steps; ++t) {
            std::vector<double> prop(theta.size());
            for (std::size_t i = 0; i < theta.size(); ++i)
                prop[i] = std::sqrt(1.0 - beta * beta) * theta[i] + beta * nd(eng);
            const auto [pc, unused] = evaluate(prop, false);
            bool ca = false, fa = false;
            if (ud(eng) < std::min(1.0, std::exp(pc - lc))) {
                ca = true;
                const double pf = evaluate(prop, true).second;
                if (ud(eng) < std::min(1.0, std::exp((pf - lf) - (pc - lc)))) {
                    fa = true;
                    theta = prop;
                    lc = pc;
                    lf = pf;
                }
            }
            out.emplace_back(ca, fa);
        }
        return out;
    }
};

Verdict reduction_property() {
    const auto fine = build_grid(16, 16), coarse = build_grid(8, 8);
    const CovarianceSpec cov{1.0, 0.2, 0.2};
    const std::size_t n = 20, steps = 10000;
    const auto basis = build_kl_basis(fine, cov, TruncationPolicy::fixed(n));
    RngStream ref_rng(2024);
    std::vector<double> th(n);
    for (double& v : th)
        v = ref_rng.normal();
    const auto perm = exponentiate(synthesize(basis, th));
    const auto p = solve_pressure(perm, {}, {1e-12, 20000});
    const auto ref_f = observe(p), ref_c = observe(restrict_average(p, coarse));

    SamplerConfig cfg;
    cfg.beta = 0.2;
    cfg.n_lb = n;
    cfg.hbar = 0.1;
    const LikelihoodParams lik{1e-3, 5e-3};
    const MsmModel model(fine, coarse, DomainDecomposition(fine, 1, 1), basis, cfg, lik, ref_f, ref_c);
    RunOptions opts;
    opts.base_seed = 77;
    const ChainRecord rec = run_chain(model, 0, steps, opts);
    const ClassicalChain oracle{basis, coarse, ref_f, ref_c, cfg.beta, lik.sigma_f2, lik.sigma_c2};
    const auto dec = oracle.run(77, steps);
    std::size_t same = 0, accepted = 0;
    for (std::size_t t = 0; t < steps; ++t) {
        if (static_cast<bool>(rec.coarse_accepted[t]) == dec[t].first &&
            static_cast<bool>(rec.accepted[t]) == dec[t].second)
            ++same;
        else
            break;
        accepted += dec[t].second;
    }
    std::ostringstream os;
    os << same << "/" << steps << " identical decisions (" << accepted << " accepted)";
    return {same == steps && accepted > 0 && accepted < steps, os.str()};
}

Verdict conditioning_exactness() {
    const auto g = build_grid(64, 64);
    const CovarianceSpec cov{1.0, 0.1, 0.1};
    const auto basis = build_kl_basis(g, cov, TruncationPolicy::fixed(64));
    std::mt19937_64 gen(8);
    std::uniform_real_distribution<double> ud;
    std::normal_distribution<double> nd;
    MeasurementSet m;
    while (m.size() < 8) {
        const Point p{ud(gen), ud(gen)};
        const auto c = g.cell_containing(p);
        if (std::any_of(m.locations.begin(), m.locations.end(),
                        [&](Point q) { return g.cell_containing(q) == c; }))
            continue;
        m.locations.push_back(p);
        m.values.push_back(nd(gen));
    }
    const auto op = build_conditioning(basis, m, cov);
    double worst = 0.0;
    for (int s = 0; s < 100; ++s) {
        std::vector<double> theta(basis.modes());
        for (double& v : theta)
            v = nd(gen);
        const auto y = conditioned_synthesize(basis, theta, op);
        for (std::size_t a = 0; a < m.size(); ++a)
            worst = std::max(worst, std::abs(y[g.cell_containing(m.locations[a])] - m.values[a]));
    }
    return {worst <= 1e-8, fmt("max |Y(x_a) - y_a| over 100 draws = %.2e (<= 1e-8)", worst)};
}

ExperimentConfig example1(bool msm) {
    ExperimentConfig c;
    c.name = msm ? "msm2x2" : "global";
    c.nx = c.ny = 16;
    c.coarse_nx = c.coarse_ny = 8;
    c.mx = c.my = msm ? 2 : 1;
    c.covariance = {1.0, 0.2, 0.2};
    c.modes = 20;
    c.beta = 0.5;
    c.n_lb = 1;
    c.chains = 4;
    c.iterations = 20000;
    return c;
}

Verdict convergence_ordering() {
    const auto ref = make_reference(example1(false), 2024);
    const auto global = build_model(example1(false), ref.fine, ref.coarse);
    const auto msm2 = build_model(example1(true), ref.fine, ref.coarse);
    const std::uint64_t seed_sets[3] = {1000, 2000, 3000};
    int ordered = 0;
    bool rates_ok = true;
    std::ostringstream os;
    for (int s = 0; s < 3; ++s) {
        double mp[2], rate[2];
        const MsmModel* models[2] = {&global, &msm2};
        for (int k = 0; k < 2; ++k) {
            RunOptions opts;
            opts.base_seed = seed_sets[s];
            const auto res = run_chains(*models[k], 4, 20000, opts, 0);
            res.throw_if_failed();
            const auto recs = res.completed();
            const auto rep = diagnostics_report(recs);
            mp[k] = rep.mpsrf.back();
            rate[k] = 0.0;
            for (double r : rep.acceptance_rates)
                rate[k] += r / 4.0;
        }
        const bool ord = mp[1] <= mp[0];
        ordered += ord;
        const bool in_range = rate[0] >= 0.35 && rate[0] <= 0.70 && rate[1] >= 0.35 && rate[1] <= 0.70 &&
                              rate[1] >= rate[0] - 0.03;
        rates_ok = rates_ok && in_range;
        os << "set " << s << ": MPSRF global " << fmt("%.3f", mp[0]) << " msm " << fmt("%.3f", mp[1])
           << ", acceptance global " << fmt("%.3f", rate[0]) << " msm " << fmt("%.3f", rate[1]) << "; ";
    }
    os << "ordering holds in " << ordered << "/3";
    return {ordered >= 2 && rates_ok, os.str()};
}

Verdict determinism() {
    const auto root = fs::temp_directory_path() / "msm_acceptance_determinism";
    fs::remove_all(root);
    auto c = example1(true);
    c.name = "determinism";
    c.chains = 2;
    c.iterations = 600;
    c.checkpoint_every = 200;
    c.measurement_count = 4;
    c.conditioning = true;
    c.reference_dir = (root / "ref").string();
    c.output_dir = (root / "run").string();
    generate_reference(c, c.reference_seed, c.reference_dir);
    run_experiment(c);
    const auto rep = reproduce_run(c.output_dir, root / "rerun");
    const auto files = read_manifest(c.output_dir).files.size();
    fs::remove_all(root);
    std::ostringstream os;
    os << files << " files hashed, " << rep.mismatched.size() << " mismatched";
    return {rep.ok() && files > 0, os.str()};
}

} // namespace

int main() {
    report(1, "KLE energy 16x16 L=0.2", 5, energy_example1);
    report(2, "KLE energy 64x64 L=0.1", 300, energy_example3);
    report(3, "solver exactness", 1, solver_exactness);
    report(4, "eigensolver vs Jacobi oracle", 1, eigensolver_oracle);
    report(5, "diagnostics fixtures", 10, diagnostics_fixtures);
    report(6, "prior stationarity under flat likelihood", 120, prior_stationarity);
    report(7, "reduction to classical two-stage chain", 600, reduction_property);
    report(8, "conditioning exactness 64x64", 60, conditioning_exactness);
    report(9, "convergence ordering, 16x16 global vs MSM 2x2", 1800, convergence_ordering);
    report(10, "determinism from manifest", 300, determinism);
    std::printf("%d of 10 criteria failed\n", failures);
    return failures ? 1 : 0;
}
