#ifndef MSM_MCMC_HPP
#define MSM_MCMC_HPP

// Two-stage (coarse-filtered) Metropolis-Hastings over the multiscale prior.
//
// The pCN proposal is reversible with respect to the N(0, I) prior on theta,
// so in both acceptance probabilities the instrumental-density ratio times
// the prior ratio is exactly 1 and only likelihood ratios remain:
//   alpha_c = min(1, exp(Lc(prop) - Lc(cur)))
//   alpha_f = min(1, exp((Lf(prop) - Lf(cur)) - (Lc(prop) - Lc(cur))))
//
// Random stream contract of one step: n_lb normals for the proposal, one
// uniform for the coarse decision, and one more uniform only when the coarse
// stage accepts.

#include <msm/conditioning.hpp>
#include <msm/errors.hpp>
#include <msm/field.hpp>
#include <msm/forward.hpp>
#include <msm/hash.hpp>
#include <msm/io.hpp>
#include <msm/kle.hpp>
#include <msm/mesh.hpp>
#include <msm/rng.hpp>
#include <msm/sampler.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace msm {

struct LikelihoodParams {
    double sigma_f2 = 1e-3;
    double sigma_c2 = 5e-3;

    // Infinite variances give a flat likelihood.
    static LikelihoodParams flat() {
        return {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    }
    void validate() const {
        if (!(sigma_f2 > 0.0) || !(sigma_c2 > 0.0))
            throw ConfigurationError("likelihood: sigma_f2 and sigma_c2 must be positive");
    }
};

inline double coarse_acceptance(double loglike_c_prop, double loglike_c_cur) {
    return std::min(1.0, std::exp(loglike_c_prop - loglike_c_cur));
}

inline double fine_acceptance(double loglike_f_prop, double loglike_f_cur, double loglike_c_prop,
                              double loglike_c_cur) {
    return std::min(1.0, std::exp((loglike_f_prop - loglike_f_cur) - (loglike_c_prop - loglike_c_cur)));
}

// Everything a chain reads and never writes: grids, bases, reference data.
struct MsmModel {
    CartesianGrid fine;
    CartesianGrid coarse;
    DomainDecomposition decomposition;
    KLBasis local_basis;
    ThetaLayout layout;
    SamplerConfig sampler;
    AveragingPlan averaging;
    LikelihoodParams likelihood;
    BoundarySpec boundary;
    SolverOptions fine_solver;
    SolverOptions coarse_solver;
    ObservationVector reference_fine;
    ObservationVector reference_coarse;
    std::optional<MultiscaleConditioning> conditioning;
    double initial_scale = 2.0; // overdispersed start: theta ~ N(0, initial_scale^2 I)

    MsmModel(const CartesianGrid& fine_grid, const CartesianGrid& coarse_grid, const DomainDecomposition& dd,
             KLBasis basis, const SamplerConfig& cfg, const LikelihoodParams& lik, ObservationVector ref_fine,
             ObservationVector ref_coarse, BoundarySpec bc = {})
        : fine(fine_grid), coarse(coarse_grid), decomposition(dd), local_basis(std::move(basis)),
          layout(dd.subdomain_count(), local_basis.modes(), cfg.n_lb), sampler(cfg), averaging(dd, cfg),
          likelihood(lik), boundary(std::move(bc)), reference_fine(std::move(ref_fine)),
          reference_coarse(std::move(ref_coarse)) {
        cfg.validate();
        lik.validate();
        if (!(dd.grid() == fine))
            throw ConfigurationError("model: decomposition is not over the fine grid");
        if (fine.nx() % coarse.nx() != 0 || fine.ny() % coarse.ny() != 0)
            throw ConfigurationError("model: coarse grid " + std::to_string(coarse.nx()) + "x" +
                                     std::to_string(coarse.ny()) + " must divide fine grid " +
                                     std::to_string(fine.nx()) + "x" + std::to_string(fine.ny()));
        if (local_basis.grid.nx() != dd.block_nx() || local_basis.grid.ny() != dd.block_ny())
            throw ConfigurationError("model: local basis grid does not match the subdomain shape");
        if (reference_fine.pattern != chessboard_cells(fine) || reference_coarse.pattern != chessboard_cells(coarse))
            throw ConfigurationError("model: reference observations must use the black-cell pattern");
    }

    std::vector<BlockRef> schedule() const { return block_schedule(layout); }

    // project -> synthesize per subdomain -> interface averaging -> + kriged mean.
    ScalarField log_permeability(const ThetaVector& theta) const {
        ScalarField y;
        if (conditioning) {
            ThetaVector t = theta;
            conditioning->project(t);
            y = averaging.apply(assemble_multiscale_field(decomposition, local_basis, t));
            for (std::size_t c = 0; c < y.size(); ++c)
                y[c] += conditioning->kriged[c];
        } else {
            y = averaging.apply(assemble_multiscale_field(decomposition, local_basis, theta));
        }
        return y;
    }

    struct StageResult {
        double log_like = 0.0;
        double misfit = 0.0;
    };

    StageResult coarse_stage(const ScalarField& perm) const {
        const UpscaledPermeability up = upscale(perm, coarse);
        const ScalarField p = solve_pressure(up.kxx, up.kyy, boundary, coarse_solver);
        const ObservationVector sim = observe(p);
        return {log_likelihood(sim, reference_coarse, likelihood.sigma_c2), misfit(sim, reference_coarse)};
    }

    StageResult fine_stage(const ScalarField& perm) const {
        const ObservationVector sim = observe(solve_pressure(perm, boundary, fine_solver));
        return {log_likelihood(sim, reference_fine, likelihood.sigma_f2), misfit(sim, reference_fine)};
    }
};

struct ChainState {
    std::size_t chain_id = 0;
    ThetaVector theta;
    double log_like_fine = 0.0;
    double log_like_coarse = 0.0;
    double misfit = 0.0; // fine-scale ||R_p - R_eta||^2 of the accepted state
    std::size_t iteration = 0;
    std::size_t proposals = 0;
    std::size_t coarse_accepts = 0;
    std::size_t fine_accepts = 0;
    std::size_t fine_solves = 0;
    RngStream rng;

    double acceptance_rate() const {
        return proposals ? static_cast<double>(fine_accepts) / static_cast<double>(proposals) : 0.0;
    }
};

struct StepOutcome {
    bool coarse_accepted = false;
    bool accepted = false;
    double misfit = 0.0; // of the post-decision state
};

// Per-proposal history; theta rows are post-decision states (repeated on rejection).
struct ChainRecord {
    std::size_t chain_id = 0;
    std::size_t dimension = 0;
    std::vector<double> initial_theta;
    double initial_misfit = 0.0;
    std::vector<double> theta; // row-major, one row of `dimension` per proposal
    std::vector<double> misfit;
    std::vector<std::uint8_t> accepted;
    std::vector<std::uint8_t> coarse_accepted;

    std::size_t size() const { return misfit.size(); }
    std::span<const double> row(std::size_t t) const {
        return std::span<const double>(theta).subspan(t * dimension, dimension);
    }
    double acceptance_rate() const {
        if (accepted.empty())
            return 0.0;
        return static_cast<double>(std::count(accepted.begin(), accepted.end(), 1)) /
               static_cast<double>(accepted.size());
    }
    void append(const ChainState& s, const StepOutcome& o) {
        theta.insert(theta.end(), s.theta.values.begin(), s.theta.values.end());
        misfit.push_back(o.misfit);
        accepted.push_back(o.accepted);
        coarse_accepted.push_back(o.coarse_accepted);
    }
};

// A forward solve failed inside a chain.
struct ChainAbort : NumericalError {
    ChainAbort(const std::string& what, std::size_t chain, std::size_t iter, std::size_t subdomain, std::size_t blk,
               std::string theta_hash)
        : NumericalError(what), chain_id(chain), iteration(iter), block_subdomain(subdomain), block_index(blk),
          proposal_hash(std::move(theta_hash)) {}
    std::size_t chain_id;
    std::size_t iteration;
    std::size_t block_subdomain;
    std::size_t block_index;
    std::string proposal_hash;
};

inline std::string theta_hash(const ThetaVector& t) {
    return sha256_hex(std::string_view(reinterpret_cast<const char*>(t.values.data()),
                                       t.values.size() * sizeof(double)))
        .substr(0, 16);
}

inline ChainState initialize_chain(const MsmModel& model, std::size_t chain_id, std::uint64_t base_seed) {
    ChainState s;
    s.chain_id = chain_id;
    s.rng = RngStream(base_seed + chain_id);
    s.theta = ThetaVector(model.layout);
    for (double& v : s.theta.values)
        v = model.initial_scale * s.rng.normal();
    const ScalarField perm = exponentiate(model.log_permeability(s.theta));
    s.log_like_coarse = model.coarse_stage(perm).log_like;
    const auto f = model.fine_stage(perm);
    s.log_like_fine = f.log_like;
    s.misfit = f.misfit;
    return s;
}

// One proposal on `block`; the state advances by exactly one iteration.
inline StepOutcome msm_step(ChainState& s, const MsmModel& model, const BlockRef& block) {
    ThetaVector prop = propose_block(s.theta, block, model.sampler.beta, s.rng);
    StepOutcome out;
    try {
        const ScalarField perm = exponentiate(model.log_permeability(prop));
        const auto c = model.coarse_stage(perm);
        const double alpha_c = coarse_acceptance(c.log_like, s.log_like_coarse);
        if (s.rng.uniform() < alpha_c) {
            out.coarse_accepted = true;
            ++s.coarse_accepts;
            const auto f = model.fine_stage(perm);
            ++s.fine_solves;
            const double alpha_f = fine_acceptance(f.log_like, s.log_like_fine, c.log_like, s.log_like_coarse);
            if (s.rng.uniform() < alpha_f) {
                out.accepted = true;
                ++s.fine_accepts;
                s.theta = std::move(prop);
                s.log_like_coarse = c.log_like;
                s.log_like_fine = f.log_like;
                s.misfit = f.misfit;
            }
        }
    } catch (const std::exception& e) {
        throw ChainAbort(std::string("chain aborted: ") + e.what(), s.chain_id, s.iteration, block.subdomain,
                         block.block, theta_hash(prop));
    }
    ++s.proposals;
    ++s.iteration;
    out.misfit = s.misfit;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints. Text format, version 1:
//   msm-checkpoint 1
//   chain <id>
//   counters <iteration> <proposals> <coarse_accepts> <fine_accepts> <fine_solves>
//   loglike <fine> <coarse> <misfit>
//   layout <M_c> <N_c> <n_lb>
//   theta v_0 ... v_{N-1}
//   rng <engine state ...>

inline constexpr int checkpoint_version = 1;

inline std::string serialize_checkpoint(const ChainState& s) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "msm-checkpoint " << checkpoint_version << '\n'
       << "chain " << s.chain_id << '\n'
       << "counters " << s.iteration << ' ' << s.proposals << ' ' << s.coarse_accepts << ' ' << s.fine_accepts << ' '
       << s.fine_solves << '\n'
       << "loglike " << s.log_like_fine << ' ' << s.log_like_coarse << ' ' << s.misfit << '\n'
       << "layout " << s.theta.layout.subdomains << ' ' << s.theta.layout.per_subdomain << ' '
       << s.theta.layout.block_size << '\n'
       << "theta";
    for (double v : s.theta.values)
        os << ' ' << v;
    os << "\nrng " << s.rng.state() << '\n';
    return os.str();
}

inline ChainState parse_checkpoint(const std::string& text) {
    std::istringstream is(text);
    std::string tag;
    int version = 0;
    ChainState s;
    auto expect = [&](const char* want) {
        if (!(is >> tag) || tag != want)
            throw DataError(std::string("checkpoint: expected '") + want + "'");
    };
    expect("msm-checkpoint");
    if (!(is >> version) || version != checkpoint_version)
        throw DataError("checkpoint: unsupported version");
    expect("chain");
    is >> s.chain_id;
    expect("counters");
    is >> s.iteration >> s.proposals >> s.coarse_accepts >> s.fine_accepts >> s.fine_solves;
    expect("loglike");
    is >> s.log_like_fine >> s.log_like_coarse >> s.misfit;
    expect("layout");
    std::size_t m = 0, n = 0, b = 0;
    is >> m >> n >> b;
    s.theta = ThetaVector(ThetaLayout(m, n, b));
    expect("theta");
    for (double& v : s.theta.values)
        is >> v;
    expect("rng");
    std::string rest;
    std::getline(is, rest);
    if (!is && !is.eof())
        throw DataError("checkpoint: truncated");
    s.rng.restore(rest);
    return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const ChainState& s) {
    write_file_atomic(path, serialize_checkpoint(s));
}

inline ChainState load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file_bytes(path)); }

// Optional persistence and observation hooks for a chain run.
struct RunOptions {
    std::uint64_t base_seed = 0;
    std::filesystem::path output_dir; // empty: keep everything in memory
    std::size_t checkpoint_every = 1000;
    std::vector<std::size_t> snapshot_iterations; // write the accepted field after these iterations
};

inline std::filesystem::path record_path(const std::filesystem::path& dir, std::size_t chain) {
    return dir / ("chain_" + std::to_string(chain) + ".records.csv");
}
inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t chain) {
    return dir / ("chain_" + std::to_string(chain) + ".checkpoint");
}
inline std::filesystem::path snapshot_path(const std::filesystem::path& dir, std::size_t chain, std::size_t iter) {
    return dir / ("chain_" + std::to_string(chain) + "_field_" + std::to_string(iter) + ".txt");
}

namespace detail {

inline void write_record_header(std::ostream& os, std::size_t dim) {
    os << "iteration,accepted,coarse_accepted,misfit";
    for (std::size_t i = 0; i < dim; ++i)
        os << ",theta_" << i;
    os << '\n';
}

inline void write_record_row(std::ostream& os, const ChainState& s, const StepOutcome& o) {
    os << s.iteration << ',' << int(o.accepted) << ',' << int(o.coarse_accepted) << ',' << o.misfit;
    for (double v : s.theta.values)
        os << ',' << v;
    os << '\n';
}

} // namespace detail

// Continue `state` until it has consumed `total_proposals`, appending to `record`.
inline void advance_chain(ChainState& state, const MsmModel& model, std::size_t total_proposals, ChainRecord& record,
                          const RunOptions& opts = {}) {
    const auto schedule = model.schedule();
    std::ofstream rec;
    if (!opts.output_dir.empty()) {
        const auto path = record_path(opts.output_dir, state.chain_id);
        const bool fresh = state.iteration == 0 || !std::filesystem::exists(path);
        rec.open(path, fresh ? std::ios::trunc : std::ios::app);
        if (!rec)
            throw DataError("cannot open " + path.string());
        rec << std::setprecision(std::numeric_limits<double>::max_digits10);
        if (fresh)
            detail::write_record_header(rec, state.theta.values.size());
    }
    while (state.iteration < total_proposals) {
        const BlockRef& block = schedule[state.iteration % schedule.size()];
        const StepOutcome o = msm_step(state, model, block);
        record.append(state, o);
        if (rec.is_open()) {
            detail::write_record_row(rec, state, o);
            if (opts.checkpoint_every && state.iteration % opts.checkpoint_every == 0) {
                rec.flush();
                save_checkpoint(checkpoint_path(opts.output_dir, state.chain_id), state);
            }
            if (std::find(opts.snapshot_iterations.begin(), opts.snapshot_iterations.end(), state.iteration) !=
                opts.snapshot_iterations.end()) {
                std::ostringstream os;
                write_field(os, model.log_permeability(state.theta));
                write_file_atomic(snapshot_path(opts.output_dir, state.chain_id, state.iteration), os.str());
            }
        }
    }
    if (rec.is_open()) {
        rec.flush();
        save_checkpoint(checkpoint_path(opts.output_dir, state.chain_id), state);
    }
}

inline ChainRecord run_chain(const MsmModel& model, std::size_t chain_id, std::size_t m_mcmc,
                             const RunOptions& opts = {}, ChainState* final_state = nullptr) {
    ChainState state = initialize_chain(model, chain_id, opts.base_seed);
    ChainRecord record;
    record.chain_id = chain_id;
    record.dimension = state.theta.values.size();
    record.initial_theta = state.theta.values;
    record.initial_misfit = state.misfit;
    record.theta.reserve(m_mcmc * record.dimension);
    advance_chain(state, model, m_mcmc, record, opts);
    if (final_state)
        *final_state = std::move(state);
    return record;
}

struct ChainFailure {
    std::size_t chain_id;
    std::string message;
};

struct MultiChainResult {
    std::vector<std::optional<ChainRecord>> records; // by chain index
    std::vector<ChainState> final_states;
    std::vector<ChainFailure> failures;

    bool ok() const { return failures.empty(); }
    void throw_if_failed() const {
        if (failures.empty())
            return;
        std::string msg = "chain failures:";
        for (const auto& f : failures)
            msg += " [chain " + std::to_string(f.chain_id) + "] " + f.message;
        throw NumericalError(msg);
    }
    std::vector<ChainRecord> completed() const {
        std::vector<ChainRecord> out;
        for (const auto& r : records)
            if (r)
                out.push_back(*r);
        return out;
    }
};

// Runs fn(c) for c in [0, m) on up to `workers` threads (0: one per chain,
// capped by the hardware). Exceptions are captured per index.
template <class Fn>
std::vector<std::optional<std::string>> for_each_chain(std::size_t m, std::size_t workers, Fn&& fn) {
    if (workers == 0)
        workers = std::max<std::size_t>(1, std::min<std::size_t>(m, std::thread::hardware_concurrency()));
    workers = std::max<std::size_t>(1, std::min(workers, m));
    std::vector<std::optional<std::string>> errors(m);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t c = next++; c < m; c = next++) {
            try {
                fn(c);
            } catch (const std::exception& e) {
                errors[c] = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w)
        pool.emplace_back(work);
    work();
    for (auto& t : pool)
        t.join();
    return errors;
}

// m independent chains, chain c seeded with base_seed + c. Results do not
// depend on the worker count.
inline MultiChainResult run_chains(const MsmModel& model, std::size_t m, std::size_t m_mcmc,
                                   const RunOptions& opts = {}, std::size_t workers = 0) {
    if (m == 0)
        throw ConfigurationError("run_chains: need at least one chain");
    MultiChainResult result;
    result.records.resize(m);
    result.final_states.resize(m);
    const auto errors = for_each_chain(m, workers, [&](std::size_t c) {
        result.records[c] = run_chain(model, c, m_mcmc, opts, &result.final_states[c]);
    });
    for (std::size_t c = 0; c < m; ++c)
        if (errors[c])
            result.failures.push_back({c, *errors[c]});
    return result;
}

// Reads a record CSV written by advance_chain, keeping at most `max_rows` rows.
inline ChainRecord read_record_csv(const std::filesystem::path& path, std::size_t chain_id,
                                   std::size_t max_rows = std::numeric_limits<std::size_t>::max()) {
    std::ifstream is(path);
    if (!is)
        throw DataError("cannot open record file " + path.string());
    std::string line;
    if (!std::getline(is, line) || line.rfind("iteration,accepted,coarse_accepted,misfit", 0) != 0)
        throw DataError("record file " + path.string() + ": bad header");
    ChainRecord r;
    r.chain_id = chain_id;
    r.dimension = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 3;
    std::size_t row = 1;
    while (r.size() < max_rows && std::getline(is, line)) {
        ++row;
        if (line.empty())
            continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        std::size_t it = 0;
        int acc = 0, cacc = 0;
        double mis = 0.0;
        if (!(ls >> it >> acc >> cacc >> mis))
            throw DataError("record file " + path.string() + ": malformed row " + std::to_string(row));
        for (std::size_t i = 0; i < r.dimension; ++i) {
            double v = 0.0;
            if (!(ls >> v))
                throw DataError("record file " + path.string() + ": short row " + std::to_string(row));
            r.theta.push_back(v);
        }
        r.misfit.push_back(mis);
        r.accepted.push_back(static_cast<std::uint8_t>(acc));
        r.coarse_accepted.push_back(static_cast<std::uint8_t>(cacc));
    }
    return r;
}

} // namespace msm

#endif
