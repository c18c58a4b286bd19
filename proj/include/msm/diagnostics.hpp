#ifndef MSM_DIAGNOSTICS_HPP
#define MSM_DIAGNOSTICS_HPP

// Brooks-Gelman multi-chain convergence diagnostics.
//
// chains[j] is an l x N matrix: row c is theta at iteration c of chain j.
//   W    = 1/(m(l-1)) sum_j sum_c (theta_jc - mean_j)(theta_jc - mean_j)^T
//   B    = l/(m-1)   sum_j (mean_j - mean)(mean_j - mean)^T
//   V    = (l-1)/l W + (1 + 1/m) B / l
//   PSRF_i = sqrt(V_ii / W_ii)
//   MPSRF  = sqrt((l-1)/l + (m+1)/m * lambda_max(W^{-1} B / l))

#include <msm/errors.hpp>
#include <msm/mcmc.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace msm {

struct ChainCovariances {
    Eigen::MatrixXd within;  // W
    Eigen::MatrixXd between; // B
    std::size_t chains = 0;  // m
    std::size_t length = 0;  // l
};

inline ChainCovariances chain_covariances(std::span<const Eigen::MatrixXd> chains) {
    const std::size_t m = chains.size();
    if (m < 2)
        throw ArgumentError("chain_covariances: need at least two chains");
    const Eigen::Index l = chains[0].rows(), n = chains[0].cols();
    if (l < 2)
        throw ArgumentError("chain_covariances: need at least two draws per chain");
    for (const auto& c : chains)
        if (c.rows() != l || c.cols() != n)
            throw ArgumentError("chain_covariances: chains differ in length or dimension");

    Eigen::MatrixXd means(static_cast<Eigen::Index>(m), n);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t j = 0; j < m; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        means.row(jj) = chains[j].colwise().mean();
        const Eigen::MatrixXd centered = chains[j].rowwise() - means.row(jj);
        w.noalias() += centered.transpose() * centered;
    }
    const auto md = static_cast<double>(m), ld = static_cast<double>(l);
    w /= md * (ld - 1.0);
    const Eigen::RowVectorXd grand = means.colwise().mean();
    const Eigen::MatrixXd dev = means.rowwise() - grand;
    Eigen::MatrixXd b = (ld / (md - 1.0)) * (dev.transpose() * dev);
    return {w, b, m, static_cast<std::size_t>(l)};
}

struct PsrfResult {
    std::vector<double> values;         // NaN for excluded coordinates
    double max = 0.0;                   // over non-excluded coordinates
    std::vector<std::size_t> excluded;  // coordinates with zero within-chain variance
};

inline PsrfResult psrf(const ChainCovariances& cov) {
    const auto l = static_cast<double>(cov.length), m = static_cast<double>(cov.chains);
    const Eigen::Index n = cov.within.rows();
    PsrfResult r;
    r.values.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
    r.max = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double wi = cov.within(i, i);
        if (!(wi > 0.0)) {
            r.excluded.push_back(static_cast<std::size_t>(i));
            continue;
        }
        const double vi = (l - 1.0) / l * wi + (1.0 + 1.0 / m) * cov.between(i, i) / l;
        r.values[static_cast<std::size_t>(i)] = std::sqrt(vi / wi);
        r.max = std::max(r.max, r.values[static_cast<std::size_t>(i)]);
    }
    if (r.excluded.size() == static_cast<std::size_t>(n))
        throw DegenerateInputError("psrf: zero within-chain variance on every coordinate");
    return r;
}

inline PsrfResult psrf(std::span<const Eigen::MatrixXd> chains) { return psrf(chain_covariances(chains)); }

struct PowerIterationOptions {
    std::size_t max_iterations = 200000;
    double tolerance = 1e-15;
};

// Largest eigenvalue of W^{-1} B / l through the symmetric similarity
// transform L^{-1} (B / l) L^{-T}, W = L L^T, and power iteration.
inline double mpsrf_lambda(const ChainCovariances& cov, const PowerIterationOptions& opts = {}) {
    const Eigen::Index n = cov.within.rows();
    const auto l = static_cast<double>(cov.length);
    Eigen::LLT<Eigen::MatrixXd> llt(cov.within);
    if (llt.info() != Eigen::Success) {
        Eigen::MatrixXd w = cov.within;
        w.diagonal().array() += 1e-12 * cov.within.trace() / static_cast<double>(n);
        llt.compute(w);
        if (llt.info() != Eigen::Success)
            throw DegenerateInputError("mpsrf: within-chain covariance not factorizable after jitter");
    }
    const Eigen::MatrixXd lower = llt.matrixL();
    Eigen::MatrixXd t = lower.triangularView<Eigen::Lower>().solve(cov.between / l);
    Eigen::MatrixXd s = lower.triangularView<Eigen::Lower>().solve(t.transpose());
    s = 0.5 * (s + s.transpose()).eval();

    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i)
        v[i] = 1.0 + 0.1 * static_cast<double>(i) / static_cast<double>(n);
    v.normalize();
    double lambda = 0.0;
    for (std::size_t it = 0; it < opts.max_iterations; ++it) {
        const Eigen::VectorXd sv = s * v;
        const double norm = sv.norm();
        if (norm == 0.0)
            return 0.0;
        const double next = v.dot(sv);
        const Eigen::VectorXd v_next = sv / norm;
        const double resid = (sv - next * v).norm();
        v = v_next;
        if (std::abs(next - lambda) <= opts.tolerance * std::abs(next) && resid <= 1e-10 * std::abs(next)) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    return std::max(lambda, 0.0);
}

inline double mpsrf(const ChainCovariances& cov, const PowerIterationOptions& opts = {}) {
    const auto l = static_cast<double>(cov.length), m = static_cast<double>(cov.chains);
    return std::sqrt((l - 1.0) / l + (m + 1.0) / m * mpsrf_lambda(cov, opts));
}

inline double mpsrf(std::span<const Eigen::MatrixXd> chains) { return mpsrf(chain_covariances(chains)); }

// Per-iteration fine-scale misfit of the post-decision state.
inline std::vector<double> error_curve(const ChainRecord& record) {
    if (record.size() == 0)
        throw ArgumentError("error_curve: empty record");
    return record.misfit;
}

// Rows [begin, end) of a record as an iterations x N matrix.
inline Eigen::MatrixXd record_matrix(const ChainRecord& r, std::size_t begin, std::size_t end) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(end - begin), static_cast<Eigen::Index>(r.dimension));
    for (std::size_t t = begin; t < end; ++t) {
        const auto row = r.row(t);
        for (std::size_t i = 0; i < r.dimension; ++i)
            out(static_cast<Eigen::Index>(t - begin), static_cast<Eigen::Index>(i)) = row[i];
    }
    return out;
}

struct DiagnosticsOptions {
    double burn_in_fraction = 0.0;
    std::size_t min_interval = 1000; // checkpoints every max(min_interval, l / 100) draws
    double threshold = 1.2;          // reported, not enforced
};

struct DiagnosticsReport {
    std::vector<std::size_t> checkpoints; // iteration counts (1-based, inclusive)
    std::vector<std::vector<double>> psrf;
    std::vector<double> psrf_max;
    std::vector<double> mpsrf;
    std::vector<double> acceptance_rates; // per chain
    std::vector<std::string> warnings;
    double threshold = 1.2;

    // First checkpoint at which both psrf_max and mpsrf are at or below the threshold.
    std::optional<std::size_t> converged_at() const {
        for (std::size_t k = 0; k < checkpoints.size(); ++k)
            if (psrf_max[k] <= threshold && mpsrf[k] <= threshold)
                return checkpoints[k];
        return std::nullopt;
    }
};

// Cumulative diagnostics over growing prefixes of equal-length records,
// using per-chain running means and scatter matrices (Welford updates).
inline DiagnosticsReport diagnostics_report(std::span<const ChainRecord> records, const DiagnosticsOptions& opts = {}) {
    DiagnosticsReport rep;
    rep.threshold = opts.threshold;
    const std::size_t m = records.size();
    if (m < 2)
        throw ArgumentError("diagnostics: need at least two chains");
    const std::size_t total = records[0].size(), dim = records[0].dimension;
    for (const auto& r : records) {
        if (r.size() != total || r.dimension != dim)
            throw ArgumentError("diagnostics: chains differ in length or dimension");
        rep.acceptance_rates.push_back(r.acceptance_rate());
    }
    const auto burn = static_cast<std::size_t>(std::floor(opts.burn_in_fraction * static_cast<double>(total)));
    if (total < burn + 2)
        throw ArgumentError("diagnostics: fewer than two draws after burn-in");
    const std::size_t usable = total - burn;
    const std::size_t interval = std::max<std::size_t>({opts.min_interval, usable / 100, 1});

    const auto n = static_cast<Eigen::Index>(dim);
    std::vector<Eigen::VectorXd> mean(m, Eigen::VectorXd::Zero(n));
    std::vector<Eigen::MatrixXd> scatter(m, Eigen::MatrixXd::Zero(n, n));
    Eigen::VectorXd x(n), delta(n);
    for (std::size_t t = burn; t < total; ++t) {
        const auto count = static_cast<double>(t - burn + 1);
        for (std::size_t j = 0; j < m; ++j) {
            const auto row = records[j].row(t);
            for (Eigen::Index i = 0; i < n; ++i)
                x[i] = row[static_cast<std::size_t>(i)];
            delta = x - mean[j];
            mean[j] += delta / count;
            scatter[j].selfadjointView<Eigen::Lower>().rankUpdate(delta, (count - 1.0) / count);
        }
        const std::size_t l = t - burn + 1;
        if (l >= 2 && (l % interval == 0 || t + 1 == total)) {
            ChainCovariances cov;
            cov.chains = m;
            cov.length = l;
            cov.within = Eigen::MatrixXd::Zero(n, n);
            Eigen::MatrixXd means(static_cast<Eigen::Index>(m), n);
            for (std::size_t j = 0; j < m; ++j) {
                cov.within += scatter[j].selfadjointView<Eigen::Lower>();
                means.row(static_cast<Eigen::Index>(j)) = mean[j].transpose();
            }
            const auto md = static_cast<double>(m), ld = static_cast<double>(l);
            cov.within /= md * (ld - 1.0);
            const Eigen::MatrixXd dev = means.rowwise() - means.colwise().mean();
            cov.between = (ld / (md - 1.0)) * (dev.transpose() * dev);

            rep.checkpoints.push_back(t + 1);
            try {
                PsrfResult p = psrf(cov);
                if (!p.excluded.empty())
                    rep.warnings.push_back("iteration " + std::to_string(t + 1) + ": " +
                                           std::to_string(p.excluded.size()) +
                                           " coordinates with zero within-chain variance excluded");
                rep.psrf_max.push_back(p.max);
                rep.psrf.push_back(std::move(p.values));
                rep.mpsrf.push_back(mpsrf(cov));
            } catch (const DegenerateInputError& e) {
                rep.warnings.push_back("iteration " + std::to_string(t + 1) + ": " + e.what());
                rep.psrf.emplace_back(dim, std::numeric_limits<double>::quiet_NaN());
                rep.psrf_max.push_back(std::numeric_limits<double>::quiet_NaN());
                rep.mpsrf.push_back(std::numeric_limits<double>::quiet_NaN());
            }
        }
    }
    return rep;
}

// CSV: iteration,psrf_max,mpsrf
inline void write_diagnostics_csv(std::ostream& os, const DiagnosticsReport& rep) {
    os << "iteration,psrf_max,mpsrf\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t k = 0; k < rep.checkpoints.size(); ++k)
        os << rep.checkpoints[k] << ',' << rep.psrf_max[k] << ',' << rep.mpsrf[k] << '\n';
}

// CSV: iteration,misfit,acceptance_rate_so_far
inline void write_chain_curve_csv(std::ostream& os, const ChainRecord& r) {
    os << "iteration,misfit,acceptance_rate_so_far\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
    std::size_t acc = 0;
    for (std::size_t t = 0; t < r.size(); ++t) {
        acc += r.accepted[t];
        os << t + 1 << ',' << r.misfit[t] << ',' << static_cast<double>(acc) / static_cast<double>(t + 1) << '\n';
    }
}

} // namespace msm

#endif
