#ifndef MSM_SAMPLER_HPP
#define MSM_SAMPLER_HPP

// The multiscale prior: per-subdomain KLE coordinates updated block by block
// with preconditioned Crank-Nicolson proposals, synthesized into a global
// log-permeability field, then smoothed across subdomain interfaces.

#include <msm/errors.hpp>
#include <msm/field.hpp>
#include <msm/kle.hpp>
#include <msm/mesh.hpp>
#include <msm/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace msm {

// theta = [theta^0 | theta^1 | ... | theta^{M_c - 1}], each subdomain block
// of length N_c split into N_local contiguous Gibbs blocks of length n_lb.
struct ThetaLayout {
    std::size_t subdomains = 1;
    std::size_t per_subdomain = 1;
    std::size_t block_size = 1;

    ThetaLayout() = default;
    ThetaLayout(std::size_t m_c, std::size_t n_c, std::size_t n_lb)
        : subdomains(m_c), per_subdomain(n_c), block_size(n_lb) {
        if (m_c == 0 || n_c == 0 || n_lb == 0)
            throw ConfigurationError("theta layout: M_c, N_c and N_lb must be positive");
        if (n_c % n_lb != 0)
            throw ConfigurationError("theta layout: N_lb=" + std::to_string(n_lb) + " must divide N_c=" +
                                     std::to_string(n_c));
    }

    // From the total dimension N = M_c * N_c.
    static ThetaLayout from_total(std::size_t n_total, std::size_t m_c, std::size_t n_lb) {
        if (m_c == 0 || n_total % m_c != 0)
            throw ConfigurationError("theta layout: M_c=" + std::to_string(m_c) + " must divide N=" +
                                     std::to_string(n_total));
        return ThetaLayout(m_c, n_total / m_c, n_lb);
    }

    std::size_t total() const { return subdomains * per_subdomain; }
    std::size_t blocks_per_subdomain() const { return per_subdomain / block_size; }
    std::size_t subdomain_offset(std::size_t i) const { return i * per_subdomain; }

    friend bool operator==(const ThetaLayout&, const ThetaLayout&) = default;
};

struct ThetaVector {
    ThetaLayout layout;
    std::vector<double> values;

    ThetaVector() = default;
    explicit ThetaVector(const ThetaLayout& l, double fill = 0.0) : layout(l), values(l.total(), fill) {}

    std::span<double> subdomain(std::size_t i) {
        return std::span<double>(values).subspan(layout.subdomain_offset(i), layout.per_subdomain);
    }
    std::span<const double> subdomain(std::size_t i) const {
        return std::span<const double>(values).subspan(layout.subdomain_offset(i), layout.per_subdomain);
    }
};

// One Gibbs block: coordinates [begin, end) of the global theta vector.
struct BlockRef {
    std::size_t subdomain = 0;
    std::size_t block = 0;
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const BlockRef&, const BlockRef&) = default;
};

// Lexicographic (subdomain outer, block inner) sweep order.
inline std::vector<BlockRef> block_schedule(std::size_t m_c, std::size_t n_c, std::size_t n_lb) {
    const ThetaLayout layout(m_c, n_c, n_lb);
    std::vector<BlockRef> out;
    out.reserve(m_c * layout.blocks_per_subdomain());
    for (std::size_t i = 0; i < m_c; ++i)
        for (std::size_t k = 0; k < layout.blocks_per_subdomain(); ++k) {
            const std::size_t b = layout.subdomain_offset(i) + k * n_lb;
            out.push_back({i, k, b, b + n_lb});
        }
    return out;
}

inline std::vector<BlockRef> block_schedule(const ThetaLayout& l) {
    return block_schedule(l.subdomains, l.per_subdomain, l.block_size);
}

// sqrt(1 - beta^2) * block + beta * eps, eps drawn coordinate by coordinate.
inline std::vector<double> pcn_propose(std::span<const double> block, double beta, RngStream& rng) {
    if (!(beta >= 0.0 && beta <= 1.0))
        throw ArgumentError("pcn_propose: beta must lie in [0, 1]");
    const double keep = std::sqrt(1.0 - beta * beta);
    std::vector<double> out(block.size());
    for (std::size_t a = 0; a < block.size(); ++a)
        out[a] = keep * block[a] + beta * rng.normal();
    return out;
}

// Copy of theta with only `block` replaced by a pCN proposal.
inline ThetaVector propose_block(const ThetaVector& theta, const BlockRef& block, double beta, RngStream& rng) {
    if (block.end > theta.values.size() || block.begin >= block.end)
        throw ArgumentError("propose_block: block outside theta");
    ThetaVector out = theta;
    const auto fresh = pcn_propose(std::span<const double>(theta.values).subspan(block.begin, block.end - block.begin),
                                   beta, rng);
    std::copy(fresh.begin(), fresh.end(), out.values.begin() + static_cast<std::ptrdiff_t>(block.begin));
    return out;
}

// Per-subdomain synthesis with the shared local basis, written into S_i.
inline ScalarField assemble_multiscale_field(const DomainDecomposition& dd, const KLBasis& local_basis,
                                             const ThetaVector& theta) {
    if (theta.layout.subdomains != dd.subdomain_count() || theta.layout.per_subdomain != local_basis.modes())
        throw ArgumentError("assemble_multiscale_field: theta layout does not match decomposition/basis");
    if (local_basis.grid.nx() != dd.block_nx() || local_basis.grid.ny() != dd.block_ny())
        throw ArgumentError("assemble_multiscale_field: local basis grid does not match subdomain shape");
    ScalarField out(dd.grid());
    for (std::size_t s = 0; s < dd.subdomain_count(); ++s) {
        const ScalarField local = synthesize(local_basis, theta.subdomain(s));
        for (std::size_t lj = 0; lj < dd.block_ny(); ++lj)
            for (std::size_t li = 0; li < dd.block_nx(); ++li)
                out[dd.global_cell(s, li, lj)] = local(li, lj);
    }
    return out;
}

enum class NeighborhoodShape { circle, ellipse };

enum class AveragingRule {
    variance_preserving, // n^{-1/2} * sum
    mean,                // n^{-1} * sum
    gaussian_weighted,   // Gaussian distance weights scaled to unit sum of squares
};

struct SamplerConfig {
    double beta = 0.5;
    std::size_t n_lb = 1;
    double hbar = 0.1;
    NeighborhoodShape shape = NeighborhoodShape::circle;
    // Ellipse semi-axes, used when shape == ellipse (conventionally L_x/2, L_y/2).
    double ellipse_x = 0.1;
    double ellipse_y = 0.1;
    AveragingRule rule = AveragingRule::variance_preserving;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(beta > 0.0 && beta <= 1.0))
            throw ConfigurationError("sampler: beta must lie in (0, 1]");
        if (n_lb == 0)
            throw ConfigurationError("sampler: n_lb must be positive");
        if (!(hbar >= 0.0))
            throw ConfigurationError("sampler: hbar must be non-negative");
        if (shape == NeighborhoodShape::ellipse && (!(ellipse_x > 0.0) || !(ellipse_y > 0.0)))
            throw ConfigurationError("sampler: ellipse semi-axes must be positive");
    }
};

// Precomputed interface smoothing: for each band cell, its neighborhood and
// the weights of the replacement value.
class AveragingPlan {
public:
    struct Target {
        std::size_t cell;
        std::vector<std::size_t> neighbors;
        std::vector<double> weights;
    };

    AveragingPlan(const DomainDecomposition& dd, const SamplerConfig& cfg) : grid_(dd.grid()) {
        cfg.validate();
        if (cfg.hbar == 0.0)
            return;
        const double ax = cfg.shape == NeighborhoodShape::ellipse ? cfg.ellipse_x : cfg.hbar;
        const double ay = cfg.shape == NeighborhoodShape::ellipse ? cfg.ellipse_y : cfg.hbar;
        for (std::size_t c : interface_band(dd, grid_, cfg.hbar)) {
            Target t{c, neighborhood(grid_, dd, c, ax, ay), {}};
            const auto n = static_cast<double>(t.neighbors.size());
            t.weights.resize(t.neighbors.size());
            if (cfg.rule == AveragingRule::gaussian_weighted) {
                const Point p = grid_.center(c);
                double ss = 0.0;
                for (std::size_t a = 0; a < t.neighbors.size(); ++a) {
                    const Point q = grid_.center(t.neighbors[a]);
                    const double u = (q.x - p.x) / ax, v = (q.y - p.y) / ay;
                    t.weights[a] = std::exp(-0.5 * (u * u + v * v));
                    ss += t.weights[a] * t.weights[a];
                }
                for (double& w : t.weights)
                    w /= std::sqrt(ss);
            } else {
                const double w = cfg.rule == AveragingRule::mean ? 1.0 / n : 1.0 / std::sqrt(n);
                std::fill(t.weights.begin(), t.weights.end(), w);
            }
            targets_.push_back(std::move(t));
        }
    }

    const std::vector<Target>& targets() const { return targets_; }

    // All replacements read the input field, so the result is order independent.
    // With only_subdomain set, band cells of other subdomains are left as they are.
    ScalarField apply(const ScalarField& field, const DomainDecomposition* only_in = nullptr,
                      std::size_t only_subdomain = 0) const {
        if (!(field.grid == grid_))
            throw ArgumentError("local_average: field grid does not match decomposition");
        ScalarField out = field;
        for (const Target& t : targets_) {
            if (only_in && only_in->subdomain_of(t.cell) != only_subdomain)
                continue;
            double v = 0.0;
            for (std::size_t a = 0; a < t.neighbors.size(); ++a)
                v += t.weights[a] * field[t.neighbors[a]];
            out[t.cell] = v;
        }
        return out;
    }

private:
    CartesianGrid grid_;
    std::vector<Target> targets_;
};

inline ScalarField local_average(const ScalarField& field, const DomainDecomposition& dd, const SamplerConfig& cfg) {
    return AveragingPlan(dd, cfg).apply(field);
}

// Averaging restricted to the band cells of one subdomain.
inline ScalarField local_average_subdomain(const ScalarField& field, const DomainDecomposition& dd,
                                           const SamplerConfig& cfg, std::size_t subdomain) {
    return AveragingPlan(dd, cfg).apply(field, &dd, subdomain);
}

} // namespace msm

#endif
