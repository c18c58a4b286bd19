#ifndef MSM_KLE_HPP
#define MSM_KLE_HPP

// Karhunen-Loeve expansion of a stationary Gaussian log-permeability prior.
//
// The covariance integral operator is discretized by midpoint (Nystrom)
// quadrature on cell centers with uniform weight w = hx * hy. Eigenfunctions
// are stored cell-wise and normalized so that sum_c phi_i(c)^2 * w = 1.

#include <msm/errors.hpp>
#include <msm/field.hpp>
#include <msm/hash.hpp>
#include <msm/io.hpp>
#include <msm/mesh.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace msm {

struct CovarianceSpec {
    double sigma2 = 1.0;
    double lx = 0.2;
    double ly = 0.2;

    void validate() const {
        if (!(sigma2 > 0.0) || !(lx > 0.0) || !(ly > 0.0))
            throw ConfigurationError("covariance: sigma2, lx and ly must be positive");
    }
};

// Squared-exponential kernel with separate correlation lengths per axis.
inline double covariance(Point a, Point b, const CovarianceSpec& spec) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    return spec.sigma2 * std::exp(-dx * dx / (2.0 * spec.lx * spec.lx) - dy * dy / (2.0 * spec.ly * spec.ly));
}

struct CovarianceOperator {
    CartesianGrid grid;
    Eigen::MatrixXd matrix; // entry (c, d) = R(center_c, center_d) * weight
    double weight = 0.0;
};

inline constexpr std::size_t default_max_covariance_cells = 16384;

inline CovarianceOperator assemble_covariance(const CartesianGrid& grid, const CovarianceSpec& spec,
                                              std::size_t max_cells = default_max_covariance_cells) {
    spec.validate();
    const std::size_t n = grid.cell_count();
    if (n > max_cells)
        throw ResourceError("covariance operator: " + std::to_string(n) + " cells exceeds cap of " +
                            std::to_string(max_cells));
    CovarianceOperator op{grid, Eigen::MatrixXd(n, n), grid.cell_area()};
    // Separable kernel: exp(a + b) = exp(a) * exp(b), tabulated per axis offset.
    std::vector<double> fx(grid.nx()), fy(grid.ny());
    for (std::size_t d = 0; d < grid.nx(); ++d) {
        const double dx = static_cast<double>(d) * grid.hx();
        fx[d] = std::exp(-dx * dx / (2.0 * spec.lx * spec.lx));
    }
    for (std::size_t d = 0; d < grid.ny(); ++d) {
        const double dy = static_cast<double>(d) * grid.hy();
        fy[d] = std::exp(-dy * dy / (2.0 * spec.ly * spec.ly));
    }
    const double scale = spec.sigma2 * op.weight;
    for (std::size_t c = 0; c < n; ++c) {
        const auto [ci, cj] = grid.ij(c);
        for (std::size_t d = 0; d < n; ++d) {
            const auto [di, dj] = grid.ij(d);
            const std::size_t ox = ci > di ? ci - di : di - ci, oy = cj > dj ? cj - dj : dj - cj;
            op.matrix(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(c)) = scale * fx[ox] * fy[oy];
        }
    }
    return op;
}

// Top eigenpairs of a covariance operator, eigenvalues descending.
struct Eigenpairs {
    Eigen::VectorXd values;
    Eigen::MatrixXd functions; // n_cells x k, quadrature-orthonormal
    double weight = 0.0;
    std::size_t iterations = 0;
};

struct EigensolverOptions {
    std::size_t max_iterations = 1000;
    // Converged when every requested Ritz pair has ||C x - theta x|| <= tol * theta_max.
    double tolerance = 1e-12;
    std::uint64_t seed = 0x5eed;
};

namespace detail {

inline Eigen::MatrixXd orthonormal_columns(const Eigen::MatrixXd& a) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    return qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
}

// Flip sign so the largest-magnitude entry is positive; entries within a
// relative 1e-8 of the maximum count as tied and the lowest index wins.
inline void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
    const double m = v.cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (std::abs(v[i]) >= m * (1.0 - 1e-8)) {
            if (v[i] < 0.0)
                v = -v;
            return;
        }
}

} // namespace detail

// Blocked subspace iteration with Rayleigh-Ritz on a block of k plus
// oversampling columns. Deterministic for a fixed options.seed.
inline Eigenpairs eigendecompose(const Eigen::MatrixXd& c, double weight, std::size_t k,
                                 const EigensolverOptions& opts = {}) {
    const auto n = static_cast<std::size_t>(c.rows());
    if (c.rows() != c.cols())
        throw ArgumentError("eigendecompose: operator must be square");
    if (k == 0 || k > n)
        throw ArgumentError("eigendecompose: need 1 <= k <= dimension (k=" + std::to_string(k) + ")");
    if (!(weight > 0.0))
        throw ArgumentError("eigendecompose: quadrature weight must be positive");

    const std::size_t p = std::min(n, k + std::max<std::size_t>(k / 2, 8));
    const auto ni = static_cast<Eigen::Index>(n), pi = static_cast<Eigen::Index>(p), ki = static_cast<Eigen::Index>(k);

    std::mt19937_64 gen(opts.seed);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd q(ni, pi);
    for (Eigen::Index j = 0; j < pi; ++j)
        for (Eigen::Index i = 0; i < ni; ++i)
            q(i, j) = nd(gen);
    q = detail::orthonormal_columns(q);

    Eigen::VectorXd theta;
    Eigen::MatrixXd x;
    for (std::size_t it = 1; it <= opts.max_iterations; ++it) {
        const Eigen::MatrixXd z = c * q;
        Eigen::MatrixXd h = q.transpose() * z;
        h = 0.5 * (h + h.transpose()).eval();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
        if (es.info() != Eigen::Success)
            throw NumericalError("eigendecompose: Rayleigh-Ritz step failed");
        // Descending order.
        const Eigen::MatrixXd u = es.eigenvectors().rowwise().reverse();
        theta = es.eigenvalues().reverse();
        x = q * u;
        const Eigen::MatrixXd cx = z * u;

        const double scale = std::max(std::abs(theta[0]), std::numeric_limits<double>::min());
        double worst = 0.0;
        for (Eigen::Index i = 0; i < ki; ++i)
            worst = std::max(worst, (cx.col(i) - theta[i] * x.col(i)).norm());
        if (worst <= opts.tolerance * scale) {
            Eigenpairs out;
            out.values = theta.head(ki);
            out.functions = x.leftCols(ki) / std::sqrt(weight);
            for (Eigen::Index i = 0; i < ki; ++i)
                detail::fix_sign(out.functions.col(i));
            out.weight = weight;
            out.iterations = it;
            return out;
        }
        q = detail::orthonormal_columns(cx);
    }
    throw NumericalError("eigendecompose: subspace iteration did not converge in " +
                         std::to_string(opts.max_iterations) + " iterations");
}

inline Eigenpairs eigendecompose(const CovarianceOperator& op, std::size_t k, const EigensolverOptions& opts = {}) {
    return eigendecompose(op.matrix, op.weight, k, opts);
}

struct TruncationPolicy {
    enum class Kind { fixed_modes, energy_target };
    Kind kind = Kind::fixed_modes;
    std::size_t modes = 0;
    double energy = 0.95;

    static TruncationPolicy fixed(std::size_t n) { return {Kind::fixed_modes, n, 0.0}; }
    static TruncationPolicy energy_fraction(double tau) { return {Kind::energy_target, 0, tau}; }
};

struct KLBasis {
    CartesianGrid grid;
    std::vector<double> eigenvalues;   // descending, positive
    Eigen::MatrixXd eigenfunctions;    // n_cells x N
    double energy = 0.0;               // sum of kept eigenvalues / total_trace
    double total_trace = 0.0;

    std::size_t modes() const { return eigenvalues.size(); }
};

// Trace of the discrete operator: the kernel diagonal is constant, so it is
// sigma2 * w * n_cells = sigma2 * |domain| independent of how many modes exist.
inline double analytic_trace(const CartesianGrid& grid, const CovarianceSpec& spec) {
    return spec.sigma2 * grid.cell_area() * static_cast<double>(grid.cell_count());
}

inline KLBasis truncate(const Eigenpairs& pairs, const TruncationPolicy& policy, const CartesianGrid& grid,
                        double total_trace) {
    const auto available = static_cast<std::size_t>(pairs.values.size());
    if (!(total_trace > 0.0))
        throw ArgumentError("truncate: total trace must be positive");
    std::size_t keep = 0;
    if (policy.kind == TruncationPolicy::Kind::fixed_modes) {
        if (policy.modes == 0 || policy.modes > available)
            throw NumericalError("truncate: " + std::to_string(policy.modes) + " modes requested, " +
                                 std::to_string(available) + " computed");
        keep = policy.modes;
    } else {
        if (!(policy.energy > 0.0) || policy.energy > 1.0)
            throw ConfigurationError("truncate: energy target must lie in (0, 1]");
        double acc = 0.0;
        for (std::size_t i = 0; i < available && keep == 0; ++i) {
            acc += pairs.values[static_cast<Eigen::Index>(i)];
            if (acc / total_trace >= policy.energy)
                keep = i + 1;
        }
        if (keep == 0)
            throw NumericalError("truncate: energy target " + std::to_string(policy.energy) +
                                 " not reached with " + std::to_string(available) + " modes; compute more");
    }
    KLBasis b;
    b.grid = grid;
    b.total_trace = total_trace;
    b.eigenvalues.resize(keep);
    double acc = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        const double lam = pairs.values[static_cast<Eigen::Index>(i)];
        if (!(lam > 0.0))
            throw NumericalError("truncate: mode " + std::to_string(i + 1) +
                                 " has non-positive eigenvalue (beyond numerical rank)");
        b.eigenvalues[i] = lam;
        acc += lam;
    }
    b.eigenfunctions = pairs.functions.leftCols(static_cast<Eigen::Index>(keep));
    b.energy = acc / total_trace;
    return b;
}

// Assemble, decompose and truncate in one go. Energy-target policies grow the
// number of computed modes geometrically until the target is met.
inline KLBasis build_kl_basis(const CartesianGrid& grid, const CovarianceSpec& spec, const TruncationPolicy& policy,
                              const EigensolverOptions& opts = {},
                              std::size_t max_cells = default_max_covariance_cells) {
    const CovarianceOperator op = assemble_covariance(grid, spec, max_cells);
    const double trace = analytic_trace(grid, spec);
    const std::size_t n = grid.cell_count();
    if (policy.kind == TruncationPolicy::Kind::fixed_modes)
        return truncate(eigendecompose(op, std::min(policy.modes, n), opts), policy, grid, trace);
    for (std::size_t k = std::min<std::size_t>(16, n);; k = std::min(2 * k, n)) {
        const Eigenpairs pairs = eigendecompose(op, k, opts);
        if (pairs.values.sum() / trace >= policy.energy || k == n)
            return truncate(pairs, policy, grid, trace);
    }
}

// Y(c) = sum_i sqrt(lambda_i) * theta_i * phi_i(c).
inline ScalarField synthesize(const KLBasis& basis, std::span<const double> theta) {
    if (theta.size() != basis.modes())
        throw ArgumentError("synthesize: theta has " + std::to_string(theta.size()) + " entries, basis has " +
                            std::to_string(basis.modes()) + " modes");
    Eigen::VectorXd coeff(static_cast<Eigen::Index>(theta.size()));
    for (std::size_t i = 0; i < theta.size(); ++i)
        coeff[static_cast<Eigen::Index>(i)] = std::sqrt(basis.eigenvalues[i]) * theta[i];
    ScalarField out(basis.grid);
    Eigen::Map<Eigen::VectorXd>(out.values.data(), static_cast<Eigen::Index>(out.size())) =
        basis.eigenfunctions * coeff;
    return out;
}

// ---------------------------------------------------------------------------
// On-disk basis cache. Text format, version 1:
//   msm-kl-basis 1
//   <nx> <ny> <x0> <y0> <x1> <y1>
//   <sigma2> <lx> <ly>
//   <N> <total_trace>
//   N eigenvalues, one per line
//   n_cells lines of N eigenfunction values (cell-major)
// Files are named by a SHA-256 of (grid, spec, k).

inline constexpr int basis_cache_version = 1;

inline std::string basis_cache_key(const CartesianGrid& g, const CovarianceSpec& s, std::size_t k) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << "v" << basis_cache_version << ' '
       << g.nx() << ' ' << g.ny() << ' ' << g.extents().x0 << ' ' << g.extents().y0 << ' ' << g.extents().x1 << ' '
       << g.extents().y1 << ' ' << s.sigma2 << ' ' << s.lx << ' ' << s.ly << ' ' << k;
    return sha256_hex(os.str());
}

inline void write_basis(std::ostream& os, const KLBasis& b, const CovarianceSpec& s) {
    const auto& e = b.grid.extents();
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "msm-kl-basis " << basis_cache_version << '\n'
       << b.grid.nx() << ' ' << b.grid.ny() << ' ' << e.x0 << ' ' << e.y0 << ' ' << e.x1 << ' ' << e.y1 << '\n'
       << s.sigma2 << ' ' << s.lx << ' ' << s.ly << '\n'
       << b.modes() << ' ' << b.total_trace << '\n';
    for (double v : b.eigenvalues)
        os << v << '\n';
    for (Eigen::Index c = 0; c < b.eigenfunctions.rows(); ++c) {
        for (Eigen::Index i = 0; i < b.eigenfunctions.cols(); ++i)
            os << (i ? " " : "") << b.eigenfunctions(c, i);
        os << '\n';
    }
}

inline KLBasis read_basis(std::istream& is, CovarianceSpec* spec_out = nullptr) {
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "msm-kl-basis" || version != basis_cache_version)
        throw DataError("basis file: unrecognized header or version");
    std::size_t nx = 0, ny = 0, n_modes = 0;
    Rectangle e;
    CovarianceSpec s;
    KLBasis b;
    if (!(is >> nx >> ny >> e.x0 >> e.y0 >> e.x1 >> e.y1 >> s.sigma2 >> s.lx >> s.ly >> n_modes >> b.total_trace))
        throw DataError("basis file: truncated header");
    b.grid = CartesianGrid(nx, ny, e);
    b.eigenvalues.resize(n_modes);
    for (auto& v : b.eigenvalues)
        if (!(is >> v))
            throw DataError("basis file: truncated eigenvalues");
    b.eigenfunctions.resize(static_cast<Eigen::Index>(b.grid.cell_count()), static_cast<Eigen::Index>(n_modes));
    for (Eigen::Index c = 0; c < b.eigenfunctions.rows(); ++c)
        for (Eigen::Index i = 0; i < b.eigenfunctions.cols(); ++i)
            if (!(is >> b.eigenfunctions(c, i)))
                throw DataError("basis file: truncated eigenfunctions");
    double acc = 0.0;
    for (double v : b.eigenvalues)
        acc += v;
    b.energy = acc / b.total_trace;
    if (spec_out)
        *spec_out = s;
    return b;
}

// Fixed-N basis through a cache directory (created on demand).
inline KLBasis cached_kl_basis(const std::filesystem::path& dir, const CartesianGrid& grid,
                               const CovarianceSpec& spec, std::size_t modes, const EigensolverOptions& opts = {}) {
    const auto path = dir / ("kl-" + basis_cache_key(grid, spec, modes) + ".txt");
    if (std::filesystem::exists(path)) {
        std::ifstream is(path);
        return read_basis(is);
    }
    KLBasis b = build_kl_basis(grid, spec, TruncationPolicy::fixed(modes), opts);
    std::filesystem::create_directories(dir);
    std::ostringstream os;
    write_basis(os, b, spec);
    write_file_atomic(path, os.str());
    return b;
}

} // namespace msm

#endif
