#ifndef MSM_FORWARD_HPP
#define MSM_FORWARD_HPP

// Cell-centered finite-volume discretization of -div(k grad p) = f on a
// Cartesian grid: Dirichlet pressure on the left/right faces, no-flow on the
// top/bottom faces, harmonic-average face transmissibilities. The resulting
// SPD system is solved by Jacobi-preconditioned conjugate gradients.

#include <msm/errors.hpp>
#include <msm/field.hpp>
#include <msm/mesh.hpp>

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace msm {

struct BoundarySpec {
    double left_pressure = 1.0;
    double right_pressure = 0.0;
    std::vector<double> source; // cell-wise f; empty means f = 0
};

struct SolverOptions {
    double tolerance = 1e-10; // on ||r|| / ||b||
    std::size_t max_iterations = 20000;
};

struct BoundaryFluxes {
    double inflow_left = 0.0;   // into the domain through x = x0
    double outflow_right = 0.0; // out of the domain through x = x1
};

// Five-point operator with directional cell permeabilities: x-faces use the
// harmonic mean of kx, y-faces the harmonic mean of ky.
class PressureSystem {
public:
    PressureSystem(const ScalarField& kx, const ScalarField& ky, const BoundarySpec& bc)
        : grid_(kx.grid), bc_(bc) {
        if (!(kx.grid == ky.grid))
            throw ArgumentError("pressure system: directional permeabilities on different grids");
        for (std::size_t c = 0; c < kx.size(); ++c)
            if (!(kx[c] > 0.0) || !(ky[c] > 0.0) || !std::isfinite(kx[c]) || !std::isfinite(ky[c]))
                throw ArgumentError("pressure system: permeability must be positive and finite (cell " +
                                    std::to_string(c) + ")");
        if (!std::isfinite(bc.left_pressure) || !std::isfinite(bc.right_pressure))
            throw ArgumentError("pressure system: Dirichlet values must be finite");
        if (!bc.source.empty() && bc.source.size() != grid_.cell_count())
            throw ArgumentError("pressure system: source has wrong length");

        const std::size_t nx = grid_.nx(), ny = grid_.ny();
        const double hx = grid_.hx(), hy = grid_.hy();
        tx_.assign((nx + 1) * ny, 0.0);
        ty_.assign(nx * (ny + 1), 0.0);
        for (std::size_t j = 0; j < ny; ++j) {
            tx_[j * (nx + 1)] = 2.0 * kx(0, j) * hy / hx;
            tx_[j * (nx + 1) + nx] = 2.0 * kx(nx - 1, j) * hy / hx;
            for (std::size_t i = 1; i < nx; ++i) {
                const double a = kx(i - 1, j), b = kx(i, j);
                tx_[j * (nx + 1) + i] = 2.0 * a * b / (a + b) * hy / hx;
            }
        }
        for (std::size_t j = 1; j < ny; ++j)
            for (std::size_t i = 0; i < nx; ++i) {
                const double a = ky(i, j - 1), b = ky(i, j);
                ty_[j * nx + i] = 2.0 * a * b / (a + b) * hx / hy;
            }
        diag_.assign(grid_.cell_count(), 0.0);
        for (std::size_t j = 0; j < ny; ++j)
            for (std::size_t i = 0; i < nx; ++i)
                diag_[grid_.index(i, j)] =
                    tx_x(i, j) + tx_x(i + 1, j) + ty_y(i, j) + ty_y(i, j + 1);
    }

    const CartesianGrid& grid() const { return grid_; }

    void apply(const std::vector<double>& x, std::vector<double>& y) const {
        const std::size_t nx = grid_.nx(), ny = grid_.ny();
        for (std::size_t j = 0; j < ny; ++j)
            for (std::size_t i = 0; i < nx; ++i) {
                const std::size_t c = grid_.index(i, j);
                double v = diag_[c] * x[c];
                if (i > 0)
                    v -= tx_x(i, j) * x[c - 1];
                if (i + 1 < nx)
                    v -= tx_x(i + 1, j) * x[c + 1];
                if (j > 0)
                    v -= ty_y(i, j) * x[c - nx];
                if (j + 1 < ny)
                    v -= ty_y(i, j + 1) * x[c + nx];
                y[c] = v;
            }
    }

    std::vector<double> rhs() const {
        const std::size_t nx = grid_.nx(), ny = grid_.ny();
        std::vector<double> b(grid_.cell_count(), 0.0);
        if (!bc_.source.empty())
            for (std::size_t c = 0; c < b.size(); ++c)
                b[c] = bc_.source[c] * grid_.cell_area();
        for (std::size_t j = 0; j < ny; ++j) {
            b[grid_.index(0, j)] += tx_x(0, j) * bc_.left_pressure;
            b[grid_.index(nx - 1, j)] += tx_x(nx, j) * bc_.right_pressure;
        }
        return b;
    }

    ScalarField solve(const SolverOptions& opts = {}, std::size_t* iterations = nullptr) const {
        const std::size_t n = grid_.cell_count();
        const std::vector<double> b = rhs();
        const double bnorm = norm(b);
        ScalarField p(grid_, 0.0);
        if (iterations)
            *iterations = 0;
        if (bnorm == 0.0)
            return p;
        std::vector<double>& x = p.values;
        std::vector<double> r = b, z(n), d(n), q(n);
        for (std::size_t c = 0; c < n; ++c)
            z[c] = r[c] / diag_[c];
        d = z;
        double rz = dot(r, z);
        const double target = opts.tolerance * bnorm;
        for (std::size_t it = 1; it <= opts.max_iterations; ++it) {
            apply(d, q);
            const double alpha = rz / dot(d, q);
            for (std::size_t c = 0; c < n; ++c) {
                x[c] += alpha * d[c];
                r[c] -= alpha * q[c];
            }
            if (norm(r) <= target) {
                if (iterations)
                    *iterations = it;
                return p;
            }
            for (std::size_t c = 0; c < n; ++c)
                z[c] = r[c] / diag_[c];
            const double rz_new = dot(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            for (std::size_t c = 0; c < n; ++c)
                d[c] = z[c] + beta * d[c];
        }
        throw NumericalError("pressure solve: CG did not reach tolerance " + std::to_string(opts.tolerance) +
                             " in " + std::to_string(opts.max_iterations) + " iterations");
    }

    BoundaryFluxes fluxes(const ScalarField& p) const {
        BoundaryFluxes f;
        const std::size_t nx = grid_.nx();
        for (std::size_t j = 0; j < grid_.ny(); ++j) {
            f.inflow_left += tx_x(0, j) * (bc_.left_pressure - p(0, j));
            f.outflow_right += tx_x(nx, j) * (p(nx - 1, j) - bc_.right_pressure);
        }
        return f;
    }

private:
    // Transmissibility of the x-face left of cell (i, j) (i == nx is the right boundary).
    double tx_x(std::size_t i, std::size_t j) const { return tx_[j * (grid_.nx() + 1) + i]; }
    // Transmissibility of the y-face below cell (i, j); zero on the no-flow boundaries.
    double ty_y(std::size_t i, std::size_t j) const { return ty_[j * grid_.nx() + i]; }

    static double dot(const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            s += a[i] * b[i];
        return s;
    }
    static double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

    CartesianGrid grid_;
    BoundarySpec bc_;
    std::vector<double> tx_;
    std::vector<double> ty_;
    std::vector<double> diag_;
};

inline ScalarField solve_pressure(const ScalarField& perm, const BoundarySpec& bc, const SolverOptions& opts = {}) {
    return PressureSystem(perm, perm, bc).solve(opts);
}

// Coarse solve with a diagonal permeability tensor (k_xx, k_yy) per cell.
inline ScalarField solve_pressure(const ScalarField& kxx, const ScalarField& kyy, const BoundarySpec& bc,
                                  const SolverOptions& opts) {
    return PressureSystem(kxx, kyy, bc).solve(opts);
}

struct UpscaledPermeability {
    ScalarField kxx;
    ScalarField kyy;
};

namespace detail {

// Effective permeability along x of a block: unit pressure drop left to
// right, sealed top and bottom, k_eff = Q * Lx / (Ly * dp).
inline double effective_x(const ScalarField& block, const SolverOptions& opts) {
    const PressureSystem sys(block, block, BoundarySpec{1.0, 0.0, {}});
    const ScalarField p = sys.solve(opts);
    const BoundaryFluxes f = sys.fluxes(p);
    const double q = 0.5 * (f.inflow_left + f.outflow_right);
    return q * block.grid.extents().width() / block.grid.extents().height();
}

} // namespace detail

// Flow-based upscaling onto `coarse`, whose cells must each cover a whole
// block of fine cells.
inline UpscaledPermeability upscale(const ScalarField& fine_perm, const CartesianGrid& coarse,
                                    const SolverOptions& opts = {1e-12, 20000}) {
    const CartesianGrid& fine = fine_perm.grid;
    if (fine.nx() % coarse.nx() != 0 || fine.ny() % coarse.ny() != 0)
        throw ConfigurationError("upscale: coarse grid " + std::to_string(coarse.nx()) + "x" +
                                 std::to_string(coarse.ny()) + " does not divide fine grid " +
                                 std::to_string(fine.nx()) + "x" + std::to_string(fine.ny()));
    const std::size_t bx = fine.nx() / coarse.nx(), by = fine.ny() / coarse.ny();
    const double lx = static_cast<double>(bx) * fine.hx(), ly = static_cast<double>(by) * fine.hy();
    const CartesianGrid block_x(bx, by, {0.0, 0.0, lx, ly});
    const CartesianGrid block_y(by, bx, {0.0, 0.0, ly, lx}); // transposed: y-flow solved as x-flow
    UpscaledPermeability out{ScalarField(coarse), ScalarField(coarse)};
    ScalarField bxf(block_x), byf(block_y);
    for (std::size_t cj = 0; cj < coarse.ny(); ++cj)
        for (std::size_t ci = 0; ci < coarse.nx(); ++ci) {
            for (std::size_t lj = 0; lj < by; ++lj)
                for (std::size_t li = 0; li < bx; ++li) {
                    const double k = fine_perm(ci * bx + li, cj * by + lj);
                    bxf[block_x.index(li, lj)] = k;
                    byf[block_y.index(lj, li)] = k;
                }
            const std::size_t c = coarse.index(ci, cj);
            out.kxx[c] = detail::effective_x(bxf, opts);
            out.kyy[c] = detail::effective_x(byf, opts);
        }
    return out;
}

// Mean of the fine values over each coarse cell.
inline ScalarField restrict_average(const ScalarField& fine_field, const CartesianGrid& coarse) {
    const CartesianGrid& fine = fine_field.grid;
    if (fine.nx() % coarse.nx() != 0 || fine.ny() % coarse.ny() != 0)
        throw ConfigurationError("restrict_average: coarse grid does not divide fine grid");
    const std::size_t bx = fine.nx() / coarse.nx(), by = fine.ny() / coarse.ny();
    ScalarField out(coarse, 0.0);
    for (std::size_t j = 0; j < fine.ny(); ++j)
        for (std::size_t i = 0; i < fine.nx(); ++i)
            out[coarse.index(i / bx, j / by)] += fine_field(i, j);
    for (double& v : out.values)
        v /= static_cast<double>(bx * by);
    return out;
}

enum class Parity { red, black };

// Observed cells, ascending, with their pressures.
struct ObservationVector {
    std::vector<std::size_t> pattern;
    std::vector<double> values;
};

// Black cells have (i + j) odd; cell (0, 0) is red.
inline std::vector<std::size_t> chessboard_cells(const CartesianGrid& grid, Parity parity = Parity::black) {
    const std::size_t want = parity == Parity::black ? 1 : 0;
    std::vector<std::size_t> cells;
    for (std::size_t j = 0; j < grid.ny(); ++j)
        for (std::size_t i = 0; i < grid.nx(); ++i)
            if ((i + j) % 2 == want)
                cells.push_back(grid.index(i, j));
    return cells;
}

inline ObservationVector observe(const ScalarField& pressure, Parity parity = Parity::black) {
    ObservationVector obs;
    obs.pattern = chessboard_cells(pressure.grid, parity);
    obs.values.reserve(obs.pattern.size());
    for (std::size_t c : obs.pattern)
        obs.values.push_back(pressure[c]);
    return obs;
}

// Sum of squared differences between simulated and reference data.
inline double misfit(const ObservationVector& sim, const ObservationVector& ref) {
    if (sim.pattern != ref.pattern)
        throw ArgumentError("misfit: observation patterns differ");
    double s = 0.0;
    for (std::size_t a = 0; a < sim.values.size(); ++a) {
        const double d = sim.values[a] - ref.values[a];
        s += d * d;
    }
    return s;
}

// Gaussian log-likelihood up to its normalizing constant. An infinite sigma2
// gives the flat likelihood (identically zero).
inline double log_likelihood(const ObservationVector& sim, const ObservationVector& ref, double sigma2) {
    if (!(sigma2 > 0.0))
        throw ArgumentError("log_likelihood: sigma2 must be positive");
    const double m = misfit(sim, ref);
    return std::isinf(sigma2) ? 0.0 : -m / (2.0 * sigma2);
}

} // namespace msm

#endif
