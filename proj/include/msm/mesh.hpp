#ifndef MSM_MESH_HPP
#define MSM_MESH_HPP

// Uniform Cartesian grids on a rectangle and non-overlapping rectangular
// decompositions into congruent subdomains.
//
// Cell indexing is row-major, index = j * nx + i, with cell (0, 0) at the
// lower-left corner of the domain. Subdomains are indexed the same way.

#include <msm/errors.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace msm {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

struct Rectangle {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 1.0;
    double y1 = 1.0;

    static constexpr Rectangle unit_square() { return {0.0, 0.0, 1.0, 1.0}; }
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    bool contains(Point p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }
};

class CartesianGrid {
public:
    CartesianGrid() : CartesianGrid(1, 1, Rectangle::unit_square()) {}

    CartesianGrid(std::size_t nx, std::size_t ny, Rectangle extents = Rectangle::unit_square())
        : nx_(nx), ny_(ny), extents_(extents) {
        if (nx == 0 || ny == 0)
            throw ConfigurationError("grid: cell counts must be positive (nx=" + std::to_string(nx) +
                                     ", ny=" + std::to_string(ny) + ")");
        if (!(extents.x1 > extents.x0) || !(extents.y1 > extents.y0))
            throw ConfigurationError("grid: degenerate extents");
        hx_ = extents.width() / static_cast<double>(nx);
        hy_ = extents.height() / static_cast<double>(ny);
    }

    std::size_t nx() const { return nx_; }
    std::size_t ny() const { return ny_; }
    std::size_t cell_count() const { return nx_ * ny_; }
    double hx() const { return hx_; }
    double hy() const { return hy_; }
    double cell_area() const { return hx_ * hy_; }
    const Rectangle& extents() const { return extents_; }

    std::size_t index(std::size_t i, std::size_t j) const { return j * nx_ + i; }
    std::pair<std::size_t, std::size_t> ij(std::size_t cell) const { return {cell % nx_, cell / nx_}; }

    Point center(std::size_t i, std::size_t j) const {
        return {extents_.x0 + (static_cast<double>(i) + 0.5) * hx_,
                extents_.y0 + (static_cast<double>(j) + 0.5) * hy_};
    }
    Point center(std::size_t cell) const {
        auto [i, j] = ij(cell);
        return center(i, j);
    }

    // Cell containing p; points on the upper/right boundary map to the last cell.
    std::size_t cell_containing(Point p) const {
        if (!extents_.contains(p))
            throw DataError("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") outside the domain");
        auto axis = [](double v, double lo, double h, std::size_t n) {
            auto k = static_cast<std::size_t>(std::floor((v - lo) / h));
            return std::min(k, n - 1);
        };
        return index(axis(p.x, extents_.x0, hx_, nx_), axis(p.y, extents_.y0, hy_, ny_));
    }

    void check_cell(std::size_t cell) const {
        if (cell >= cell_count())
            throw ArgumentError("cell index " + std::to_string(cell) + " out of range");
    }

    friend bool operator==(const CartesianGrid& a, const CartesianGrid& b) {
        return a.nx_ == b.nx_ && a.ny_ == b.ny_ && a.extents_.x0 == b.extents_.x0 && a.extents_.y0 == b.extents_.y0 &&
               a.extents_.x1 == b.extents_.x1 && a.extents_.y1 == b.extents_.y1;
    }

private:
    std::size_t nx_;
    std::size_t ny_;
    Rectangle extents_;
    double hx_ = 0.0;
    double hy_ = 0.0;
};

inline CartesianGrid build_grid(std::size_t nx, std::size_t ny, Rectangle extents = Rectangle::unit_square()) {
    return CartesianGrid(nx, ny, extents);
}

class DomainDecomposition {
public:
    DomainDecomposition(const CartesianGrid& grid, std::size_t mx, std::size_t my) : grid_(grid), mx_(mx), my_(my) {
        if (mx == 0 || my == 0)
            throw ConfigurationError("decomposition: subdomain counts must be positive");
        if (grid.nx() % mx != 0 || grid.ny() % my != 0)
            throw ConfigurationError("decomposition: mx=" + std::to_string(mx) + " must divide nx=" +
                                     std::to_string(grid.nx()) + " and my=" + std::to_string(my) +
                                     " must divide ny=" + std::to_string(grid.ny()));
        bx_ = grid.nx() / mx;
        by_ = grid.ny() / my;
        subdomain_of_.resize(grid.cell_count());
        cells_of_.assign(mx * my, {});
        for (auto& s : cells_of_)
            s.reserve(bx_ * by_);
        for (std::size_t j = 0; j < grid.ny(); ++j)
            for (std::size_t i = 0; i < grid.nx(); ++i) {
                const std::size_t s = (j / by_) * mx_ + (i / bx_);
                subdomain_of_[grid.index(i, j)] = s;
                cells_of_[s].push_back(grid.index(i, j));
            }
    }

    const CartesianGrid& grid() const { return grid_; }
    std::size_t mx() const { return mx_; }
    std::size_t my() const { return my_; }
    std::size_t subdomain_count() const { return mx_ * my_; }
    // Fine cells per subdomain along each axis.
    std::size_t block_nx() const { return bx_; }
    std::size_t block_ny() const { return by_; }
    double Hx() const { return grid_.extents().width() / static_cast<double>(mx_); }
    double Hy() const { return grid_.extents().height() / static_cast<double>(my_); }

    std::size_t subdomain_of(std::size_t cell) const { return subdomain_of_.at(cell); }
    // The set S_i, ordered row-major within the subdomain.
    const std::vector<std::size_t>& cells_of(std::size_t subdomain) const { return cells_of_.at(subdomain); }

    Rectangle subdomain_extents(std::size_t s) const {
        const auto& e = grid_.extents();
        const double sx = static_cast<double>(s % mx_), sy = static_cast<double>(s / mx_);
        return {e.x0 + sx * Hx(), e.y0 + sy * Hy(), e.x0 + (sx + 1) * Hx(), e.y0 + (sy + 1) * Hy()};
    }

    // Grid with the shape of one subdomain (all subdomains are congruent).
    CartesianGrid local_grid() const { return CartesianGrid(bx_, by_, {0.0, 0.0, Hx(), Hy()}); }

    // Global fine cell of local cell (li, lj) in subdomain s.
    std::size_t global_cell(std::size_t s, std::size_t li, std::size_t lj) const {
        return grid_.index((s % mx_) * bx_ + li, (s / mx_) * by_ + lj);
    }

private:
    CartesianGrid grid_;
    std::size_t mx_;
    std::size_t my_;
    std::size_t bx_ = 0;
    std::size_t by_ = 0;
    std::vector<std::size_t> subdomain_of_;
    std::vector<std::vector<std::size_t>> cells_of_;
};

inline DomainDecomposition build_decomposition(const CartesianGrid& grid, std::size_t mx, std::size_t my) {
    return DomainDecomposition(grid, mx, my);
}

namespace detail {
// Absorbs rounding in distance comparisons against user-given lengths.
inline constexpr double distance_slack = 1e-12;
} // namespace detail

// Distance from a cell center to the nearest interior subdomain interface
// (infinite when there is none). Interior interfaces are full grid lines, so
// the distance to the union of the segments Gamma_ik is a distance to lines.
inline double distance_to_interfaces(const DomainDecomposition& dd, Point c) {
    const auto& e = dd.grid().extents();
    double d = HUGE_VAL;
    for (std::size_t a = 1; a < dd.mx(); ++a)
        d = std::min(d, std::abs(c.x - (e.x0 + static_cast<double>(a) * dd.Hx())));
    for (std::size_t b = 1; b < dd.my(); ++b)
        d = std::min(d, std::abs(c.y - (e.y0 + static_cast<double>(b) * dd.Hy())));
    return d;
}

// Fine cells whose centers lie within hbar of an interior interface, ascending.
inline std::vector<std::size_t> interface_band(const DomainDecomposition& dd, const CartesianGrid& grid, double hbar) {
    if (hbar < 0.0)
        throw ArgumentError("interface_band: hbar must be non-negative");
    std::vector<std::size_t> band;
    const double limit = hbar * (1.0 + detail::distance_slack);
    for (std::size_t c = 0; c < grid.cell_count(); ++c)
        if (distance_to_interfaces(dd, grid.center(c)) <= limit)
            band.push_back(c);
    return band;
}

// Same-subdomain cells inside the ellipse with semi-axes (hbar_x, hbar_y)
// centered at `cell`. Always contains `cell`; ascending order.
inline std::vector<std::size_t> neighborhood(const CartesianGrid& grid, const DomainDecomposition& dd, std::size_t cell,
                                             double hbar_x, double hbar_y) {
    grid.check_cell(cell);
    if (!(hbar_x > 0.0) || !(hbar_y > 0.0))
        throw ArgumentError("neighborhood: semi-axes must be positive");
    const auto [ci, cj] = grid.ij(cell);
    const std::size_t s = dd.subdomain_of(cell);
    const std::size_t i_lo = (s % dd.mx()) * dd.block_nx(), j_lo = (s / dd.mx()) * dd.block_ny();
    const auto reach_x = static_cast<std::size_t>(std::floor(hbar_x / grid.hx())) + 1;
    const auto reach_y = static_cast<std::size_t>(std::floor(hbar_y / grid.hy())) + 1;
    const std::size_t i0 = std::max(i_lo, ci >= reach_x ? ci - reach_x : 0);
    const std::size_t i1 = std::min(i_lo + dd.block_nx() - 1, ci + reach_x);
    const std::size_t j0 = std::max(j_lo, cj >= reach_y ? cj - reach_y : 0);
    const std::size_t j1 = std::min(j_lo + dd.block_ny() - 1, cj + reach_y);

    const Point p = grid.center(cell);
    std::vector<std::size_t> out;
    for (std::size_t j = j0; j <= j1; ++j)
        for (std::size_t i = i0; i <= i1; ++i) {
            const Point q = grid.center(i, j);
            const double u = (q.x - p.x) / hbar_x, v = (q.y - p.y) / hbar_y;
            if (u * u + v * v <= 1.0 + detail::distance_slack)
                out.push_back(grid.index(i, j));
        }
    return out;
}

} // namespace msm

#endif
