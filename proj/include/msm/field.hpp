#ifndef MSM_FIELD_HPP
#define MSM_FIELD_HPP

#include <msm/errors.hpp>
#include <msm/mesh.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace msm {

// One value per cell of a grid: log-permeability, permeability or pressure.
struct ScalarField {
    CartesianGrid grid;
    std::vector<double> values;

    ScalarField() = default;
    explicit ScalarField(const CartesianGrid& g, double fill = 0.0) : grid(g), values(g.cell_count(), fill) {}
    ScalarField(const CartesianGrid& g, std::vector<double> v) : grid(g), values(std::move(v)) {
        if (values.size() != grid.cell_count())
            throw ArgumentError("field: " + std::to_string(values.size()) + " values for " +
                                std::to_string(grid.cell_count()) + " cells");
    }

    double& operator[](std::size_t c) { return values[c]; }
    double operator[](std::size_t c) const { return values[c]; }
    double operator()(std::size_t i, std::size_t j) const { return values[grid.index(i, j)]; }
    std::size_t size() const { return values.size(); }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v))
                return false;
        return true;
    }
};

// Cell-wise exp, mapping log-permeability to permeability.
inline ScalarField exponentiate(const ScalarField& log_field) {
    ScalarField out(log_field.grid);
    for (std::size_t c = 0; c < out.size(); ++c)
        out[c] = std::exp(log_field[c]);
    return out;
}

// Snapshot text format: first line "nx ny", then ny rows of nx values,
// row-major from j = 0. Values are written with round-trip precision.
inline void write_field(std::ostream& os, const ScalarField& f) {
    os << f.grid.nx() << ' ' << f.grid.ny() << '\n';
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t j = 0; j < f.grid.ny(); ++j) {
        for (std::size_t i = 0; i < f.grid.nx(); ++i) {
            if (i)
                os << ' ';
            os << f(i, j);
        }
        os << '\n';
    }
}

// Reads a snapshot onto `extents` (the format does not carry extents).
inline ScalarField read_field(std::istream& is, Rectangle extents = Rectangle::unit_square()) {
    std::size_t nx = 0, ny = 0;
    if (!(is >> nx >> ny))
        throw DataError("field snapshot: missing \"nx ny\" header");
    ScalarField f(CartesianGrid(nx, ny, extents));
    for (std::size_t c = 0; c < f.size(); ++c)
        if (!(is >> f[c]))
            throw DataError("field snapshot: expected " + std::to_string(f.size()) + " values, got " +
                            std::to_string(c));
    return f;
}

inline ScalarField read_field_file(const std::string& path, Rectangle extents = Rectangle::unit_square()) {
    std::ifstream is(path);
    if (!is)
        throw DataError("cannot open field file " + path);
    return read_field(is, extents);
}

} // namespace msm

#endif
