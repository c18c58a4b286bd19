#ifndef MSM_CONDITIONING_HPP
#define MSM_CONDITIONING_HPP

// Conditioning of KLE samples on sparse log-permeability measurements:
// a zero-mean simple-kriging field plus a KLE perturbation whose coordinates
// are projected onto the nullspace of the data matrix A = phi(x_hat)^T sqrt(D).
//
// Fields are piecewise constant, so measurements are attached to the cell that
// contains them: kriging uses the containing-cell centers as data sites and
// eigenfunctions are evaluated by containing-cell lookup.

#include <msm/errors.hpp>
#include <msm/field.hpp>
#include <msm/kle.hpp>
#include <msm/mesh.hpp>
#include <msm/sampler.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

namespace msm {

struct MeasurementSet {
    std::vector<Point> locations;
    std::vector<double> values;

    std::size_t size() const { return locations.size(); }

    void validate() const {
        if (locations.size() != values.size())
            throw DataError("measurements: " + std::to_string(locations.size()) + " locations but " +
                            std::to_string(values.size()) + " values");
        for (std::size_t a = 0; a < size(); ++a) {
            if (!std::isfinite(values[a]) || !std::isfinite(locations[a].x) || !std::isfinite(locations[a].y))
                throw DataError("measurements: non-finite entry at row " + std::to_string(a));
            for (std::size_t b = 0; b < a; ++b)
                if (locations[a].x == locations[b].x && locations[a].y == locations[b].y)
                    throw DataError("measurements: duplicate location at rows " + std::to_string(b) + " and " +
                                    std::to_string(a));
        }
    }
};

// Zero-mean simple kriging: Y_hat(x) = r(x)^T C^{-1} y.
class SimpleKriging {
public:
    SimpleKriging(const MeasurementSet& meas, const CovarianceSpec& spec) : sites_(meas.locations), spec_(spec) {
        meas.validate();
        spec.validate();
        const auto m = static_cast<Eigen::Index>(meas.size());
        Eigen::MatrixXd c(m, m);
        for (Eigen::Index a = 0; a < m; ++a)
            for (Eigen::Index b = 0; b < m; ++b)
                c(a, b) = covariance(sites_[static_cast<std::size_t>(a)], sites_[static_cast<std::size_t>(b)], spec);
        Eigen::Map<const Eigen::VectorXd> y(meas.values.data(), m);
        Eigen::LLT<Eigen::MatrixXd> llt(c);
        if (llt.info() != Eigen::Success) {
            c.diagonal().array() += 1e-10 * spec.sigma2;
            llt.compute(c);
            if (llt.info() != Eigen::Success)
                throw DataError("kriging: covariance among measurement sites is singular (near-duplicate points)");
        }
        weights_ = llt.solve(y);
        cov_ = std::move(c);
    }

    double evaluate(Point x) const {
        double v = 0.0;
        for (std::size_t a = 0; a < sites_.size(); ++a)
            v += covariance(x, sites_[a], spec_) * weights_[static_cast<Eigen::Index>(a)];
        return v;
    }

    const Eigen::MatrixXd& site_covariance() const { return cov_; }
    const Eigen::VectorXd& weights() const { return weights_; }

private:
    std::vector<Point> sites_;
    CovarianceSpec spec_;
    Eigen::MatrixXd cov_;
    Eigen::VectorXd weights_;
};

// Measurements moved to the centers of their containing cells. Two
// measurements in one cell cannot both be honored by a piecewise-constant field.
inline MeasurementSet snap_to_cells(const MeasurementSet& meas, const CartesianGrid& grid) {
    meas.validate();
    MeasurementSet out;
    std::set<std::size_t> seen;
    for (std::size_t a = 0; a < meas.size(); ++a) {
        const std::size_t c = grid.cell_containing(meas.locations[a]);
        if (!seen.insert(c).second)
            throw DataError("measurements: two points fall in cell " + std::to_string(c));
        out.locations.push_back(grid.center(c));
        out.values.push_back(meas.values[a]);
    }
    return out;
}

// Kriged field on cell centers; exact at measurement cells.
inline ScalarField krige(const MeasurementSet& meas, const CartesianGrid& grid, const CovarianceSpec& spec) {
    ScalarField out(grid, 0.0);
    if (meas.size() == 0)
        return out;
    const SimpleKriging k(snap_to_cells(meas, grid), spec);
    for (std::size_t c = 0; c < grid.cell_count(); ++c)
        out[c] = k.evaluate(grid.center(c));
    return out;
}

// A(a, i) = phi_i(cell containing x_a) * sqrt(lambda_i).
inline Eigen::MatrixXd data_matrix(const KLBasis& basis, const MeasurementSet& meas) {
    const auto m = static_cast<Eigen::Index>(meas.size());
    const auto n = static_cast<Eigen::Index>(basis.modes());
    Eigen::MatrixXd a(m, n);
    for (Eigen::Index r = 0; r < m; ++r) {
        const auto c = static_cast<Eigen::Index>(basis.grid.cell_containing(meas.locations[static_cast<std::size_t>(r)]));
        for (Eigen::Index i = 0; i < n; ++i)
            a(r, i) = basis.eigenfunctions(c, i) * std::sqrt(basis.eigenvalues[static_cast<std::size_t>(i)]);
    }
    return a;
}

// Orthogonal projector onto null(A), held as an orthonormal basis V_r of
// row(A): P theta = theta - V_r V_r^T theta. Rank deficiency is handled by
// dropping singular values below the usual SVD rank threshold.
class NullspaceProjector {
public:
    NullspaceProjector() = default;
    explicit NullspaceProjector(const Eigen::MatrixXd& a) : dim_(a.cols()) {
        if (a.rows() == 0)
            return;
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
        const Eigen::VectorXd& s = svd.singularValues();
        const double tol = static_cast<double>(std::max(a.rows(), a.cols())) *
                           std::numeric_limits<double>::epsilon() * (s.size() ? s[0] : 0.0);
        Eigen::Index rank = 0;
        while (rank < s.size() && s[rank] > tol)
            ++rank;
        row_space_ = svd.matrixV().leftCols(rank);
    }

    Eigen::Index dimension() const { return dim_; }
    Eigen::Index rank() const { return row_space_.cols(); }

    void apply_in_place(std::span<double> theta) const {
        if (static_cast<Eigen::Index>(theta.size()) != dim_)
            throw ArgumentError("project: theta has " + std::to_string(theta.size()) + " entries, expected " +
                                std::to_string(dim_));
        if (rank() == 0)
            return;
        Eigen::Map<Eigen::VectorXd> t(theta.data(), dim_);
        t -= row_space_ * (row_space_.transpose() * t);
    }

    std::vector<double> apply(std::span<const double> theta) const {
        std::vector<double> out(theta.begin(), theta.end());
        apply_in_place(out);
        return out;
    }

private:
    Eigen::Index dim_ = 0;
    Eigen::MatrixXd row_space_;
};

inline std::vector<double> project(std::span<const double> theta, const Eigen::MatrixXd& a) {
    if (a.rows() > 0 && static_cast<Eigen::Index>(theta.size()) != a.cols())
        throw ArgumentError("project: dimension mismatch");
    if (a.rows() == 0)
        return {theta.begin(), theta.end()};
    return NullspaceProjector(a).apply(theta);
}

struct ConditioningOperator {
    Eigen::MatrixXd data_matrix;
    ScalarField kriged;
    NullspaceProjector projector;
};

inline ConditioningOperator build_conditioning(const KLBasis& basis, const MeasurementSet& meas,
                                               const CovarianceSpec& spec) {
    ConditioningOperator op;
    op.data_matrix = data_matrix(basis, meas);
    op.kriged = krige(meas, basis.grid, spec);
    op.projector = NullspaceProjector(op.data_matrix);
    return op;
}

// Y = Y_hat + sum_i sqrt(lambda_i) phi_i theta_hat_i, theta_hat = P theta.
inline ScalarField conditioned_synthesize(const KLBasis& basis, std::span<const double> theta,
                                          const ConditioningOperator& op) {
    if (theta.size() != basis.modes())
        throw ArgumentError("conditioned_synthesize: theta length does not match basis");
    if (!(op.kriged.grid == basis.grid))
        throw ArgumentError("conditioned_synthesize: kriged field on a different grid");
    std::vector<double> t(theta.begin(), theta.end());
    if (op.projector.rank() > 0)
        op.projector.apply_in_place(t);
    ScalarField y = synthesize(basis, t);
    for (std::size_t c = 0; c < y.size(); ++c)
        y[c] += op.kriged[c];
    return y;
}

// Conditioning composed with the multiscale prior: global kriged field, and
// one projector per subdomain built from the local basis and the measurements
// inside that subdomain.
struct MultiscaleConditioning {
    ScalarField kriged;
    std::vector<NullspaceProjector> projectors; // one per subdomain (rank 0 if no data)
    std::vector<std::size_t> measurement_cells; // global cells holding data

    void project(ThetaVector& theta) const {
        for (std::size_t s = 0; s < projectors.size(); ++s)
            if (projectors[s].rank() > 0)
                projectors[s].apply_in_place(theta.subdomain(s));
    }
};

inline MultiscaleConditioning build_multiscale_conditioning(const DomainDecomposition& dd, const KLBasis& local_basis,
                                                             const MeasurementSet& meas, const CovarianceSpec& spec) {
    MultiscaleConditioning mc;
    mc.kriged = krige(meas, dd.grid(), spec);
    std::vector<MeasurementSet> local(dd.subdomain_count());
    for (std::size_t a = 0; a < meas.size(); ++a) {
        const std::size_t cell = dd.grid().cell_containing(meas.locations[a]);
        mc.measurement_cells.push_back(cell);
        const std::size_t s = dd.subdomain_of(cell);
        const auto [i, j] = dd.grid().ij(cell);
        const std::size_t li = i % dd.block_nx(), lj = j % dd.block_ny();
        local[s].locations.push_back(local_basis.grid.center(li, lj));
        local[s].values.push_back(meas.values[a]);
    }
    mc.projectors.resize(dd.subdomain_count());
    for (std::size_t s = 0; s < dd.subdomain_count(); ++s)
        if (local[s].size())
            mc.projectors[s] = NullspaceProjector(data_matrix(local_basis, local[s]));
    return mc;
}

// CSV with header "x,y,log_permeability".
inline MeasurementSet read_measurements(std::istream& is) {
    std::string line;
    if (!std::getline(is, line))
        throw DataError("measurement file: empty");
    if (line.find("x") == std::string::npos || line.find("log_permeability") == std::string::npos)
        throw DataError("measurement file: header \"x,y,log_permeability\" required");
    MeasurementSet m;
    std::size_t row = 1;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty() || line == "\r")
            continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        Point p;
        double v = 0.0;
        if (!(ls >> p.x >> p.y >> v))
            throw DataError("measurement file: malformed row " + std::to_string(row));
        m.locations.push_back(p);
        m.values.push_back(v);
    }
    m.validate();
    return m;
}

inline MeasurementSet read_measurements_file(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw DataError("cannot open measurement file " + path);
    return read_measurements(is);
}

inline void write_measurements(std::ostream& os, const MeasurementSet& m) {
    os << "x,y,log_permeability\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t a = 0; a < m.size(); ++a)
        os << m.locations[a].x << ',' << m.locations[a].y << ',' << m.values[a] << '\n';
}

} // namespace msm

#endif
