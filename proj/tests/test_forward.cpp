#include <msm/forward.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace msm;

namespace {

const SolverOptions tight{1e-13, 20000};

ScalarField random_perm(const CartesianGrid& g, unsigned seed, double spread = 1.0) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd(0.0, spread);
    ScalarField k(g);
    for (double& v : k.values)
        v = std::exp(nd(gen));
    return k;
}

} // namespace

TEST(Pressure, HomogeneousIsLinear) {
    const auto g = build_grid(16, 16);
    const auto p = solve_pressure(ScalarField(g, 1.0), {}, tight);
    for (std::size_t c = 0; c < g.cell_count(); ++c)
        EXPECT_NEAR(p[c], 1.0 - g.center(c).x, 1e-10);
}

TEST(Pressure, LayeredParallelToFlowIsLinear) {
    const auto g = build_grid(12, 10);
    ScalarField k(g);
    for (std::size_t j = 0; j < 10; ++j)
        for (std::size_t i = 0; i < 12; ++i)
            k[g.index(i, j)] = 1.0 + 7.0 * (j % 3) + 0.5 * j;
    const auto p = solve_pressure(k, {}, tight);
    for (std::size_t c = 0; c < g.cell_count(); ++c)
        EXPECT_NEAR(p[c], 1.0 - g.center(c).x, 1e-10);
}

TEST(Pressure, TwoBlockHarmonicFlux) {
    const auto g = build_grid(16, 8);
    ScalarField k(g);
    for (std::size_t c = 0; c < g.cell_count(); ++c)
        k[c] = g.center(c).x < 0.5 ? 1.0 : 3.0;
    const PressureSystem sys(k, k, {});
    const auto p = sys.solve(tight);
    const auto f = sys.fluxes(p);
    EXPECT_NEAR(f.inflow_left, 1.5, 1e-8);
    EXPECT_NEAR(f.outflow_right, 1.5, 1e-8);
}

TEST(Pressure, ConservationOnRandomField) {
    const auto g = build_grid(20, 14);
    const auto k = random_perm(g, 5, 1.5);
    const PressureSystem sys(k, k, {});
    const auto f = sys.fluxes(sys.solve(tight));
    EXPECT_NEAR(f.inflow_left, f.outflow_right, 1e-8 * std::abs(f.inflow_left));
}

TEST(Pressure, ScaleInvariance) {
    const auto g = build_grid(16, 16);
    const auto k = random_perm(g, 9);
    ScalarField k7 = k;
    for (double& v : k7.values)
        v *= 7.0;
    const auto a = solve_pressure(k, {}, tight), b = solve_pressure(k7, {}, tight);
    for (std::size_t c = 0; c < g.cell_count(); ++c)
        EXPECT_NEAR(a[c], b[c], 1e-10);
}

TEST(Pressure, MirrorSymmetry) {
    const auto g = build_grid(16, 12);
    const auto k = random_perm(g, 13);
    ScalarField m(g);
    for (std::size_t j = 0; j < 12; ++j)
        for (std::size_t i = 0; i < 16; ++i)
            m[g.index(15 - i, j)] = k(i, j);
    const auto p = solve_pressure(k, {1.0, 0.0, {}}, tight);
    const auto q = solve_pressure(m, {0.0, 1.0, {}}, tight);
    for (std::size_t j = 0; j < 12; ++j)
        for (std::size_t i = 0; i < 16; ++i)
            EXPECT_NEAR(q(15 - i, j), p(i, j), 1e-9);
}

TEST(Pressure, RejectsBadPermeability) {
    const auto g = build_grid(4, 4);
    ScalarField k(g, 1.0);
    k[3] = 0.0;
    EXPECT_THROW(solve_pressure(k, {}), ArgumentError);
    k[3] = std::nan("");
    EXPECT_THROW(solve_pressure(k, {}), ArgumentError);
}

TEST(Pressure, IterationCapReported) {
    const auto g = build_grid(32, 32);
    EXPECT_THROW(solve_pressure(random_perm(g, 1), BoundarySpec{}, SolverOptions{1e-14, 3}), NumericalError);
}

TEST(Upscale, Homogeneous) {
    const auto g = build_grid(16, 16);
    const auto up = upscale(ScalarField(g, 2.5), build_grid(4, 4));
    for (std::size_t c = 0; c < 16; ++c) {
        EXPECT_NEAR(up.kxx[c], 2.5, 1e-10);
        EXPECT_NEAR(up.kyy[c], 2.5, 1e-10);
    }
}

TEST(Upscale, LaminateMeans) {
    const auto g = build_grid(2, 2);
    ScalarField k(g);
    k[g.index(0, 0)] = 1.0;
    k[g.index(1, 0)] = 1.0;
    k[g.index(0, 1)] = 9.0;
    k[g.index(1, 1)] = 9.0;
    const auto up = upscale(k, build_grid(1, 1));
    EXPECT_NEAR(up.kxx[0], 5.0, 1e-10);
    EXPECT_NEAR(up.kyy[0], 1.8, 1e-10);
}

TEST(Upscale, IdentityWhenGridsCoincide) {
    const auto g = build_grid(8, 8);
    const auto k = random_perm(g, 21);
    const auto up = upscale(k, g);
    for (std::size_t c = 0; c < 64; ++c) {
        EXPECT_NEAR(up.kxx[c], k[c], 1e-12 * k[c]);
        EXPECT_NEAR(up.kyy[c], k[c], 1e-12 * k[c]);
    }
}

TEST(Upscale, BoundedByMeans) {
    const auto g = build_grid(16, 16);
    const auto k = random_perm(g, 33, 1.2);
    const auto coarse = build_grid(4, 4);
    const auto up = upscale(k, coarse);
    for (std::size_t cj = 0; cj < 4; ++cj)
        for (std::size_t ci = 0; ci < 4; ++ci) {
            double arith = 0.0, harm = 0.0;
            for (std::size_t j = 0; j < 4; ++j)
                for (std::size_t i = 0; i < 4; ++i) {
                    const double v = k(4 * ci + i, 4 * cj + j);
                    arith += v / 16;
                    harm += 1.0 / (16 * v);
                }
            harm = 1.0 / harm;
            const auto c = coarse.index(ci, cj);
            EXPECT_GE(up.kxx[c], harm * (1 - 1e-10));
            EXPECT_LE(up.kxx[c], arith * (1 + 1e-10));
            EXPECT_GE(up.kyy[c], harm * (1 - 1e-10));
            EXPECT_LE(up.kyy[c], arith * (1 + 1e-10));
        }
}

TEST(Upscale, RejectsNonDivisible) {
    EXPECT_THROW(upscale(ScalarField(build_grid(16, 16), 1.0), build_grid(5, 4)), ConfigurationError);
}

TEST(Observe, Patterns) {
    EXPECT_EQ(chessboard_cells(build_grid(16, 16)).size(), 128u);
    const auto g = build_grid(2, 2);
    EXPECT_EQ(chessboard_cells(g), (std::vector<std::size_t>{g.index(1, 0), g.index(0, 1)}));
    const auto obs = observe(ScalarField(build_grid(6, 4), 0.3));
    for (double v : obs.values)
        EXPECT_EQ(v, 0.3);
    EXPECT_EQ(chessboard_cells(g, Parity::red), (std::vector<std::size_t>{g.index(0, 0), g.index(1, 1)}));
}

TEST(Likelihood, Examples) {
    ObservationVector a{{1}, {0.5}}, b{{1}, {0.4}};
    EXPECT_EQ(log_likelihood(a, a, 1e-3), 0.0);
    EXPECT_NEAR(log_likelihood(a, b, 1e-3), -5.0, 1e-10);
    ObservationVector c{{1, 2}, {0.5, 0.1}}, d{{1, 2}, {0.3, 0.4}}, e{{1, 2}, {0.1, 0.7}};
    EXPECT_NEAR(log_likelihood(c, e, 0.01), 4.0 * log_likelihood(c, d, 0.01), 1e-12);
    EXPECT_EQ(log_likelihood(a, b, std::numeric_limits<double>::infinity()), 0.0);
    EXPECT_THROW(log_likelihood(a, ObservationVector{{2}, {0.5}}, 1.0), ArgumentError);
}

TEST(Restrict, AveragesBlocks) {
    const auto g = build_grid(4, 2);
    ScalarField f(g, std::vector<double>{1, 3, 5, 7, 2, 4, 6, 8});
    const auto r = restrict_average(f, build_grid(2, 1));
    EXPECT_DOUBLE_EQ(r[0], 2.5);
    EXPECT_DOUBLE_EQ(r[1], 6.5);
}
