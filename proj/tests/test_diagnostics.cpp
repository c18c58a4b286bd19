#include <msm/diagnostics.hpp>

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

using namespace msm;

namespace {

std::vector<Eigen::MatrixXd> random_chains(std::mt19937_64& gen, std::size_t m, std::size_t l, std::size_t n,
                                           double spread) {
    std::normal_distribution<double> nd;
    std::vector<Eigen::MatrixXd> out;
    for (std::size_t j = 0; j < m; ++j) {
        Eigen::MatrixXd c(l, n);
        Eigen::RowVectorXd offset(n);
        for (std::size_t i = 0; i < n; ++i)
            offset[i] = spread * nd(gen);
        for (std::size_t t = 0; t < l; ++t)
            for (std::size_t i = 0; i < n; ++i)
                c(t, i) = nd(gen) * (1.0 + i) + offset[i] + (i > 0 ? 0.5 * c(t, i - 1) : 0.0);
        out.push_back(c);
    }
    return out;
}

// Generalized eigenproblem B v = lambda l W v solved densely.
double mpsrf_oracle(const std::vector<Eigen::MatrixXd>& chains) {
    const double m = chains.size(), l = chains[0].rows();
    const Eigen::Index n = chains[0].cols();
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n), b = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd grand = Eigen::VectorXd::Zero(n);
    std::vector<Eigen::VectorXd> means;
    for (const auto& c : chains) {
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(n);
        for (Eigen::Index t = 0; t < c.rows(); ++t)
            mu += c.row(t).transpose();
        mu /= l;
        means.push_back(mu);
        grand += mu / m;
        for (Eigen::Index t = 0; t < c.rows(); ++t) {
            const Eigen::VectorXd d = c.row(t).transpose() - mu;
            w += d * d.transpose();
        }
    }
    w /= m * (l - 1);
    for (const auto& mu : means)
        b += (mu - grand) * (mu - grand).transpose();
    b *= l / (m - 1);
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(b / l, w);
    const double lam = ges.eigenvalues().maxCoeff();
    return std::sqrt((l - 1) / l + (m + 1) / m * lam);
}

} // namespace

TEST(Covariances, HandComputedScalar) {
    std::vector<Eigen::MatrixXd> chains{Eigen::MatrixXd(2, 1), Eigen::MatrixXd(2, 1)};
    chains[0] << 0, 2;
    chains[1] << 1, 3;
    const auto cov = chain_covariances(chains);
    EXPECT_NEAR(cov.within(0, 0), 2.0, 1e-12);
    EXPECT_NEAR(cov.between(0, 0), 1.0, 1e-12);
    const auto p = psrf(cov);
    EXPECT_NEAR(p.values[0], std::sqrt(1.75 / 2.0), 1e-10);
    EXPECT_NEAR(p.values[0], 0.93541, 1e-5);
    EXPECT_NEAR(mpsrf(cov), p.values[0], 1e-10);
}

TEST(Covariances, ConstantChainsAreDegenerate) {
    std::vector<Eigen::MatrixXd> chains(3, Eigen::MatrixXd::Constant(10, 2, 4.2));
    const auto cov = chain_covariances(chains);
    EXPECT_EQ(cov.within.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(cov.between.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_THROW(psrf(cov), DegenerateInputError);
}

TEST(Covariances, IdenticalChains) {
    std::mt19937_64 gen(1);
    auto base = random_chains(gen, 1, 50, 3, 0.0)[0];
    std::vector<Eigen::MatrixXd> chains(4, base);
    const auto cov = chain_covariances(chains);
    EXPECT_LT(cov.between.cwiseAbs().maxCoeff(), 1e-12);
    const Eigen::MatrixXd centered = base.rowwise() - base.colwise().mean();
    const Eigen::MatrixXd sample = centered.transpose() * centered / 49.0;
    EXPECT_LT((cov.within - sample).cwiseAbs().maxCoeff(), 1e-12);
    const double expect = std::sqrt(49.0 / 50.0);
    for (double v : psrf(cov).values)
        EXPECT_NEAR(v, expect, 1e-12);
    EXPECT_NEAR(mpsrf(cov), expect, 1e-12);
}

TEST(Covariances, RejectsTooFew) {
    std::vector<Eigen::MatrixXd> one{Eigen::MatrixXd::Zero(5, 2)};
    EXPECT_THROW(chain_covariances(one), ArgumentError);
    std::vector<Eigen::MatrixXd> short_chains(2, Eigen::MatrixXd::Zero(1, 2));
    EXPECT_THROW(chain_covariances(short_chains), ArgumentError);
}

TEST(Covariances, PositiveSemidefinite) {
    std::mt19937_64 gen(2);
    for (int k = 0; k < 20; ++k) {
        const auto cov = chain_covariances(random_chains(gen, 4, 30, 5, 1.0));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ew(cov.within), eb(cov.between);
        EXPECT_GE(ew.eigenvalues().minCoeff(), -1e-10);
        EXPECT_GE(eb.eigenvalues().minCoeff(), -1e-10);
        EXPECT_LT((cov.within - cov.within.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(Psrf, LargeSampleLimit) {
    std::mt19937_64 gen(3);
    const auto chains = random_chains(gen, 4, 20000, 2, 0.0);
    for (double v : psrf(chains).values)
        EXPECT_NEAR(v, 1.0, 5e-3);
}

TEST(Mpsrf, OneDimensionEqualsPsrf) {
    std::mt19937_64 gen(4);
    const auto chains = random_chains(gen, 3, 40, 1, 1.0);
    EXPECT_NEAR(mpsrf(chains), psrf(chains).max, 1e-12);
}

TEST(Mpsrf, MatchesGeneralizedEigenOracle) {
    std::mt19937_64 gen(5);
    for (int k = 0; k < 20; ++k) {
        const auto chains = random_chains(gen, 4, 25, 3, 1.0);
        const double ref = mpsrf_oracle(chains);
        EXPECT_NEAR(mpsrf(chains), ref, 1e-8 * ref);
    }
}

TEST(Mpsrf, BoundsMaxPsrf) {
    std::mt19937_64 gen(6);
    for (int k = 0; k < 100; ++k) {
        const auto chains = random_chains(gen, 2 + k % 4, 10 + k, 1 + k % 6, 0.3 * (k % 5));
        EXPECT_GE(mpsrf(chains), psrf(chains).max - 1e-12);
    }
}

TEST(Mpsrf, AffineInvariance) {
    std::mt19937_64 gen(7);
    std::normal_distribution<double> nd;
    const auto chains = random_chains(gen, 4, 60, 4, 1.0);
    Eigen::MatrixXd a(4, 4);
    for (int i = 0; i < 16; ++i)
        a(i) = nd(gen);
    a += 3.0 * Eigen::MatrixXd::Identity(4, 4);
    Eigen::RowVectorXd shift(4);
    shift << 1.0, -2.0, 0.5, 7.0;
    Eigen::VectorXd diag(4);
    diag << 2.0, -0.5, 10.0, 0.1;
    std::vector<Eigen::MatrixXd> full, scaled;
    for (const auto& c : chains) {
        full.push_back((c * a.transpose()).rowwise() + shift);
        scaled.push_back((c * diag.asDiagonal()).rowwise() + shift);
    }
    EXPECT_NEAR(mpsrf(full), mpsrf(chains), 1e-8);
    const auto p0 = psrf(chains), p1 = psrf(scaled);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(p0.values[i], p1.values[i], 1e-8);
}

TEST(Mpsrf, SingularWithinGetsJitter) {
    std::mt19937_64 gen(8);
    auto chains = random_chains(gen, 3, 30, 2, 0.5);
    for (auto& c : chains)
        c.col(1) = c.col(0); // exactly collinear coordinates
    EXPECT_TRUE(std::isfinite(mpsrf(chains)));
}

TEST(Psrf, ZeroVarianceCoordinateExcluded) {
    std::mt19937_64 gen(9);
    auto chains = random_chains(gen, 3, 30, 3, 0.5);
    for (auto& c : chains)
        c.col(2).setConstant(1.0);
    const auto p = psrf(chains);
    ASSERT_EQ(p.excluded, std::vector<std::size_t>{2});
    EXPECT_TRUE(std::isnan(p.values[2]));
    EXPECT_EQ(p.max, std::max(p.values[0], p.values[1]));
}

namespace {

ChainRecord record_from(const Eigen::MatrixXd& m, std::size_t id) {
    ChainRecord r;
    r.chain_id = id;
    r.dimension = m.cols();
    for (Eigen::Index t = 0; t < m.rows(); ++t) {
        for (Eigen::Index i = 0; i < m.cols(); ++i)
            r.theta.push_back(m(t, i));
        r.misfit.push_back(std::abs(m(t, 0)));
        r.accepted.push_back(t % 2);
        r.coarse_accepted.push_back(1);
    }
    return r;
}

} // namespace

TEST(Report, CumulativeMatchesDirect) {
    std::mt19937_64 gen(10);
    const auto chains = random_chains(gen, 4, 2500, 3, 0.4);
    std::vector<ChainRecord> recs;
    for (std::size_t j = 0; j < 4; ++j)
        recs.push_back(record_from(chains[j], j));
    const auto rep = diagnostics_report(recs);
    ASSERT_EQ(rep.checkpoints, (std::vector<std::size_t>{1000, 2000, 2500}));
    for (std::size_t k = 0; k < rep.checkpoints.size(); ++k) {
        std::vector<Eigen::MatrixXd> prefix;
        for (const auto& c : chains)
            prefix.push_back(c.topRows(rep.checkpoints[k]));
        EXPECT_NEAR(rep.psrf_max[k], psrf(prefix).max, 1e-10);
        EXPECT_NEAR(rep.mpsrf[k], mpsrf(prefix), 1e-9);
    }
    for (double a : rep.acceptance_rates)
        EXPECT_NEAR(a, 0.5, 1e-12);
}

TEST(Report, BurnIn) {
    std::mt19937_64 gen(11);
    const auto chains = random_chains(gen, 3, 2000, 2, 0.4);
    std::vector<ChainRecord> recs;
    for (std::size_t j = 0; j < 3; ++j)
        recs.push_back(record_from(chains[j], j));
    DiagnosticsOptions opts;
    opts.burn_in_fraction = 0.25;
    const auto rep = diagnostics_report(recs, opts);
    std::vector<Eigen::MatrixXd> tail;
    for (const auto& c : chains)
        tail.push_back(c.bottomRows(1500));
    EXPECT_EQ(rep.checkpoints.back(), 2000u);
    EXPECT_NEAR(rep.mpsrf.back(), mpsrf(tail), 1e-9);
}

TEST(ErrorCurve, RepeatsOnRejection) {
    ChainRecord r;
    r.dimension = 1;
    r.misfit = {0.5, 0.5, 0.2};
    r.accepted = {1, 0, 1};
    EXPECT_EQ(error_curve(r), (std::vector<double>{0.5, 0.5, 0.2}));
    EXPECT_THROW(error_curve(ChainRecord{}), ArgumentError);
}

TEST(Report, CsvLayout) {
    DiagnosticsReport rep;
    rep.checkpoints = {1000};
    rep.psrf_max = {1.5};
    rep.mpsrf = {2.0};
    std::ostringstream os;
    write_diagnostics_csv(os, rep);
    EXPECT_EQ(os.str(), "iteration,psrf_max,mpsrf\n1000,1.5,2\n");
}
