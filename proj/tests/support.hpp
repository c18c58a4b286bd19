#ifndef MSM_TESTS_SUPPORT_HPP
#define MSM_TESTS_SUPPORT_HPP

#include <msm/mcmc.hpp>

#include <cstdint>

namespace msm::testing {

struct ProblemSpec {
    std::size_t n = 16;
    std::size_t coarse = 8;
    std::size_t mx = 2, my = 2;
    std::size_t modes = 20; // total
    std::size_t n_lb = 1;
    double beta = 0.5;
    CovarianceSpec cov{1.0, 0.2, 0.2};
    LikelihoodParams lik{};
    std::uint64_t reference_seed = 99;
};

// Reference drawn from the global KLE; coarse data by block averaging.
inline MsmModel make_model(const ProblemSpec& s) {
    const auto fine = build_grid(s.n, s.n), coarse = build_grid(s.coarse, s.coarse);
    const auto global = build_kl_basis(fine, s.cov, TruncationPolicy::fixed(s.modes));
    RngStream rng(s.reference_seed);
    std::vector<double> theta(s.modes);
    for (double& v : theta)
        v = rng.normal();
    const auto perm = exponentiate(synthesize(global, theta));
    const auto p = solve_pressure(perm, {}, {1e-12, 20000});
    const DomainDecomposition dd(fine, s.mx, s.my);
    KLBasis local = s.mx * s.my == 1 ? global
                                     : build_kl_basis(dd.local_grid(), s.cov,
                                                      TruncationPolicy::fixed(s.modes / (s.mx * s.my)));
    SamplerConfig cfg;
    cfg.beta = s.beta;
    cfg.n_lb = s.n_lb;
    cfg.hbar = 0.5 * std::min(s.cov.lx, s.cov.ly);
    return MsmModel(fine, coarse, dd, std::move(local), cfg, s.lik, observe(p),
                    observe(restrict_average(p, coarse)));
}

} // namespace msm::testing

#endif
