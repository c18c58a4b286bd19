#ifndef MSM_HARNESS_HPP
#define MSM_HARNESS_HPP

// Experiment definitions, synthetic reference data, multi-chain runs with
// manifests, run comparison and a conditioning demonstration.
//
// Relative paths inside a config are resolved against the working directory,
// except for the config.ini stored in a run directory, which is resolved
// against that directory (see load_run_config).

#include <msm/conditioning.hpp>
#include <msm/diagnostics.hpp>
#include <msm/errors.hpp>
#include <msm/field.hpp>
#include <msm/forward.hpp>
#include <msm/hash.hpp>
#include <msm/io.hpp>
#include <msm/kle.hpp>
#include <msm/mcmc.hpp>
#include <msm/mesh.hpp>
#include <msm/sampler.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace msm {

namespace fs = std::filesystem;

enum class CoarseData { averaged, upscaled };

struct ExperimentConfig {
    std::string name = "experiment";
    std::size_t nx = 16, ny = 16;
    std::size_t coarse_nx = 8, coarse_ny = 8;
    std::size_t mx = 1, my = 1;
    CovarianceSpec covariance;
    std::size_t modes = 20;          // total N over all subdomains
    std::optional<double> energy;    // if set, N is the smallest global truncation reaching it
    std::string kle_cache;           // optional basis cache directory
    double beta = 0.5;
    std::size_t n_lb = 1;
    std::optional<double> hbar;      // unset: min(lx, ly) / 2
    NeighborhoodShape shape = NeighborhoodShape::circle;
    AveragingRule rule = AveragingRule::variance_preserving;
    LikelihoodParams likelihood;
    double solver_tolerance = 1e-10;
    std::size_t chains = 4;
    std::size_t iterations = 20000;
    std::uint64_t seed = 1;
    std::size_t workers = 0;
    std::size_t checkpoint_every = 1000;
    std::string reference_dir = "reference";
    std::uint64_t reference_seed = 2024;
    std::optional<std::size_t> reference_modes; // unset: the resolved N
    CoarseData coarse_data = CoarseData::averaged;
    std::size_t measurement_count = 0;          // measurements drawn by generate_reference
    bool conditioning = false;
    std::string measurements;                   // unset: <reference_dir>/measurements.csv
    std::string output_dir = "run";
    double burn_in = 0.0;
    double threshold = 1.2;

    std::size_t subdomains() const { return mx * my; }
    double resolved_hbar() const { return hbar ? *hbar : 0.5 * std::min(covariance.lx, covariance.ly); }

    // Every check that needs no computation; messages name the offending fields.
    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigurationError("config: " + m); };
        auto str = [](auto v) { return std::to_string(v); };
        if (nx == 0 || ny == 0)
            fail("grid.nx and grid.ny must be positive");
        if (coarse_nx == 0 || coarse_ny == 0)
            fail("coarse.nx and coarse.ny must be positive");
        if (nx % coarse_nx != 0)
            fail("coarse.nx=" + str(coarse_nx) + " does not divide grid.nx=" + str(nx));
        if (ny % coarse_ny != 0)
            fail("coarse.ny=" + str(coarse_ny) + " does not divide grid.ny=" + str(ny));
        if (mx == 0 || my == 0)
            fail("decomposition.mx and decomposition.my must be positive");
        if (nx % mx != 0)
            fail("decomposition.mx=" + str(mx) + " does not divide grid.nx=" + str(nx));
        if (ny % my != 0)
            fail("decomposition.my=" + str(my) + " does not divide grid.ny=" + str(ny));
        try {
            covariance.validate();
        } catch (const std::exception& e) {
            fail(std::string("covariance: ") + e.what());
        }
        if (energy) {
            if (!(*energy > 0.0 && *energy <= 1.0))
                fail("kle.energy must lie in (0, 1]");
        } else {
            if (modes == 0)
                fail("kle.modes must be positive");
            if (modes % subdomains() != 0)
                fail("decomposition.mx*decomposition.my=" + str(subdomains()) + " does not divide kle.modes=" +
                     str(modes));
            const std::size_t n_c = modes / subdomains();
            if (n_lb == 0 || n_c % n_lb != 0)
                fail("sampler.n_lb=" + str(n_lb) + " does not divide the per-subdomain mode count " + str(n_c) +
                     " (kle.modes / subdomains)");
            if (n_c > (nx / mx) * (ny / my))
                fail("kle.modes / subdomains=" + str(n_c) + " exceeds the cells per subdomain");
        }
        if (!(beta > 0.0 && beta <= 1.0))
            fail("sampler.beta must lie in (0, 1]");
        if (n_lb == 0)
            fail("sampler.n_lb must be positive");
        if (hbar && !(*hbar >= 0.0))
            fail("sampler.hbar must be non-negative");
        if (!(likelihood.sigma_f2 > 0.0))
            fail("likelihood.sigma_f2 must be positive");
        if (!(likelihood.sigma_c2 > 0.0))
            fail("likelihood.sigma_c2 must be positive");
        if (!(solver_tolerance > 0.0))
            fail("solver.tolerance must be positive");
        if (chains == 0)
            fail("chains.count must be positive");
        if (iterations == 0)
            fail("chains.iterations must be positive");
        if (reference_modes && (*reference_modes == 0 || *reference_modes > nx * ny))
            fail("reference.modes must lie in [1, grid.nx*grid.ny]");
        if (measurement_count > nx * ny)
            fail("reference.measurements exceeds the number of cells");
        if (!(burn_in >= 0.0 && burn_in < 1.0))
            fail("diagnostics.burn_in must lie in [0, 1)");
        if (!(threshold > 0.0))
            fail("diagnostics.threshold must be positive");
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    if (!s.empty() && s[0] == '+')
        ++b;
    const auto r = std::from_chars(b, e, v);
    if (r.ec != std::errc() || r.ptr != e)
        throw ConfigurationError("config: " + key + "='" + s + "' is not a number");
    return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw ConfigurationError("config: " + key + "='" + s + "' is not a non-negative integer");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes")
        return true;
    if (s == "false" || s == "0" || s == "no")
        return false;
    throw ConfigurationError("config: " + key + "='" + s + "' is not a boolean");
}

inline const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "experiment.name",       "grid.nx",           "grid.ny",           "coarse.nx",
        "coarse.ny",             "decomposition.mx",  "decomposition.my",  "covariance.sigma2",
        "covariance.lx",         "covariance.ly",     "kle.modes",         "kle.energy",
        "kle.cache",             "sampler.beta",      "sampler.n_lb",      "sampler.hbar",
        "sampler.shape",         "sampler.rule",      "likelihood.sigma_f2", "likelihood.sigma_c2",
        "solver.tolerance",      "chains.count",      "chains.iterations", "chains.seed",
        "chains.workers",        "chains.checkpoint_every", "reference.dir", "reference.seed",
        "reference.modes",       "reference.coarse_data", "reference.measurements", "conditioning.enabled",
        "conditioning.measurements", "output.dir",    "diagnostics.burn_in", "diagnostics.threshold"};
    return keys;
}

} // namespace detail

inline boost::property_tree::ptree config_to_ptree(const ExperimentConfig& c) {
    using detail::format_double;
    boost::property_tree::ptree t;
    auto put = [&](const std::string& k, const std::string& v) { t.put(boost::property_tree::ptree::path_type(k, '.'), v); };
    put("experiment.name", c.name);
    put("grid.nx", std::to_string(c.nx));
    put("grid.ny", std::to_string(c.ny));
    put("coarse.nx", std::to_string(c.coarse_nx));
    put("coarse.ny", std::to_string(c.coarse_ny));
    put("decomposition.mx", std::to_string(c.mx));
    put("decomposition.my", std::to_string(c.my));
    put("covariance.sigma2", format_double(c.covariance.sigma2));
    put("covariance.lx", format_double(c.covariance.lx));
    put("covariance.ly", format_double(c.covariance.ly));
    put("kle.modes", std::to_string(c.modes));
    put("kle.energy", c.energy ? format_double(*c.energy) : "");
    put("kle.cache", c.kle_cache);
    put("sampler.beta", format_double(c.beta));
    put("sampler.n_lb", std::to_string(c.n_lb));
    put("sampler.hbar", c.hbar ? format_double(*c.hbar) : "auto");
    put("sampler.shape", c.shape == NeighborhoodShape::circle ? "circle" : "ellipse");
    put("sampler.rule", c.rule == AveragingRule::variance_preserving ? "variance_preserving"
                        : c.rule == AveragingRule::mean            ? "mean"
                                                                   : "gaussian_weighted");
    put("likelihood.sigma_f2", format_double(c.likelihood.sigma_f2));
    put("likelihood.sigma_c2", format_double(c.likelihood.sigma_c2));
    put("solver.tolerance", format_double(c.solver_tolerance));
    put("chains.count", std::to_string(c.chains));
    put("chains.iterations", std::to_string(c.iterations));
    put("chains.seed", std::to_string(c.seed));
    put("chains.workers", std::to_string(c.workers));
    put("chains.checkpoint_every", std::to_string(c.checkpoint_every));
    put("reference.dir", c.reference_dir);
    put("reference.seed", std::to_string(c.reference_seed));
    put("reference.modes", c.reference_modes ? std::to_string(*c.reference_modes) : "");
    put("reference.coarse_data", c.coarse_data == CoarseData::averaged ? "averaged" : "upscaled");
    put("reference.measurements", std::to_string(c.measurement_count));
    put("conditioning.enabled", c.conditioning ? "true" : "false");
    put("conditioning.measurements", c.measurements);
    put("output.dir", c.output_dir);
    put("diagnostics.burn_in", format_double(c.burn_in));
    put("diagnostics.threshold", format_double(c.threshold));
    return t;
}

// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_ptree(const boost::property_tree::ptree& t) {
    using namespace detail;
    for (const auto& [section, body] : t) {
        if (body.empty() && !body.data().empty())
            throw ConfigurationError("config: key '" + section + "' outside a section");
        for (const auto& [key, _] : body)
            if (!known_keys().count(section + "." + key))
                throw ConfigurationError("config: unknown key " + section + "." + key);
    }
    ExperimentConfig c;
    auto get = [&](const std::string& k) -> std::optional<std::string> {
        auto v = t.get_optional<std::string>(boost::property_tree::ptree::path_type(k, '.'));
        if (!v)
            return std::nullopt;
        return *v;
    };
    auto size = [&](const std::string& k, std::size_t& out) {
        if (auto v = get(k))
            out = static_cast<std::size_t>(parse_uint(k, *v));
    };
    auto num = [&](const std::string& k, double& out) {
        if (auto v = get(k))
            out = parse_double(k, *v);
    };
    auto text = [&](const std::string& k, std::string& out) {
        if (auto v = get(k))
            out = *v;
    };
    text("experiment.name", c.name);
    size("grid.nx", c.nx);
    size("grid.ny", c.ny);
    size("coarse.nx", c.coarse_nx);
    size("coarse.ny", c.coarse_ny);
    size("decomposition.mx", c.mx);
    size("decomposition.my", c.my);
    num("covariance.sigma2", c.covariance.sigma2);
    num("covariance.lx", c.covariance.lx);
    num("covariance.ly", c.covariance.ly);
    size("kle.modes", c.modes);
    if (auto v = get("kle.energy"); v && !v->empty())
        c.energy = parse_double("kle.energy", *v);
    text("kle.cache", c.kle_cache);
    num("sampler.beta", c.beta);
    size("sampler.n_lb", c.n_lb);
    if (auto v = get("sampler.hbar"); v && *v != "auto" && !v->empty())
        c.hbar = parse_double("sampler.hbar", *v);
    if (auto v = get("sampler.shape")) {
        if (*v == "circle")
            c.shape = NeighborhoodShape::circle;
        else if (*v == "ellipse")
            c.shape = NeighborhoodShape::ellipse;
        else
            throw ConfigurationError("config: sampler.shape must be circle or ellipse");
    }
    if (auto v = get("sampler.rule")) {
        if (*v == "variance_preserving")
            c.rule = AveragingRule::variance_preserving;
        else if (*v == "mean")
            c.rule = AveragingRule::mean;
        else if (*v == "gaussian_weighted")
            c.rule = AveragingRule::gaussian_weighted;
        else
            throw ConfigurationError("config: sampler.rule must be variance_preserving, mean or gaussian_weighted");
    }
    num("likelihood.sigma_f2", c.likelihood.sigma_f2);
    num("likelihood.sigma_c2", c.likelihood.sigma_c2);
    num("solver.tolerance", c.solver_tolerance);
    size("chains.count", c.chains);
    size("chains.iterations", c.iterations);
    if (auto v = get("chains.seed"))
        c.seed = parse_uint("chains.seed", *v);
    size("chains.workers", c.workers);
    size("chains.checkpoint_every", c.checkpoint_every);
    text("reference.dir", c.reference_dir);
    if (auto v = get("reference.seed"))
        c.reference_seed = parse_uint("reference.seed", *v);
    if (auto v = get("reference.modes"); v && !v->empty())
        c.reference_modes = static_cast<std::size_t>(parse_uint("reference.modes", *v));
    if (auto v = get("reference.coarse_data")) {
        if (*v == "averaged")
            c.coarse_data = CoarseData::averaged;
        else if (*v == "upscaled")
            c.coarse_data = CoarseData::upscaled;
        else
            throw ConfigurationError("config: reference.coarse_data must be averaged or upscaled");
    }
    size("reference.measurements", c.measurement_count);
    if (auto v = get("conditioning.enabled"))
        c.conditioning = parse_bool("conditioning.enabled", *v);
    text("conditioning.measurements", c.measurements);
    text("output.dir", c.output_dir);
    num("diagnostics.burn_in", c.burn_in);
    num("diagnostics.threshold", c.threshold);
    return c;
}

inline std::string config_to_string(const ExperimentConfig& c) {
    std::ostringstream os;
    boost::property_tree::write_ini(os, config_to_ptree(c));
    return os.str();
}

inline ExperimentConfig parse_config(const std::string& text) {
    std::istringstream is(text);
    boost::property_tree::ptree t;
    try {
        boost::property_tree::read_ini(is, t);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigurationError(std::string("config: ") + e.what());
    }
    return config_from_ptree(t);
}

inline ExperimentConfig load_config(const fs::path& path) {
    if (!fs::exists(path))
        throw ConfigurationError("config: file not found: " + path.string());
    return parse_config(read_file_bytes(path.string()));
}

// "section.key=value" overrides, applied on top of a parsed config.
inline ExperimentConfig apply_overrides(const ExperimentConfig& c, const std::vector<std::string>& overrides) {
    auto t = config_to_ptree(c);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos)
            throw ConfigurationError("config: override '" + o + "' is not section.key=value");
        const std::string key = o.substr(0, eq);
        if (!detail::known_keys().count(key))
            throw ConfigurationError("config: unknown key " + key);
        t.put(boost::property_tree::ptree::path_type(key, '.'), o.substr(eq + 1));
    }
    return config_from_ptree(t);
}

// ---------------------------------------------------------------------------
// Bases and models

inline KLBasis make_basis(const CartesianGrid& grid, const CovarianceSpec& spec, const TruncationPolicy& policy,
                          const std::string& cache) {
    if (!cache.empty() && policy.kind == TruncationPolicy::Kind::fixed_modes) {
        fs::create_directories(cache);
        return cached_kl_basis(cache, grid, spec, policy.modes);
    }
    return build_kl_basis(grid, spec, policy);
}

// Total mode count N: the configured value, or the smallest global
// truncation meeting the energy target.
inline std::size_t resolved_modes(const ExperimentConfig& c) {
    if (!c.energy)
        return c.modes;
    const auto g = build_kl_basis(build_grid(c.nx, c.ny), c.covariance, TruncationPolicy::energy_fraction(*c.energy));
    const std::size_t n = g.modes();
    if (n % c.subdomains() != 0 || (n / c.subdomains()) % c.n_lb != 0)
        throw ConfigurationError("config: energy target gives N=" + std::to_string(n) +
                                 ", not divisible by decomposition.mx*decomposition.my and sampler.n_lb");
    return n;
}

inline SamplerConfig sampler_config(const ExperimentConfig& c) {
    SamplerConfig s;
    s.beta = c.beta;
    s.n_lb = c.n_lb;
    s.hbar = c.resolved_hbar();
    s.shape = c.shape;
    s.ellipse_x = 0.5 * c.covariance.lx;
    s.ellipse_y = 0.5 * c.covariance.ly;
    s.rule = c.rule;
    s.seed = c.seed;
    return s;
}

// The local KLE: the same covariance on one subdomain, N / M_c modes.
inline KLBasis local_basis(const ExperimentConfig& c, const DomainDecomposition& dd, std::size_t n_total) {
    return make_basis(dd.local_grid(), c.covariance, TruncationPolicy::fixed(n_total / c.subdomains()), c.kle_cache);
}

// ---------------------------------------------------------------------------
// Reference data

struct ReferenceData {
    ScalarField log_permeability;
    ScalarField pressure;
    ObservationVector fine;
    ObservationVector coarse;
    std::optional<MeasurementSet> measurements;
};

namespace detail {

inline std::string observations_csv(const ObservationVector& obs, const CartesianGrid& g) {
    std::ostringstream os;
    os << "i,j,pressure\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t a = 0; a < obs.pattern.size(); ++a) {
        const auto [i, j] = g.ij(obs.pattern[a]);
        os << i << ',' << j << ',' << obs.values[a] << '\n';
    }
    return os.str();
}

inline std::string field_text(const ScalarField& f) {
    std::ostringstream os;
    write_field(os, f);
    return os.str();
}

} // namespace detail

inline ObservationVector read_observations(const fs::path& path, const CartesianGrid& g) {
    std::ifstream is(path);
    if (!is)
        throw DataError("cannot open observation file " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "i,j,pressure")
        throw DataError("observation file " + path.string() + ": header \"i,j,pressure\" required");
    ObservationVector obs;
    std::size_t row = 1;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty())
            continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        std::size_t i = 0, j = 0;
        double p = 0.0;
        if (!(ls >> i >> j >> p) || i >= g.nx() || j >= g.ny())
            throw DataError("observation file " + path.string() + ": bad row " + std::to_string(row));
        obs.pattern.push_back(g.index(i, j));
        obs.values.push_back(p);
    }
    if (obs.pattern != chessboard_cells(g))
        throw DataError("observation file " + path.string() + ": cells do not form the " + std::to_string(g.nx()) +
                        "x" + std::to_string(g.ny()) + " black-cell pattern");
    return obs;
}

inline BoundarySpec default_boundary() { return {}; }

// Draws theta_ref ~ N(0, I) from the global KLE, solves the fine problem and
// derives coarse data and (optionally) log-permeability measurements.
inline ReferenceData make_reference(const ExperimentConfig& c, std::uint64_t seed, bool zero_theta = false) {
    c.validate();
    const CartesianGrid fine = build_grid(c.nx, c.ny), coarse = build_grid(c.coarse_nx, c.coarse_ny);
    const std::size_t n_ref = c.reference_modes ? *c.reference_modes : resolved_modes(c);
    const KLBasis basis = make_basis(fine, c.covariance, TruncationPolicy::fixed(n_ref), c.kle_cache);
    RngStream rng(seed);
    std::vector<double> theta(n_ref, 0.0);
    if (!zero_theta)
        for (double& v : theta)
            v = rng.normal();
    ReferenceData r;
    r.log_permeability = synthesize(basis, theta);
    const ScalarField perm = exponentiate(r.log_permeability);
    const SolverOptions opts{c.solver_tolerance, 20000};
    try {
        r.pressure = solve_pressure(perm, default_boundary(), opts);
        r.fine = observe(r.pressure);
        if (c.coarse_data == CoarseData::averaged) {
            r.coarse = observe(restrict_average(r.pressure, coarse));
        } else {
            const auto up = upscale(perm, coarse);
            r.coarse = observe(solve_pressure(up.kxx, up.kyy, default_boundary(), opts));
        }
    } catch (const std::exception& e) {
        throw NumericalError("reference generation failed (seed " + std::to_string(seed) + "): " + e.what());
    }
    if (c.measurement_count) {
        MeasurementSet m;
        std::set<std::size_t> used;
        while (m.size() < c.measurement_count) {
            const auto cell = std::min(fine.cell_count() - 1,
                                       static_cast<std::size_t>(rng.uniform() * static_cast<double>(fine.cell_count())));
            if (!used.insert(cell).second)
                continue;
            m.locations.push_back(fine.center(cell));
            m.values.push_back(r.log_permeability[cell]);
        }
        r.measurements = std::move(m);
    }
    return r;
}

inline std::string reference_hash(const fs::path& dir) {
    return sha256_hex(sha256_file((dir / "observations.csv").string()) +
                      sha256_file((dir / "observations_coarse.csv").string()));
}

// Writes reference_field.txt, reference_pressure.txt, observations.csv,
// observations_coarse.csv, measurements.csv (if any) and reference.txt.
inline ReferenceData generate_reference(const ExperimentConfig& c, std::uint64_t seed, const fs::path& dir,
                                        bool zero_theta = false) {
    ReferenceData r = make_reference(c, seed, zero_theta);
    const CartesianGrid coarse = build_grid(c.coarse_nx, c.coarse_ny);
    fs::create_directories(dir);
    write_file_atomic(dir / "reference_field.txt", detail::field_text(r.log_permeability));
    write_file_atomic(dir / "reference_pressure.txt", detail::field_text(r.pressure));
    write_file_atomic(dir / "observations.csv", detail::observations_csv(r.fine, r.log_permeability.grid));
    write_file_atomic(dir / "observations_coarse.csv", detail::observations_csv(r.coarse, coarse));
    if (r.measurements) {
        std::ostringstream os;
        write_measurements(os, *r.measurements);
        write_file_atomic(dir / "measurements.csv", os.str());
    }
    std::ostringstream info;
    info << "msm-reference 1\n"
         << "seed " << seed << '\n'
         << "grid " << c.nx << ' ' << c.ny << '\n'
         << "coarse " << c.coarse_nx << ' ' << c.coarse_ny << '\n'
         << "modes " << (c.reference_modes ? *c.reference_modes : resolved_modes(c)) << '\n'
         << "coarse_data " << (c.coarse_data == CoarseData::averaged ? "averaged" : "upscaled") << '\n'
         << "observations_sha256 " << reference_hash(dir) << '\n';
    write_file_atomic(dir / "reference.txt", info.str());
    return r;
}

// ---------------------------------------------------------------------------
// Runs

inline std::vector<std::size_t> snapshot_iterations(std::size_t m_mcmc) {
    std::set<std::size_t> s;
    for (std::size_t k = 1; k <= 3; ++k)
        s.insert(std::max<std::size_t>(1, (m_mcmc * k) / 3));
    return {s.begin(), s.end()};
}

inline fs::path measurements_path(const ExperimentConfig& c) {
    return c.measurements.empty() ? fs::path(c.reference_dir) / "measurements.csv" : fs::path(c.measurements);
}

inline MsmModel build_model(const ExperimentConfig& c, const ObservationVector& fine_obs,
                            const ObservationVector& coarse_obs, const MeasurementSet* meas = nullptr) {
    c.validate();
    const CartesianGrid fine = build_grid(c.nx, c.ny), coarse = build_grid(c.coarse_nx, c.coarse_ny);
    const DomainDecomposition dd(fine, c.mx, c.my);
    const std::size_t n = resolved_modes(c);
    MsmModel model(fine, coarse, dd, local_basis(c, dd, n), sampler_config(c), c.likelihood, fine_obs, coarse_obs,
                   default_boundary());
    model.fine_solver = {c.solver_tolerance, 20000};
    model.coarse_solver = {c.solver_tolerance, 20000};
    if (meas)
        model.conditioning = build_multiscale_conditioning(dd, model.local_basis, *meas, c.covariance);
    return model;
}

struct RunSummary {
    fs::path dir;
    std::optional<DiagnosticsReport> report;
    std::vector<double> acceptance_rates;
    std::vector<ChainFailure> failures;
    bool degraded = false;
};

struct RunControl {
    bool resume = false; // continue chains from their checkpoints
};

namespace detail {

inline void copy_file_exact(const fs::path& from, const fs::path& to) {
    if (!fs::exists(from))
        throw DataError("missing input file " + from.string());
    write_file_atomic(to, read_file_bytes(from.string()));
}

inline std::string acceptance_csv(const std::vector<ChainRecord>& rec) {
    std::ostringstream os;
    os << "chain,proposals,acceptance_rate,coarse_acceptance_rate\n"
       << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& r : rec) {
        const double coarse = r.coarse_accepted.empty()
                                  ? 0.0
                                  : static_cast<double>(std::count(r.coarse_accepted.begin(), r.coarse_accepted.end(), 1)) /
                                        static_cast<double>(r.coarse_accepted.size());
        os << r.chain_id << ',' << r.size() << ',' << r.acceptance_rate() << ',' << coarse << '\n';
    }
    return os.str();
}

inline std::vector<std::string> list_files(const fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) {
            const auto rel = fs::relative(e.path(), dir).generic_string();
            if (rel != "manifest.txt" && rel.size() >= 4 && rel.substr(rel.size() - 4) != ".tmp")
                out.push_back(rel);
        }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace detail

// Runs the experiment into `c.output_dir`: config.ini, reference/ copies,
// per-chain records, checkpoints, curves and snapshots, diagnostics.csv,
// psrf_final.csv, acceptance.csv and manifest.txt.
inline RunSummary run_experiment(const ExperimentConfig& c, const RunControl& ctl = {}) {
    c.validate();
    const fs::path out = c.output_dir;
    const fs::path ref_in = c.reference_dir;
    const fs::path ref_out = out / "reference";
    fs::create_directories(ref_out);
    const bool same_ref = fs::exists(ref_out) && fs::exists(ref_in) && fs::equivalent(ref_in, ref_out);
    if (!same_ref) {
        detail::copy_file_exact(ref_in / "observations.csv", ref_out / "observations.csv");
        detail::copy_file_exact(ref_in / "observations_coarse.csv", ref_out / "observations_coarse.csv");
    }
    std::optional<MeasurementSet> meas;
    if (c.conditioning) {
        const fs::path mp = measurements_path(c);
        if (!(same_ref && fs::exists(mp) && fs::exists(ref_out / "measurements.csv") &&
              fs::equivalent(mp, ref_out / "measurements.csv")))
            detail::copy_file_exact(mp, ref_out / "measurements.csv");
        meas = read_measurements_file((ref_out / "measurements.csv").string());
    }

    ExperimentConfig stored = c;
    stored.reference_dir = "reference";
    stored.output_dir = ".";
    stored.measurements = c.conditioning ? "reference/measurements.csv" : "";
    stored.workers = 0;
    write_file_atomic(out / "config.ini", config_to_string(stored));

    const CartesianGrid fine = build_grid(c.nx, c.ny), coarse = build_grid(c.coarse_nx, c.coarse_ny);
    const auto fine_obs = read_observations(ref_out / "observations.csv", fine);
    const auto coarse_obs = read_observations(ref_out / "observations_coarse.csv", coarse);
    const MsmModel model = build_model(c, fine_obs, coarse_obs, meas ? &*meas : nullptr);

    RunOptions opts;
    opts.base_seed = c.seed;
    opts.output_dir = out;
    opts.checkpoint_every = c.checkpoint_every;
    opts.snapshot_iterations = snapshot_iterations(c.iterations);

    std::vector<std::optional<ChainRecord>> records(c.chains);
    const auto errors = for_each_chain(c.chains, c.workers, [&](std::size_t id) {
        const auto cp = checkpoint_path(out, id);
        if (ctl.resume && fs::exists(cp)) {
            ChainState st = load_checkpoint(cp);
            if (st.chain_id != id || !(st.theta.layout == model.layout))
                throw DataError("checkpoint " + cp.string() + " does not match the configuration");
            ChainRecord rec = read_record_csv(record_path(out, id), id, st.iteration);
            if (rec.size() != st.iteration)
                throw DataError("record file for chain " + std::to_string(id) + " is shorter than its checkpoint");
            // Drop rows written after the checkpoint.
            const std::string all = read_file_bytes(record_path(out, id).string());
            std::size_t pos = 0;
            for (std::size_t line = 0; line <= st.iteration; ++line)
                pos = all.find('\n', pos) + 1;
            write_file_atomic(record_path(out, id), all.substr(0, pos));
            advance_chain(st, model, c.iterations, rec, opts);
            records[id] = std::move(rec);
        } else {
            records[id] = run_chain(model, id, c.iterations, opts);
        }
    });

    RunSummary sum;
    sum.dir = out;
    std::vector<ChainRecord> done;
    for (std::size_t id = 0; id < c.chains; ++id) {
        if (errors[id])
            sum.failures.push_back({id, *errors[id]});
        else
            done.push_back(std::move(*records[id]));
    }
    sum.degraded = !sum.failures.empty();
    for (const auto& r : done) {
        std::ostringstream os;
        write_chain_curve_csv(os, r);
        write_file_atomic(out / ("chain_" + std::to_string(r.chain_id) + ".curve.csv"), os.str());
        sum.acceptance_rates.push_back(r.acceptance_rate());
    }
    write_file_atomic(out / "acceptance.csv", detail::acceptance_csv(done));
    if (done.size() >= 2) {
        DiagnosticsOptions dopt;
        dopt.burn_in_fraction = c.burn_in;
        dopt.threshold = c.threshold;
        sum.report = diagnostics_report(done, dopt);
        std::ostringstream os;
        write_diagnostics_csv(os, *sum.report);
        write_file_atomic(out / "diagnostics.csv", os.str());
        std::ostringstream ps;
        ps << "coordinate,psrf\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
        if (!sum.report->psrf.empty())
            for (std::size_t i = 0; i < sum.report->psrf.back().size(); ++i)
                ps << i << ',' << sum.report->psrf.back()[i] << '\n';
        write_file_atomic(out / "psrf_final.csv", ps.str());
    }

    std::ostringstream man;
    man << "msm-manifest 1\n"
        << "name " << c.name << '\n'
        << "config_sha256 " << sha256_file((out / "config.ini").string()) << '\n'
        << "reference_sha256 " << reference_hash(ref_out) << '\n'
        << "base_seed " << c.seed << '\n'
        << "chain_seeds";
    for (std::size_t id = 0; id < c.chains; ++id)
        man << ' ' << c.seed + id;
    man << '\n'
        << "chains " << c.chains << '\n'
        << "iterations " << c.iterations << '\n'
        << "status " << (sum.degraded ? "degraded" : "complete") << '\n';
    for (const auto& f : sum.failures) {
        std::string msg = f.message;
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        man << "failure " << f.chain_id << ' ' << msg << '\n';
    }
    for (const auto& f : detail::list_files(out))
        man << "file " << f << ' ' << sha256_file((out / f).string()) << '\n';
    write_file_atomic(out / "manifest.txt", man.str());
    return sum;
}

struct Manifest {
    std::string name;
    std::string config_sha256;
    std::string reference_sha256;
    std::uint64_t base_seed = 0;
    std::string status;
    std::map<std::string, std::string> files; // relative path -> sha256
};

inline Manifest read_manifest(const fs::path& run_dir) {
    const fs::path p = run_dir / "manifest.txt";
    if (!fs::exists(run_dir))
        throw DataError("run directory not found: " + run_dir.string());
    if (!fs::exists(p))
        throw DataError("manifest not found: " + p.string());
    std::istringstream is(read_file_bytes(p.string()));
    std::string line;
    if (!std::getline(is, line) || line != "msm-manifest 1")
        throw DataError("manifest " + p.string() + ": unsupported format");
    Manifest m;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "name")
            std::getline(ls >> std::ws, m.name);
        else if (tag == "config_sha256")
            ls >> m.config_sha256;
        else if (tag == "reference_sha256")
            ls >> m.reference_sha256;
        else if (tag == "base_seed")
            ls >> m.base_seed;
        else if (tag == "status")
            ls >> m.status;
        else if (tag == "file") {
            std::string f, h;
            ls >> f >> h;
            m.files[f] = h;
        }
    }
    return m;
}

// The stored config of a run, with its paths resolved against the run directory.
inline ExperimentConfig load_run_config(const fs::path& run_dir) {
    ExperimentConfig c = load_config(run_dir / "config.ini");
    c.reference_dir = (run_dir / c.reference_dir).lexically_normal().string();
    if (!c.measurements.empty())
        c.measurements = (run_dir / c.measurements).lexically_normal().string();
    c.output_dir = run_dir.string();
    return c;
}

struct ReproductionReport {
    std::vector<std::string> mismatched; // files whose hashes differ or are missing
    bool ok() const { return mismatched.empty(); }
};

// Re-runs a finished run from its manifest into `fresh_dir` and compares hashes.
inline ReproductionReport reproduce_run(const fs::path& run_dir, const fs::path& fresh_dir) {
    const Manifest orig = read_manifest(run_dir);
    ExperimentConfig c = load_run_config(run_dir);
    c.output_dir = fresh_dir.string();
    run_experiment(c);
    const Manifest again = read_manifest(fresh_dir);
    ReproductionReport rep;
    for (const auto& [f, h] : orig.files) {
        auto it = again.files.find(f);
        if (it == again.files.end() || it->second != h)
            rep.mismatched.push_back(f);
    }
    for (const auto& [f, _] : again.files)
        if (!orig.files.count(f))
            rep.mismatched.push_back(f);
    return rep;
}

// Re-runs diagnostics on the record files of a run.
inline DiagnosticsReport diagnose_run(const fs::path& run_dir, const DiagnosticsOptions& opts) {
    const Manifest m = read_manifest(run_dir);
    const ExperimentConfig c = load_run_config(run_dir);
    std::vector<ChainRecord> recs;
    for (std::size_t id = 0; id < c.chains; ++id) {
        const auto p = record_path(run_dir, id);
        if (fs::exists(p))
            recs.push_back(read_record_csv(p, id));
    }
    return diagnostics_report(recs, opts);
}

// ---------------------------------------------------------------------------
// Comparison

namespace detail {

inline std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
    std::ifstream is(p);
    if (!is)
        throw DataError("cannot open " + p.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ','))
            cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

} // namespace detail

struct ComparisonSummary {
    std::vector<std::string> names;
    std::vector<double> mean_acceptance;
    std::vector<double> final_psrf_max;
    std::vector<double> final_mpsrf;
    std::string text;
};

// Writes comparison.csv (iteration-aligned psrf_max/mpsrf), errors.csv
// (iteration-aligned mean misfit over chains) and acceptance_table.csv.
inline ComparisonSummary compare_runs(const std::vector<fs::path>& runs, const fs::path& out) {
    if (runs.empty())
        throw ArgumentError("compare: no run directories given");
    std::vector<Manifest> man;
    for (const auto& r : runs)
        man.push_back(read_manifest(r));
    for (std::size_t k = 1; k < runs.size(); ++k)
        if (man[k].reference_sha256 != man[0].reference_sha256)
            throw DataError("compare: " + runs[k].string() + " uses different reference data than " +
                            runs[0].string() + "; comparison refused");

    ComparisonSummary sum;
    std::set<std::string> seen;
    for (std::size_t k = 0; k < runs.size(); ++k) {
        std::string n = man[k].name.empty() ? runs[k].filename().string() : man[k].name;
        while (!seen.insert(n).second)
            n += "_" + std::to_string(k);
        sum.names.push_back(n);
    }

    std::map<std::size_t, std::vector<std::optional<std::pair<std::string, std::string>>>> diag;
    std::map<std::size_t, std::vector<std::optional<double>>> err;
    std::ostringstream acc;
    acc << "run,chain,acceptance_rate\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t k = 0; k < runs.size(); ++k) {
        const fs::path dpath = runs[k] / "diagnostics.csv";
        sum.final_psrf_max.push_back(std::numeric_limits<double>::quiet_NaN());
        sum.final_mpsrf.push_back(std::numeric_limits<double>::quiet_NaN());
        if (fs::exists(dpath)) {
            const auto rows = detail::read_csv_rows(dpath);
            for (std::size_t r = 1; r < rows.size(); ++r) {
                if (rows[r].size() < 3)
                    continue;
                const auto it = static_cast<std::size_t>(std::stoull(rows[r][0]));
                auto& slot = diag[it];
                slot.resize(runs.size());
                slot[k] = std::make_pair(rows[r][1], rows[r][2]);
                sum.final_psrf_max.back() = std::strtod(rows[r][1].c_str(), nullptr);
                sum.final_mpsrf.back() = std::strtod(rows[r][2].c_str(), nullptr);
            }
        }
        const auto arows = detail::read_csv_rows(runs[k] / "acceptance.csv");
        double total = 0.0;
        std::size_t n = 0;
        std::vector<std::vector<double>> curves;
        for (std::size_t r = 1; r < arows.size(); ++r) {
            if (arows[r].size() < 3)
                continue;
            acc << sum.names[k] << ',' << arows[r][0] << ',' << arows[r][2] << '\n';
            total += std::strtod(arows[r][2].c_str(), nullptr);
            ++n;
            const auto crows = detail::read_csv_rows(runs[k] / ("chain_" + arows[r][0] + ".curve.csv"));
            std::vector<double> curve;
            for (std::size_t q = 1; q < crows.size(); ++q)
                if (crows[q].size() >= 2)
                    curve.push_back(std::strtod(crows[q][1].c_str(), nullptr));
            curves.push_back(std::move(curve));
        }
        sum.mean_acceptance.push_back(n ? total / static_cast<double>(n) : 0.0);
        acc << sum.names[k] << ",mean," << sum.mean_acceptance.back() << '\n';
        if (!curves.empty()) {
            std::size_t len = curves[0].size();
            for (const auto& cv : curves)
                len = std::min(len, cv.size());
            for (std::size_t t = 0; t < len; ++t) {
                double s = 0.0;
                for (const auto& cv : curves)
                    s += cv[t];
                auto& slot = err[t + 1];
                slot.resize(runs.size());
                slot[k] = s / static_cast<double>(curves.size());
            }
        }
    }

    fs::create_directories(out);
    std::ostringstream cmp;
    cmp << "iteration";
    for (const auto& n : sum.names)
        cmp << ',' << n << "_psrf_max," << n << "_mpsrf";
    cmp << '\n';
    for (const auto& [it, slot] : diag) {
        cmp << it;
        for (const auto& v : slot)
            cmp << ',' << (v ? v->first : "") << ',' << (v ? v->second : "");
        cmp << '\n';
    }
    write_file_atomic(out / "comparison.csv", cmp.str());

    std::ostringstream e;
    e << "iteration";
    for (const auto& n : sum.names)
        e << ',' << n << "_mean_misfit";
    e << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& [it, slot] : err) {
        e << it;
        for (std::size_t k = 0; k < runs.size(); ++k) {
            e << ',';
            if (k < slot.size() && slot[k])
                e << *slot[k];
        }
        e << '\n';
    }
    write_file_atomic(out / "errors.csv", e.str());
    write_file_atomic(out / "acceptance_table.csv", acc.str());

    std::ostringstream txt;
    txt << std::fixed << std::setprecision(4);
    txt << "run  mean_acceptance  final_psrf_max  final_mpsrf\n";
    for (std::size_t k = 0; k < runs.size(); ++k)
        txt << sum.names[k] << "  " << sum.mean_acceptance[k] << "  " << sum.final_psrf_max[k] << "  "
            << sum.final_mpsrf[k] << '\n';
    sum.text = txt.str();
    write_file_atomic(out / "summary.txt", sum.text);
    return sum;
}

// ---------------------------------------------------------------------------
// Conditioning demonstration

struct ConditionDemoResult {
    std::vector<double> max_error;             // per sample, over all measurement cells
    std::vector<double> max_error_outside_band; // per sample, measurement cells outside the averaging band
};

// Draws `samples` prior theta vectors, conditions them on the configured
// measurements and reports how well each field honors the data.
inline ConditionDemoResult condition_demo(const ExperimentConfig& c, std::size_t samples, std::uint64_t seed,
                                          const fs::path& out) {
    c.validate();
    const MeasurementSet meas = read_measurements_file(measurements_path(c).string());
    const CartesianGrid fine = build_grid(c.nx, c.ny);
    const DomainDecomposition dd(fine, c.mx, c.my);
    const KLBasis basis = local_basis(c, dd, resolved_modes(c));
    const MultiscaleConditioning mc = build_multiscale_conditioning(dd, basis, meas, c.covariance);
    const AveragingPlan avg(dd, sampler_config(c));
    std::set<std::size_t> band;
    for (const auto& t : avg.targets())
        band.insert(t.cell);

    fs::create_directories(out);
    RngStream rng(seed);
    ConditionDemoResult res;
    std::ostringstream csv;
    csv << "sample,max_abs_error,max_abs_error_outside_band\n"
        << std::setprecision(std::numeric_limits<double>::max_digits10);
    const ThetaLayout layout(dd.subdomain_count(), basis.modes(), 1);
    for (std::size_t s = 0; s < samples; ++s) {
        ThetaVector th(layout);
        for (double& v : th.values)
            v = rng.normal();
        mc.project(th);
        ScalarField y = avg.apply(assemble_multiscale_field(dd, basis, th));
        for (std::size_t q = 0; q < y.size(); ++q)
            y[q] += mc.kriged[q];
        double e_all = 0.0, e_out = 0.0;
        for (std::size_t a = 0; a < meas.size(); ++a) {
            const double e = std::abs(y[mc.measurement_cells[a]] - meas.values[a]);
            e_all = std::max(e_all, e);
            if (!band.count(mc.measurement_cells[a]))
                e_out = std::max(e_out, e);
        }
        res.max_error.push_back(e_all);
        res.max_error_outside_band.push_back(e_out);
        csv << s << ',' << e_all << ',' << e_out << '\n';
        write_file_atomic(out / ("conditioned_field_" + std::to_string(s) + ".txt"), detail::field_text(y));
    }
    write_file_atomic(out / "condition_errors.csv", csv.str());
    write_file_atomic(out / "kriged_field.txt", detail::field_text(mc.kriged));
    return res;
}

} // namespace msm

#endif
