#pragma once

// Randomized maximum likelihood history matching on the PCA latent space:
// observation extraction and perturbation, the regularized mismatch objective,
// Levenberg-Marquardt minimization with finite-difference Jacobians and
// posterior ensemble generation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "clrm/common.hpp"
#include "clrm/geostat.hpp"
#include "clrm/resim.hpp"

namespace clrm::hm {

using resim::RateSeries;

struct ObservationSpec {
    double interval_days = 90.0;
    double relative_sd = 0.02;
    double sd_floor = 0.5;  // m^3/day
    double noise_scale = 1.0;

    void validate() const {
        CLRM_REQUIRE(interval_days > 0, ConfigError, "observation interval must be > 0");
        CLRM_REQUIRE(relative_sd >= 0 && sd_floor > 0, ConfigError, "observation sd needs relative_sd >= 0 and floor > 0");
        CLRM_REQUIRE(noise_scale >= 0, ConfigError, "noise scale must be >= 0");
    }
};

// Data ordered stream-major (injector water, producer oil, producer water,
// each in well declaration order), times ascending within a stream.
struct ObservationSet {
    std::vector<double> times;  // observation days
    std::vector<int> stream;    // per datum
    std::vector<int> time_row;  // per datum, row in the source RateSeries
    std::vector<double> d_true, d_obs, sd;

    std::size_t size() const { return d_obs.size(); }
};

// Observation marks interval, 2*interval, ... up to window_days.
inline std::vector<double> observation_times(double window_days, double interval_days) {
    std::vector<double> t;
    for (int k = 1; k * interval_days <= window_days + 1e-9; ++k) t.push_back(k * interval_days);
    return t;
}

inline std::vector<int> locate_times(const RateSeries& r, const std::vector<double>& times) {
    std::vector<int> rows;
    for (double t : times) {
        int found = -1;
        for (int k = 0; k < r.n_times(); ++k)
            if (std::abs(r.times[k] - t) < 1e-6) found = k;
        CLRM_REQUIRE(found >= 0, ShapeError, "rate series has no report at day " << t);
        rows.push_back(found);
    }
    return rows;
}

// Layout plus noise-free values; sd from the true values.
inline ObservationSet observation_layout(const RateSeries& truth, double window_days, const ObservationSpec& spec) {
    spec.validate();
    ObservationSet o;
    o.times = observation_times(window_days, spec.interval_days);
    const auto rows = locate_times(truth, o.times);
    for (int s = 0; s < truth.n_streams(); ++s)
        for (std::size_t k = 0; k < rows.size(); ++k) {
            const double v = truth.at(s, rows[k]);
            o.stream.push_back(s);
            o.time_row.push_back(rows[k]);
            o.d_true.push_back(v);
            o.sd.push_back(std::max(spec.relative_sd * std::abs(v), spec.sd_floor));
        }
    o.d_obs = o.d_true;
    return o;
}

inline std::vector<double> extract(const RateSeries& r, const ObservationSet& o) {
    std::vector<double> d(o.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        CLRM_REQUIRE(o.stream[i] < r.n_streams() && o.time_row[i] < r.n_times(), ShapeError,
                     "rate series does not cover the observation layout");
        d[i] = r.at(o.stream[i], o.time_row[i]);
    }
    return d;
}

// d_obs = d_true + noise_scale * sd * z. Each datum draws z from its own
// (stream, report row) RNG stream, so a datum keeps its noise when the
// observation window grows.
inline ObservationSet perturb_observations(ObservationSet o, double noise_scale, std::uint64_t seed) {
    for (std::size_t i = 0; i < o.size(); ++i) {
        auto rng = make_rng(seed, {tag("observation-noise"), static_cast<std::uint64_t>(o.stream[i]),
                                   static_cast<std::uint64_t>(o.time_row[i])});
        o.d_obs[i] = o.d_true[i] + noise_scale * o.sd[i] * std_normal(rng);
    }
    return o;
}

inline ObservationSet observe(const RateSeries& truth, double window_days, const ObservationSpec& spec, std::uint64_t seed) {
    return perturb_observations(observation_layout(truth, window_days, spec), spec.noise_scale, seed);
}

// ---------------------------------------------------------------------------
// RML objective and Levenberg-Marquardt
// ---------------------------------------------------------------------------

// Forward responses for a batch of latent vectors.
using Forward = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<double>>&)>;

struct RmlProblem {
    std::vector<double> xi_star;  // prior sample
    std::vector<double> d_star;   // perturbed data
    std::vector<double> sd;       // data standard deviations
    Forward forward;

    int l() const { return static_cast<int>(xi_star.size()); }
};

inline double data_mismatch(const std::vector<double>& d, const RmlProblem& p) {
    CLRM_REQUIRE(d.size() == p.d_star.size() && p.sd.size() == d.size(), ShapeError,
                 "forward returned " << d.size() << " data, expected " << p.d_star.size());
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double r = (d[i] - p.d_star[i]) / p.sd[i];
        s += r * r;
    }
    return s;
}

inline double regularization(const std::vector<double>& xi, const RmlProblem& p) {
    CLRM_REQUIRE(xi.size() == p.xi_star.size(), ShapeError, "latent length " << xi.size() << " != " << p.xi_star.size());
    double s = 0.0;
    for (std::size_t i = 0; i < xi.size(); ++i) s += (xi[i] - p.xi_star[i]) * (xi[i] - p.xi_star[i]);
    return s;
}

inline double rml_objective(const std::vector<double>& xi, const std::vector<double>& d, const RmlProblem& p) {
    return data_mismatch(d, p) + regularization(xi, p);
}

inline double rml_objective(const std::vector<double>& xi, const RmlProblem& p) {
    return rml_objective(xi, p.forward({xi}).front(), p);
}

struct LmOptions {
    int max_iterations = 10;
    double fd_step = 1e-4;
    double mu0 = 1e-4;
    double mu_factor = 10.0;
    int max_damping_steps = 8;
    double relative_tolerance = 1e-3;
};

struct RmlResult {
    std::vector<double> xi;
    std::vector<double> history;  // objective at the start and after each accepted step
    double initial_mismatch = 0.0, final_mismatch = 0.0;
    int iterations = 0;
    long long simulations = 0;
    bool converged = false;  // stopped on the relative-decrease test
    bool degraded = false;   // no descent after damping escalation
};

inline RmlResult rml_sample(const RmlProblem& p, const LmOptions& opt) {
    CLRM_REQUIRE(p.l() >= 1, ConfigError, "RML needs a nonempty latent vector");
    CLRM_REQUIRE(opt.fd_step > 0 && opt.mu0 > 0 && opt.mu_factor > 1, ConfigError, "invalid Levenberg-Marquardt options");
    const int l = p.l();
    const std::size_t nd = p.d_star.size();
    RmlResult res;
    std::vector<double> xi = p.xi_star;
    auto d = p.forward({xi}).front();
    res.simulations = 1;
    double f = rml_objective(xi, d, p);
    res.initial_mismatch = data_mismatch(d, p);
    res.history.push_back(f);
    double mu = opt.mu0;

    for (int it = 0; it < opt.max_iterations; ++it) {
        std::vector<std::vector<double>> probes(l, xi);
        for (int k = 0; k < l; ++k) probes[k][k] += opt.fd_step;
        const auto dp = p.forward(probes);
        res.simulations += l;
        Eigen::MatrixXd jac(nd + l, l);
        Eigen::VectorXd r(nd + l);
        for (std::size_t i = 0; i < nd; ++i) {
            r(i) = (d[i] - p.d_star[i]) / p.sd[i];
            for (int k = 0; k < l; ++k) jac(i, k) = (dp[k][i] - d[i]) / (opt.fd_step * p.sd[i]);
        }
        jac.bottomRows(l).setIdentity();
        for (int k = 0; k < l; ++k) r(nd + k) = xi[k] - p.xi_star[k];
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd jtr = jac.transpose() * r;

        bool accepted = false;
        for (int damp = 0; damp < opt.max_damping_steps; ++damp) {
            Eigen::MatrixXd a = jtj;
            a.diagonal().array() += mu;
            const Eigen::VectorXd step = a.ldlt().solve(-jtr);
            std::vector<double> trial(xi);
            for (int k = 0; k < l; ++k) trial[k] += step(k);
            const auto dt = p.forward({trial}).front();
            ++res.simulations;
            const double ft = rml_objective(trial, dt, p);
            if (std::isfinite(ft) && ft < f) {
                const double rel = (f - ft) / std::max(f, 1e-300);
                xi = std::move(trial);
                d = dt;
                f = ft;
                mu = std::max(mu / opt.mu_factor, 1e-12);
                accepted = true;
                res.history.push_back(f);
                ++res.iterations;
                if (rel < opt.relative_tolerance) res.converged = true;
                break;
            }
            mu *= opt.mu_factor;
        }
        if (!accepted) {
            // A stationary start point is a converged run, not a failure.
            if (jtr.lpNorm<Eigen::Infinity>() <= 1e-10 * (1.0 + f)) res.converged = true;
            else res.degraded = true;
            break;
        }
        if (res.converged) break;
    }
    res.xi = xi;
    res.final_mismatch = data_mismatch(d, p);
    return res;
}

// ---------------------------------------------------------------------------
// Posterior ensembles
// ---------------------------------------------------------------------------

// iid: independent standard normal draws per run. moment_matched: the draws
// across runs are centered and whitened so their sample mean is 0 and sample
// covariance is I exactly (needs more runs than latent plus data dimensions).
enum class Sampling { iid, moment_matched };

struct Perturbations {
    std::vector<std::vector<double>> z_xi, z_d;  // per run
};

inline Perturbations draw_perturbations(int runs, int l, int nd, Sampling mode, std::uint64_t seed) {
    const int dim = l + nd;
    Eigen::MatrixXd z(runs, dim);
    for (int k = 0; k < runs; ++k) {
        auto rng = make_rng(seed, {tag("rml-run"), static_cast<std::uint64_t>(k)});
        for (int j = 0; j < dim; ++j) z(k, j) = std_normal(rng);
    }
    if (mode == Sampling::moment_matched) {
        CLRM_REQUIRE(runs > dim, ConfigError,
                     "moment-matched sampling needs more runs (" << runs << ") than latent plus data dimensions (" << dim << ")");
        z.rowwise() -= z.colwise().mean();
        const Eigen::MatrixXd cov = z.transpose() * z / static_cast<double>(runs - 1);
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        CLRM_REQUIRE(llt.info() == Eigen::Success, NumericalError, "perturbation covariance is not positive definite");
        // z <- z L^-T so that z^T z / (runs - 1) = I.
        z = llt.matrixU().transpose().solve(z.transpose()).transpose();
    }
    Perturbations out;
    out.z_xi.resize(runs);
    out.z_d.resize(runs);
    for (int k = 0; k < runs; ++k) {
        for (int j = 0; j < l; ++j) out.z_xi[k].push_back(z(k, j));
        for (int j = 0; j < nd; ++j) out.z_d[k].push_back(z(k, l + j));
    }
    return out;
}

struct EnsembleResult {
    std::vector<RmlResult> runs;
    std::vector<std::vector<double>> xi_star;
    long long simulations = 0;
};

// n_r RML solves with prior draws xi* ~ N(prior_mean, I) and data draws
// d* = d_obs + sd * z.
inline EnsembleResult posterior_ensemble(const Forward& forward, const std::vector<double>& prior_mean,
                                         const ObservationSet& obs, int n_r, const LmOptions& opt, Sampling mode,
                                         std::uint64_t seed) {
    CLRM_REQUIRE(n_r >= 1, ConfigError, "posterior ensemble needs n_r >= 1");
    const int l = static_cast<int>(prior_mean.size());
    const int nd = static_cast<int>(obs.size());
    const auto z = draw_perturbations(n_r, l, nd, mode, seed);
    EnsembleResult out;
    out.runs.resize(n_r);
    out.xi_star.resize(n_r);
    parallel_for(static_cast<std::size_t>(n_r), [&](std::size_t k) {
        try {
            RmlProblem p;
            p.xi_star = prior_mean;
            for (int j = 0; j < l; ++j) p.xi_star[j] += z.z_xi[k][j];
            p.d_star = obs.d_obs;
            for (int i = 0; i < nd; ++i) p.d_star[i] += obs.sd[i] * z.z_d[k][i];
            p.sd = obs.sd;
            p.forward = forward;
            out.xi_star[k] = p.xi_star;
            out.runs[k] = rml_sample(p, opt);
        } catch (...) {
            rethrow_with_context("RML run " + std::to_string(k));
        }
    });
    for (const auto& r : out.runs) out.simulations += r.simulations;
    return out;
}

// Forward model: latent -> geomodel -> simulation under a fixed schedule ->
// observed data. Runs within a batch are simulated in parallel.
inline Forward simulator_forward(const geostat::PcaBasis& basis, const resim::FluidSpec& fluid,
                                 const std::vector<resim::WellSpec>& wells, const resim::BhpSchedule& u,
                                 const resim::Numerics& num, const ObservationSet& layout) {
    return [basis, fluid, wells, u, num, layout](const std::vector<std::vector<double>>& xis) {
        std::vector<std::vector<double>> out(xis.size());
        parallel_for(xis.size(), [&](std::size_t k) {
            const auto m = geostat::pca_to_model(basis, xis[k]);
            out[k] = extract(resim::simulate(m, fluid, wells, u, num), layout);
        });
        return out;
    };
}

inline std::vector<geostat::Geomodel> posterior_models(const geostat::PcaBasis& basis, const EnsembleResult& e) {
    std::vector<geostat::Geomodel> out;
    for (const auto& r : e.runs) out.push_back(geostat::pca_to_model(basis, r.xi));
    return out;
}

inline void write_hm_report(const std::filesystem::path& p, const EnsembleResult& e) {
    nlohmann::json j;
    j["simulations"] = e.simulations;
    j["runs"] = nlohmann::json::array();
    for (std::size_t k = 0; k < e.runs.size(); ++k) {
        const auto& r = e.runs[k];
        j["runs"].push_back({{"run", k},
                             {"initial_objective", r.history.front()},
                             {"final_objective", r.history.back()},
                             {"initial_mismatch", r.initial_mismatch},
                             {"final_mismatch", r.final_mismatch},
                             {"iterations", r.iterations},
                             {"simulations", r.simulations},
                             {"converged", r.converged},
                             {"degraded", r.degraded},
                             {"objective_history", r.history}});
    }
    auto os = open_out(p);
    os << j.dump(2) << '\n';
}

// Directory of posterior geomodels (model_0000.bin, ...) plus hm_report.json.
inline void write_posterior(const std::filesystem::path& dir, const geostat::PcaBasis& basis, const EnsembleResult& e) {
    std::filesystem::create_directories(dir);
    const auto models = posterior_models(basis, e);
    for (std::size_t k = 0; k < models.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "model_%04zu.bin", k);
        geostat::write_geomodel(dir / name, models[k]);
    }
    write_hm_report(dir / "hm_report.json", e);
}

}  // namespace clrm::hm
