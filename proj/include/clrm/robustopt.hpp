#pragma once

// Robust production optimization: discounted NPV, trimmed-mean realization
// selection, normalized constraint violation and particle swarm optimization
// with lexicographic (violation first) filtering.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "clrm/common.hpp"
#include "clrm/geostat.hpp"
#include "clrm/proxy.hpp"
#include "clrm/resim.hpp"

namespace clrm::robustopt {

using resim::BhpSchedule;
using resim::RateSeries;

inline constexpr double kStbPerCubicMeter = 6.28981;

struct EconParams {
    double oil_price = 74.0;            // USD/STB
    double water_production_cost = 5.0;  // USD/STB
    double water_injection_cost = 9.0;   // USD/STB
    double discount_rate = 0.1;          // 1/yr
    double stb_per_m3 = kStbPerCubicMeter;

    void validate() const {
        CLRM_REQUIRE(oil_price >= 0 && water_production_cost >= 0 && water_injection_cost >= 0, ConfigError,
                     "prices and costs must be >= 0");
        CLRM_REQUIRE(discount_rate >= 0, ConfigError, "discount rate must be >= 0");
        CLRM_REQUIRE(stb_per_m3 > 0, ConfigError, "volume conversion must be > 0");
    }
};

// Rates are held constant from each report time to the next; each interval's
// cash flow is discounted at its midpoint.
inline double npv(const RateSeries& r, const EconParams& e) {
    double total = 0.0;
    for (int t = 0; t + 1 < r.n_times(); ++t) {
        const double dt = r.times[t + 1] - r.times[t];
        const double mid = 0.5 * (r.times[t] + r.times[t + 1]);
        double oil = 0.0, wp = 0.0, wi = 0.0;
        for (int i = 0; i < r.n_inj(); ++i) wi += r.inj_water(i, t);
        for (int p = 0; p < r.n_prod(); ++p) {
            oil += r.prod_oil(p, t);
            wp += r.prod_water(p, t);
        }
        const double cash = (e.oil_price * oil - e.water_production_cost * wp - e.water_injection_cost * wi) * e.stb_per_m3 * dt;
        total += cash / std::pow(1.0 + e.discount_rate, mid / 365.0);
    }
    return total;
}

// Indices kept after dropping trim_fraction * n_r lowest and highest NPVs.
// Order is by (NPV, index), so among ties lower indices are dropped at the low
// end and higher indices at the high end.
inline std::vector<int> select_realizations(const std::vector<double>& npvs, double trim_fraction = 0.1) {
    const int n = static_cast<int>(npvs.size());
    CLRM_REQUIRE(trim_fraction >= 0 && trim_fraction < 0.5, ConfigError, "trim fraction must be in [0, 0.5)");
    const double k_real = trim_fraction * n;
    const int k = static_cast<int>(std::lround(k_real));
    CLRM_REQUIRE(n >= 1 && std::abs(k_real - k) < 1e-9, ConfigError,
                 "n_r = " << n << " with trim fraction " << trim_fraction << " does not give an integral trim count"
                          << (trim_fraction == 0.1 ? " (n_r must be a multiple of 10, at least 10)" : ""));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return npvs[a] != npvs[b] ? npvs[a] < npvs[b] : a < b; });
    std::vector<int> kept(order.begin() + k, order.end() - k);
    std::sort(kept.begin(), kept.end());
    return kept;
}

// ---------------------------------------------------------------------------
// Constraints
// ---------------------------------------------------------------------------

enum class ConstraintPhase { water_injection, water_production };

struct ConstraintSpec {
    std::string well;  // empty means field total
    ConstraintPhase phase = ConstraintPhase::water_injection;
    double limit = 0.0;  // m^3/day, maximum

    void validate() const { CLRM_REQUIRE(limit > 0, ConfigError, "constraint limit must be > 0"); }
    std::string label() const {
        return (well.empty() ? std::string("field") : well) +
               (phase == ConstraintPhase::water_injection ? "_water_injection" : "_water_production");
    }
};

// Constrained quantity at report time t.
inline double constraint_quantity(const RateSeries& r, const ConstraintSpec& c, int t) {
    if (c.phase == ConstraintPhase::water_injection) {
        double s = 0.0;
        bool found = c.well.empty();
        for (int i = 0; i < r.n_inj(); ++i)
            if (c.well.empty() || r.injectors[i] == c.well) {
                s += r.inj_water(i, t);
                found = true;
            }
        CLRM_REQUIRE(found, ConfigError, "constraint refers to unknown injector " << c.well);
        return s;
    }
    double s = 0.0;
    bool found = c.well.empty();
    for (int p = 0; p < r.n_prod(); ++p)
        if (c.well.empty() || r.producers[p] == c.well) {
            s += r.prod_water(p, t);
            found = true;
        }
    CLRM_REQUIRE(found, ConfigError, "constraint refers to unknown producer " << c.well);
    return s;
}

// Maximum of the constrained quantity over report times at or after `from_day`.
inline double constraint_peak(const RateSeries& r, const ConstraintSpec& c, double from_day = 0.0) {
    double m = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < r.n_times(); ++t)
        if (r.times[t] >= from_day - 1e-9) m = std::max(m, constraint_quantity(r, c, t));
    return m;
}

// Normalized violations c_bar (per particle, per constraint) from per-particle
// peaks c (already maximized over kept realizations) and limits.
inline std::vector<std::vector<double>> normalized_violations(const std::vector<std::vector<double>>& c,
                                                              const std::vector<double>& limits) {
    CLRM_REQUIRE(!c.empty(), ShapeError, "aggregate violation of an empty swarm");
    const std::size_t nl = limits.size();
    std::vector<double> swarm_max(nl, -std::numeric_limits<double>::infinity());
    for (const auto& row : c) {
        CLRM_REQUIRE(row.size() == nl, ShapeError, "constraint count mismatch in swarm evaluation");
        for (std::size_t l = 0; l < nl; ++l) swarm_max[l] = std::max(swarm_max[l], row[l]);
    }
    std::vector<std::vector<double>> out(c.size(), std::vector<double>(nl, 0.0));
    for (std::size_t j = 0; j < c.size(); ++j)
        for (std::size_t l = 0; l < nl; ++l)
            if (swarm_max[l] > limits[l])
                out[j][l] = std::clamp((c[j][l] - limits[l]) / (swarm_max[l] - limits[l]), 0.0, 1.0);
    return out;
}

inline std::vector<double> aggregate_violation(const std::vector<std::vector<double>>& c, const std::vector<double>& limits) {
    std::vector<double> h;
    for (const auto& row : normalized_violations(c, limits)) h.push_back(std::accumulate(row.begin(), row.end(), 0.0));
    return h;
}

// ---------------------------------------------------------------------------
// PSO
// ---------------------------------------------------------------------------

struct Score {
    double J = std::numeric_limits<double>::infinity();
    double h = std::numeric_limits<double>::infinity();
};

// True when b is strictly better than the incumbent a.
inline bool filter_better(const Score& b, const Score& a) {
    const bool fa = a.h == 0.0, fb = b.h == 0.0;
    if (fa && fb) return b.J < a.J;
    if (fa != fb) return fb;
    return b.h < a.h;
}

inline const Score& filter_compare(const Score& a, const Score& b) { return filter_better(b, a) ? b : a; }

struct PsoConfig {
    int n_s = 35;
    int n_i = 30;
    double inertia = 0.729;
    double c1 = 1.494;
    double c2 = 1.494;
    int neighbors = 4;  // random informants besides the particle itself

    void validate() const {
        CLRM_REQUIRE(n_s >= 1, ConfigError, "PSO needs a nonempty swarm");
        CLRM_REQUIRE(n_i >= 1, ConfigError, "PSO needs at least one iteration");
        CLRM_REQUIRE(neighbors >= 0, ConfigError, "neighbor count must be >= 0");
    }
};

struct Particle {
    std::vector<double> u, v;
    std::vector<double> best_u;
    Score best;
};

// One velocity/position update for a particle given its informant best, with
// explicit uniform draws r1, r2 per dimension.
inline void move_particle(Particle& p, const std::vector<double>& n_best, const std::vector<double>& r1,
                          const std::vector<double>& r2, const std::vector<double>& lower, const std::vector<double>& upper,
                          const PsoConfig& cfg) {
    for (std::size_t d = 0; d < p.u.size(); ++d) {
        p.v[d] = cfg.inertia * p.v[d] + cfg.c1 * r1[d] * (p.best_u[d] - p.u[d]) + cfg.c2 * r2[d] * (n_best[d] - p.u[d]);
        p.u[d] += p.v[d];
        if (p.u[d] > upper[d]) {
            p.u[d] = upper[d];
            p.v[d] = 0.0;
        } else if (p.u[d] < lower[d]) {
            p.u[d] = lower[d];
            p.v[d] = 0.0;
        }
    }
}

// Objective for a whole swarm: per particle J and constraint peaks c_l.
struct PointEval {
    double J = 0.0;
    std::vector<double> c;
};
using SwarmObjective = std::function<std::vector<PointEval>(const std::vector<std::vector<double>>&)>;

struct TraceRow {
    int iteration = 0;
    double best_J = 0, best_h = 0, swarm_mean_J = 0;
    int feasible_count = 0;
};

struct PsoResult {
    std::vector<double> best_u;
    Score best;
    int best_iteration = 0;
    std::vector<TraceRow> trace;
    long long evaluations = 0;  // particle evaluations
};

// Iteration 1 evaluates the initial swarm (particle 0 at mid-bounds, the rest
// uniform, zero velocity); iterations 2..n_i move then evaluate.
inline PsoResult pso_minimize(const SwarmObjective& f, const std::vector<double>& lower, const std::vector<double>& upper,
                              const std::vector<double>& limits, const PsoConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t nd = lower.size();
    CLRM_REQUIRE(nd >= 1 && upper.size() == nd, ShapeError, "PSO bounds mismatch");
    for (std::size_t d = 0; d < nd; ++d) CLRM_REQUIRE(lower[d] <= upper[d], ConfigError, "PSO lower bound exceeds upper");
    const int ns = cfg.n_s;

    std::vector<Particle> swarm(ns);
    for (int j = 0; j < ns; ++j) {
        auto rng = make_rng(seed, {tag("pso-init"), static_cast<std::uint64_t>(j)});
        swarm[j].u.resize(nd);
        swarm[j].v.assign(nd, 0.0);
        for (std::size_t d = 0; d < nd; ++d)
            swarm[j].u[d] = j == 0 ? 0.5 * (lower[d] + upper[d]) : lower[d] + uniform01(rng) * (upper[d] - lower[d]);
    }

    auto draw_neighborhoods = [&](int iteration) {
        std::vector<std::vector<int>> nb(ns);
        auto rng = make_rng(seed, {tag("pso-neighborhood"), static_cast<std::uint64_t>(iteration)});
        std::vector<int> others;
        for (int j = 0; j < ns; ++j) {
            others.clear();
            for (int o = 0; o < ns; ++o)
                if (o != j) others.push_back(o);
            const int k = std::min<int>(cfg.neighbors, static_cast<int>(others.size()));
            for (int a = 0; a < k; ++a) {
                const int pick = a + static_cast<int>(uniform01(rng) * (others.size() - a));
                std::swap(others[a], others[std::min<std::size_t>(pick, others.size() - 1)]);
            }
            nb[j].push_back(j);
            nb[j].insert(nb[j].end(), others.begin(), others.begin() + k);
        }
        return nb;
    };

    PsoResult res;
    auto neighborhoods = draw_neighborhoods(0);
    for (int it = 1; it <= cfg.n_i; ++it) {
        if (it > 1) {
            for (int j = 0; j < ns; ++j) {
                int best = neighborhoods[j][0];
                for (int o : neighborhoods[j])
                    if (filter_better(swarm[o].best, swarm[best].best)) best = o;
                auto rng = make_rng(seed, {tag("pso-move"), static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(j)});
                std::vector<double> r1(nd), r2(nd);
                for (std::size_t d = 0; d < nd; ++d) {
                    r1[d] = uniform01(rng);
                    r2[d] = uniform01(rng);
                }
                const auto informant = swarm[best].best_u;
                move_particle(swarm[j], informant, r1, r2, lower, upper, cfg);
            }
        }
        std::vector<std::vector<double>> pos(ns);
        for (int j = 0; j < ns; ++j) pos[j] = swarm[j].u;
        const auto evals = f(pos);
        CLRM_REQUIRE(evals.size() == static_cast<std::size_t>(ns), ShapeError, "objective returned wrong swarm size");
        res.evaluations += ns;
        std::vector<std::vector<double>> c(ns);
        for (int j = 0; j < ns; ++j) c[j] = evals[j].c;
        const auto h = aggregate_violation(c, limits);

        TraceRow row;
        row.iteration = it;
        const Score before = res.best;
        for (int j = 0; j < ns; ++j) {
            const Score s{evals[j].J, h[j]};
            row.swarm_mean_J += s.J / ns;
            if (s.h == 0.0) ++row.feasible_count;
            if (swarm[j].best_u.empty() || filter_better(s, swarm[j].best)) {
                swarm[j].best = s;
                swarm[j].best_u = swarm[j].u;
            }
            if (res.best_u.empty() || filter_better(s, res.best)) {
                res.best = s;
                res.best_u = swarm[j].u;
                res.best_iteration = it;
            }
        }
        if (it > 1 && !filter_better(res.best, before)) neighborhoods = draw_neighborhoods(it);
        row.best_J = res.best.J;
        row.best_h = res.best.h;
        res.trace.push_back(row);
    }
    return res;
}

inline void write_trace_csv(const std::filesystem::path& p, const std::vector<TraceRow>& trace) {
    auto os = open_out(p);
    os << "iteration,best_J,best_h,swarm_mean_J,feasible_count\n";
    for (const auto& r : trace)
        os << r.iteration << ',' << fmt12(r.best_J) << ',' << fmt12(r.best_h) << ',' << fmt12(r.swarm_mean_J) << ','
           << r.feasible_count << '\n';
}

// ---------------------------------------------------------------------------
// Robust optimization over an ensemble
// ---------------------------------------------------------------------------

// Rates for every schedule on every realization: result[j][i].
using RateEvaluator = std::function<std::vector<std::vector<RateSeries>>(const std::vector<BhpSchedule>&)>;

inline RateEvaluator simulator_evaluator(const std::vector<geostat::Geomodel>& models, const resim::FluidSpec& fluid,
                                         const std::vector<resim::WellSpec>& wells, const resim::Numerics& num) {
    return [&models, fluid, wells, num](const std::vector<BhpSchedule>& us) {
        const std::size_t nr = models.size();
        std::vector<std::vector<RateSeries>> out(us.size(), std::vector<RateSeries>(nr));
        parallel_for(us.size() * nr, [&](std::size_t k) {
            const std::size_t j = k / nr, i = k % nr;
            try {
                out[j][i] = resim::simulate(models[i], fluid, wells, us[j], num);
            } catch (...) {
                rethrow_with_context("particle " + std::to_string(j) + ", realization " + std::to_string(i));
            }
        });
        return out;
    };
}

// Encodes each realization once and decodes the whole swarm per realization.
inline RateEvaluator proxy_evaluator(proxy::ProxyModel& pm, const std::vector<geostat::Geomodel>& models) {
    std::vector<const geostat::Geomodel*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    auto enc = std::make_shared<proxy::Encoding>(proxy::encode_models(pm, ptrs));
    const std::size_t nr = models.size();
    return [&pm, enc, nr](const std::vector<BhpSchedule>& us) {
        std::vector<std::vector<RateSeries>> out(us.size(), std::vector<RateSeries>(nr));
        std::vector<const BhpSchedule*> batch;
        for (const auto& u : us) batch.push_back(&u);
        parallel_for(nr, [&](std::size_t i) {
            try {
                auto r = proxy::predict(pm, *enc, std::vector<int>(us.size(), static_cast<int>(i)), batch);
                for (std::size_t j = 0; j < us.size(); ++j) out[j][i] = std::move(r[j]);
            } catch (...) {
                rethrow_with_context("proxy realization " + std::to_string(i));
            }
        });
        return out;
    };
}

struct RobustConfig {
    PsoConfig pso;
    double trim_fraction = 0.1;
};

// Ensemble outcome of one schedule.
struct EnsembleEval {
    std::vector<double> npvs;         // all realizations
    std::vector<int> kept;            // selected realization ids
    double expected_npv = 0.0;        // mean over kept
    std::vector<double> peaks;        // per constraint, max over kept realizations and report times
};

inline EnsembleEval evaluate_ensemble(const std::vector<RateSeries>& rates, const EconParams& econ,
                                      const std::vector<ConstraintSpec>& cs, double trim_fraction, double from_day) {
    EnsembleEval e;
    for (const auto& r : rates) e.npvs.push_back(npv(r, econ));
    e.kept = select_realizations(e.npvs, trim_fraction);
    for (int i : e.kept) e.expected_npv += e.npvs[i] / static_cast<double>(e.kept.size());
    for (const auto& c : cs) {
        double m = -std::numeric_limits<double>::infinity();
        for (int i : e.kept) m = std::max(m, constraint_peak(rates[i], c, from_day));
        e.peaks.push_back(m);
    }
    return e;
}

struct RobustResult {
    BhpSchedule best;
    double J = 0.0, h = 0.0;
    EnsembleEval at_best;
    PsoResult pso;
};

// Optimizes the control steps from `template_u.n_cs - free` on, keeping the
// earlier steps of `template_u` fixed. Constraints are checked from the start
// of the first free step.
inline RobustResult robust_optimize(const RateEvaluator& eval, const EconParams& econ,
                                    const std::vector<ConstraintSpec>& cs, const BhpSchedule& template_u, int fixed_steps,
                                    const RobustConfig& cfg, std::uint64_t seed) {
    econ.validate();
    template_u.validate();
    for (const auto& c : cs) c.validate();
    CLRM_REQUIRE(fixed_steps >= 0 && fixed_steps < template_u.n_cs, ConfigError,
                 "no free control steps (fixed " << fixed_steps << " of " << template_u.n_cs << ")");
    const int nw = template_u.n_wells, nfree = template_u.n_cs - fixed_steps;
    std::vector<double> lower, upper;
    for (int w = 0; w < nw; ++w)
        for (int s = 0; s < nfree; ++s) {
            lower.push_back(template_u.bounds[w].first);
            upper.push_back(template_u.bounds[w].second);
        }
    auto to_schedule = [&](const std::vector<double>& x) {
        BhpSchedule u = template_u;
        for (int w = 0; w < nw; ++w)
            for (int s = 0; s < nfree; ++s) u.at(w, fixed_steps + s) = x[static_cast<std::size_t>(w) * nfree + s];
        return u;
    };
    const double from_day = fixed_steps * template_u.control_days;
    std::vector<double> limits;
    for (const auto& c : cs) limits.push_back(c.limit);

    SwarmObjective f = [&](const std::vector<std::vector<double>>& xs) {
        std::vector<BhpSchedule> us;
        for (const auto& x : xs) us.push_back(to_schedule(x));
        const auto rates = eval(us);
        std::vector<PointEval> out(xs.size());
        for (std::size_t j = 0; j < xs.size(); ++j) {
            const auto e = evaluate_ensemble(rates[j], econ, cs, cfg.trim_fraction, from_day);
            out[j] = {-e.expected_npv, e.peaks};
        }
        return out;
    };
    RobustResult res;
    res.pso = pso_minimize(f, lower, upper, limits, cfg.pso, seed);
    res.best = to_schedule(res.pso.best_u);
    res.J = res.pso.best.J;
    res.h = res.pso.best.h;
    res.at_best = evaluate_ensemble(eval({res.best}).front(), econ, cs, cfg.trim_fraction, from_day);
    return res;
}

}  // namespace clrm::robustopt
