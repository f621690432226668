#include <gtest/gtest.h>

#include <filesystem>

#include "clrm/robustopt.hpp"

using namespace clrm;
using namespace clrm::robustopt;

namespace {

RateSeries series(std::vector<double> times, std::vector<std::string> inj, std::vector<std::string> prod) {
    return RateSeries(std::move(times), std::move(inj), std::move(prod));
}

// Sum of squares subject to sum >= 1, written as -sum <= -1.
SwarmObjective sphere_with_sum_constraint() {
    return [](const std::vector<std::vector<double>>& xs) {
        std::vector<PointEval> out;
        for (const auto& x : xs) {
            double ss = 0.0, s = 0.0;
            for (double v : x) {
                ss += v * v;
                s += v;
            }
            out.push_back({ss, {-s}});
        }
        return out;
    };
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// NPV
// ---------------------------------------------------------------------------

TEST(Npv, ZeroRatesGiveZero) {
    auto r = series({0, 30, 60}, {"I1"}, {"P1"});
    EXPECT_EQ(npv(r, EconParams{}), 0.0);
}

TEST(Npv, OneIntervalOfOil) {
    auto r = series({0, 30}, {}, {"P1"});
    r.prod_oil(0, 0) = 100.0;
    EconParams e;
    e.discount_rate = 0.0;
    EXPECT_NEAR(npv(r, e), 100.0 * 6.28981 * 74.0 * 30.0, 1e-6);
    EXPECT_NEAR(npv(r, e), 1396338.2, 1e-6 * 1396338.2);
}

TEST(Npv, MidpointDiscounting) {
    // Interval [350, 380] is centered at day 365.
    auto r = series({350, 380}, {"I1"}, {"P1"});
    r.prod_oil(0, 0) = 80.0;
    r.prod_water(0, 0) = 30.0;
    r.inj_water(0, 0) = 120.0;
    EconParams e;
    e.discount_rate = 0.0;
    const double flat = npv(r, e);
    e.discount_rate = 0.1;
    EXPECT_NEAR(npv(r, e), flat / 1.1, 1e-9 * std::abs(flat));
    EXPECT_NEAR(flat, (74.0 * 80.0 - 5.0 * 30.0 - 9.0 * 120.0) * 6.28981 * 30.0, 1e-6);
}

TEST(Npv, LastRowStartsNoInterval) {
    auto r = series({0, 30, 60}, {}, {"P1"});
    r.prod_oil(0, 2) = 1000.0;
    EXPECT_EQ(npv(r, EconParams{}), 0.0);
}

// ---------------------------------------------------------------------------
// Realization selection
// ---------------------------------------------------------------------------

TEST(SelectRealizations, TwentyKeepsSixteen) {
    std::vector<double> v(20);
    for (int i = 0; i < 20; ++i) v[i] = std::sin(i * 1.7) * 1e6;
    EXPECT_EQ(select_realizations(v).size(), 16u);
}

TEST(SelectRealizations, TrimsByValue) {
    std::vector<double> v(20);
    for (int i = 0; i < 20; ++i) v[i] = i + 1.0;
    std::vector<int> expected;
    for (int i = 2; i <= 17; ++i) expected.push_back(i);
    EXPECT_EQ(select_realizations(v), expected);
    std::reverse(v.begin(), v.end());
    EXPECT_EQ(select_realizations(v), expected);
}

TEST(SelectRealizations, TiesDropLowestAndHighestIndices) {
    std::vector<double> v(20, 5.0);
    std::vector<int> expected;
    for (int i = 2; i <= 17; ++i) expected.push_back(i);
    EXPECT_EQ(select_realizations(v), expected);
}

TEST(SelectRealizations, ScaleInvariant) {
    std::vector<double> v(10);
    for (int i = 0; i < 10; ++i) v[i] = std::cos(i * 2.3);
    auto w = v;
    for (auto& x : w) x *= 17.5;
    EXPECT_EQ(select_realizations(v), select_realizations(w));
    EXPECT_EQ(select_realizations(v).size(), 8u);
}

TEST(SelectRealizations, RequiresIntegralTrim) {
    EXPECT_THROW(select_realizations(std::vector<double>(9, 1.0)), ConfigError);
    EXPECT_THROW(select_realizations(std::vector<double>(15, 1.0)), ConfigError);
    EXPECT_EQ(select_realizations(std::vector<double>(3, 1.0), 0.0).size(), 3u);
}

// ---------------------------------------------------------------------------
// Constraint aggregation
// ---------------------------------------------------------------------------

TEST(AggregateViolation, HandExample) {
    const auto cb = normalized_violations({{90.0}, {110.0}, {120.0}}, {100.0});
    EXPECT_EQ(cb[0][0], 0.0);
    EXPECT_EQ(cb[1][0], 0.5);
    EXPECT_EQ(cb[2][0], 1.0);
}

TEST(AggregateViolation, AllFeasibleGivesZero) {
    const auto h = aggregate_violation({{90.0, 10.0}, {100.0, 1.0}, {50.0, 19.9}}, {100.0, 20.0});
    for (double v : h) EXPECT_EQ(v, 0.0);
}

TEST(AggregateViolation, RangeWorstAndFeasibilityEquivalence) {
    auto rng = make_rng(5, {tag("agg")});
    const std::vector<double> limits{100.0, 50.0, 10.0};
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::vector<double>> c(7, std::vector<double>(3));
        for (auto& row : c)
            for (std::size_t l = 0; l < 3; ++l) row[l] = limits[l] * (0.5 + uniform01(rng));
        const auto cb = normalized_violations(c, limits);
        const auto h = aggregate_violation(c, limits);
        for (std::size_t l = 0; l < 3; ++l) {
            double worst = -1e300;
            std::size_t arg = 0;
            for (std::size_t j = 0; j < c.size(); ++j) {
                EXPECT_GE(cb[j][l], 0.0);
                EXPECT_LE(cb[j][l], 1.0);
                if (c[j][l] > worst) {
                    worst = c[j][l];
                    arg = j;
                }
            }
            if (worst > limits[l]) {
                EXPECT_EQ(cb[arg][l], 1.0);
            }
        }
        for (std::size_t j = 0; j < c.size(); ++j) {
            bool feasible = true;
            for (std::size_t l = 0; l < 3; ++l) feasible = feasible && c[j][l] <= limits[l];
            EXPECT_EQ(h[j] == 0.0, feasible);
        }
    }
}

TEST(AggregateViolation, EmptySwarmThrows) { EXPECT_THROW(aggregate_violation({}, {1.0}), ShapeError); }

TEST(Constraints, FieldAndWellQuantities) {
    auto r = series({0, 30, 60}, {"I1", "I2"}, {"P1", "P2"});
    for (int t = 0; t < 3; ++t) {
        r.inj_water(0, t) = 100.0 + t;
        r.inj_water(1, t) = 200.0;
        r.prod_water(0, t) = 10.0 * t;
        r.prod_water(1, t) = 5.0;
    }
    EXPECT_EQ(constraint_peak(r, {"", ConstraintPhase::water_injection, 1.0}), 302.0);
    EXPECT_EQ(constraint_peak(r, {"I1", ConstraintPhase::water_injection, 1.0}), 102.0);
    EXPECT_EQ(constraint_peak(r, {"", ConstraintPhase::water_production, 1.0}), 25.0);
    EXPECT_EQ(constraint_peak(r, {"P2", ConstraintPhase::water_production, 1.0}), 5.0);
    EXPECT_EQ(constraint_peak(r, {"", ConstraintPhase::water_production, 1.0}, 45.0), 25.0);
    EXPECT_EQ(constraint_peak(r, {"", ConstraintPhase::water_production, 1.0}, 0.0), 25.0);
    EXPECT_EQ(constraint_peak(r, {"P1", ConstraintPhase::water_production, 1.0}, 30.0), 20.0);
    EXPECT_THROW(constraint_peak(r, {"P9", ConstraintPhase::water_production, 1.0}), ConfigError);
}

// ---------------------------------------------------------------------------
// Filter and particle moves
// ---------------------------------------------------------------------------

TEST(Filter, FeasibilityTakesPrecedence) {
    EXPECT_EQ(filter_compare({-5, 0}, {-9, 0.2}).J, -5);
    EXPECT_EQ(filter_compare({-9, 0.2}, {-5, 0}).J, -5);
}

TEST(Filter, ObjectiveWhenBothFeasible) { EXPECT_EQ(filter_compare({-5, 0}, {-9, 0}).J, -9); }

TEST(Filter, ViolationWhenBothInfeasible) { EXPECT_EQ(filter_compare({-1, 0.3}, {-8, 0.1}).J, -8); }

TEST(Filter, ExactTieKeepsIncumbent) {
    const Score a{-3, 0}, b{-3, 0};
    EXPECT_EQ(&filter_compare(a, b), &a);
    const Score c{-1, 0.4}, d{-7, 0.4};
    EXPECT_EQ(&filter_compare(c, d), &c);
}

TEST(Filter, ScaleInvariantOrdering) {
    EXPECT_EQ(filter_better({-10, 0}, {-5, 0}), filter_better({-10 * 3.5, 0}, {-5 * 3.5, 0}));
}

TEST(ParticleMove, HandVelocityRule) {
    Particle p{{0.0}, {1.0}, {2.0}, {}};
    move_particle(p, {2.0}, {0.5}, {0.5}, {-10.0}, {10.0}, PsoConfig{});
    EXPECT_NEAR(p.v[0], 3.717, 1e-12);
    EXPECT_NEAR(p.u[0], 3.717, 1e-12);
}

TEST(ParticleMove, AtBestsWithZeroVelocityStays) {
    Particle p{{1.5, -2.0}, {0.0, 0.0}, {1.5, -2.0}, {}};
    move_particle(p, {1.5, -2.0}, {0.3, 0.9}, {0.7, 0.1}, {-5, -5}, {5, 5}, PsoConfig{});
    EXPECT_EQ(p.u, (std::vector<double>{1.5, -2.0}));
    EXPECT_EQ(p.v, (std::vector<double>{0.0, 0.0}));
}

TEST(ParticleMove, ClampZeroesVelocity) {
    Particle p{{9.0, 0.0}, {5.0, 0.1}, {9.0, 0.0}, {}};
    move_particle(p, {9.0, 0.0}, {0, 0}, {0, 0}, {-10, -10}, {10, 10}, PsoConfig{});
    EXPECT_EQ(p.u[0], 10.0);
    EXPECT_EQ(p.v[0], 0.0);
    EXPECT_NEAR(p.v[1], 0.0729, 1e-15);
}

// ---------------------------------------------------------------------------
// Swarm
// ---------------------------------------------------------------------------

TEST(Pso, ConstrainedSphereReachesFeasibleNearOptimum) {
    const std::vector<double> lo(5, -1.0), hi(5, 1.0);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto r = pso_minimize(sphere_with_sum_constraint(), lo, hi, {-1.0}, PsoConfig{}, seed);
        EXPECT_EQ(r.best.h, 0.0);
        double s = 0.0;
        for (double v : r.best_u) s += v;
        EXPECT_GE(s, 1.0);
        EXPECT_GE(r.best.J, 0.2 - 1e-12);
        EXPECT_LT(r.best.J, r.trace.front().best_J);
    }
}

TEST(Pso, BestSequenceIsMonotone) {
    const auto r = pso_minimize(sphere_with_sum_constraint(), std::vector<double>(5, -1.0), std::vector<double>(5, 1.0), {-1.0},
                                PsoConfig{}, 3);
    ASSERT_EQ(r.trace.size(), 30u);
    for (std::size_t k = 1; k < r.trace.size(); ++k) {
        EXPECT_LE(r.trace[k].best_h, r.trace[k - 1].best_h);
        if (r.trace[k - 1].best_h == 0.0) {
            EXPECT_LE(r.trace[k].best_J, r.trace[k - 1].best_J);
        }
    }
    EXPECT_EQ(r.evaluations, 35 * 30);
}

TEST(Pso, PositionsRespectBoundsAndInitialization) {
    const std::vector<double> lo{0.0, -3.0, 2.0}, hi{1.0, 3.0, 2.5};
    int calls = 0;
    SwarmObjective f = [&](const std::vector<std::vector<double>>& xs) {
        if (calls++ == 0) {
            for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(xs[0][d], 0.5 * (lo[d] + hi[d]));
        }
        std::vector<PointEval> out;
        for (const auto& x : xs) {
            for (std::size_t d = 0; d < 3; ++d) {
                EXPECT_GE(x[d], lo[d]);
                EXPECT_LE(x[d], hi[d]);
            }
            out.push_back({-(x[0] + x[1] + x[2]), {}});
        }
        return out;
    };
    const auto r = pso_minimize(f, lo, hi, {}, PsoConfig{}, 9);
    EXPECT_NEAR(r.best.J, -6.5, 1e-6);
}

TEST(Pso, UnconstrainedQuadraticOptimum) {
    const std::vector<double> target{0.3, -0.6, 0.1};
    SwarmObjective f = [&](const std::vector<std::vector<double>>& xs) {
        std::vector<PointEval> out;
        for (const auto& x : xs) {
            double s = 0.0;
            for (std::size_t d = 0; d < 3; ++d) s += (x[d] - target[d]) * (x[d] - target[d]);
            out.push_back({s, {}});
        }
        return out;
    };
    std::vector<double> err;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto r = pso_minimize(f, std::vector<double>(3, -1.0), std::vector<double>(3, 1.0), {}, PsoConfig{}, seed);
        double e = 0.0;
        for (std::size_t d = 0; d < 3; ++d) e = std::max(e, std::abs(r.best_u[d] - target[d]));
        err.push_back(e);
    }
    EXPECT_LE(median(err), 1e-2);
}

TEST(Pso, SlackConstraintGivesUnconstrainedTrajectory) {
    auto f = sphere_with_sum_constraint();
    SwarmObjective unconstrained = [&](const std::vector<std::vector<double>>& xs) {
        auto e = f(xs);
        for (auto& p : e) p.c.clear();
        return e;
    };
    const std::vector<double> lo(5, -1.0), hi(5, 1.0);
    const auto a = pso_minimize(unconstrained, lo, hi, {}, PsoConfig{}, 4);
    const auto b = pso_minimize(f, lo, hi, {100.0}, PsoConfig{}, 4);
    EXPECT_EQ(a.best_u, b.best_u);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t k = 0; k < a.trace.size(); ++k) EXPECT_EQ(a.trace[k].swarm_mean_J, b.trace[k].swarm_mean_J);
}

TEST(Pso, DeterministicPerSeed) {
    const std::vector<double> lo(5, -1.0), hi(5, 1.0);
    const auto a = pso_minimize(sphere_with_sum_constraint(), lo, hi, {-1.0}, PsoConfig{}, 21);
    const auto b = pso_minimize(sphere_with_sum_constraint(), lo, hi, {-1.0}, PsoConfig{}, 21);
    EXPECT_EQ(a.best_u, b.best_u);
    const auto c = pso_minimize(sphere_with_sum_constraint(), lo, hi, {-1.0}, PsoConfig{}, 22);
    EXPECT_NE(a.best_u, c.best_u);
}

TEST(Pso, TraceCsv) {
    const auto r = pso_minimize(sphere_with_sum_constraint(), std::vector<double>(2, -1.0), std::vector<double>(2, 1.0), {-1.0},
                                PsoConfig{5, 4}, 1);
    const auto p = std::filesystem::temp_directory_path() / "clrm_pso_trace.csv";
    write_trace_csv(p, r.trace);
    auto is = open_in(p);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "iteration,best_J,best_h,swarm_mean_J,feasible_count");
    int n = 0;
    while (std::getline(is, line)) ++n;
    EXPECT_EQ(n, 4);
    std::filesystem::remove(p);
}

// ---------------------------------------------------------------------------
// Robust optimization with rate evaluators
// ---------------------------------------------------------------------------

namespace {

// Linear response: injection rate grows with injector BHP, production oil with
// drawdown; realization i scales productivity by (1 + 0.1 i).
RateEvaluator linear_evaluator(int n_r) {
    return [n_r](const std::vector<BhpSchedule>& us) {
        std::vector<std::vector<RateSeries>> out(us.size());
        for (std::size_t j = 0; j < us.size(); ++j)
            for (int i = 0; i < n_r; ++i) {
                const auto& u = us[j];
                std::vector<double> times;
                for (int t = 0; t <= 2 * u.n_cs; ++t) times.push_back(0.5 * u.control_days * t);
                RateSeries r(times, {"I1"}, {"P1"});
                for (int t = 0; t < r.n_times(); ++t) {
                    const int s = u.step_at(times[t]);
                    const double scale = 1.0 + 0.1 * i;
                    r.inj_water(0, t) = scale * 10.0 * (u.at(0, s) - 320.0);
                    r.prod_oil(0, t) = scale * 8.0 * (330.0 - u.at(1, s));
                    r.prod_water(0, t) = scale * 2.0 * (330.0 - u.at(1, s));
                }
                out[j].push_back(r);
            }
        return out;
    };
}

}  // namespace

TEST(RobustOptimize, KeepsPrefixAndBoundsAndRespectsConstraint) {
    BhpSchedule u(2, 3, 60.0, {{325.0, 335.0}, {300.0, 315.0}});
    u.at(0, 0) = 331.0;
    u.at(1, 0) = 302.0;
    const std::vector<ConstraintSpec> cs{{"", ConstraintPhase::water_injection, 150.0}};
    RobustConfig cfg;
    const auto r = robust_optimize(linear_evaluator(10), EconParams{}, cs, u, 1, cfg, 5);
    EXPECT_EQ(r.best.at(0, 0), 331.0);
    EXPECT_EQ(r.best.at(1, 0), 302.0);
    for (int w = 0; w < 2; ++w)
        for (int s = 0; s < 3; ++s) {
            EXPECT_GE(r.best.at(w, s), u.bounds[w].first);
            EXPECT_LE(r.best.at(w, s), u.bounds[w].second);
        }
    EXPECT_EQ(r.h, 0.0);
    EXPECT_EQ(r.at_best.kept.size(), 8u);
    EXPECT_LE(r.at_best.peaks[0], 150.0);
    EXPECT_NEAR(-r.J, r.at_best.expected_npv, 1e-9 * std::abs(r.J));
    // Producer BHP at its lower bound maximizes oil; injection is capped.
    EXPECT_NEAR(r.best.at(1, 1), 300.0, 0.5);
    EXPECT_NEAR(r.best.at(1, 2), 300.0, 0.5);
}

TEST(RobustOptimize, EvaluatorSubstitutionGivesSameResult) {
    BhpSchedule u(2, 2, 60.0, {{325.0, 335.0}, {300.0, 315.0}});
    const auto ev = linear_evaluator(10);
    RateEvaluator copy = [&](const std::vector<BhpSchedule>& us) { return ev(us); };
    RobustConfig cfg;
    cfg.pso.n_i = 5;
    const auto a = robust_optimize(ev, EconParams{}, {}, u, 0, cfg, 8);
    const auto b = robust_optimize(copy, EconParams{}, {}, u, 0, cfg, 8);
    EXPECT_EQ(a.best.bhp, b.best.bhp);
    EXPECT_EQ(a.at_best.npvs, b.at_best.npvs);
}

TEST(RobustOptimize, NoFreeStepsThrows) {
    BhpSchedule u(2, 2, 60.0, {{325.0, 335.0}, {300.0, 315.0}});
    EXPECT_THROW(robust_optimize(linear_evaluator(10), EconParams{}, {}, u, 2, RobustConfig{}, 1), ConfigError);
}

TEST(RobustOptimize, SimulatorEvaluatorReportsFailingPair) {
    geostat::GridSpec g{4, 4, 1, 30.0, 30.0, 4.0};
    std::vector<geostat::Geomodel> models{{g, std::vector<double>(16, std::log(100.0))}};
    std::vector<resim::WellSpec> wells{{"I1", resim::WellKind::injector, 0, 0, 0, -1, 0.1},
                                       {"P1", resim::WellKind::producer, 9, 3, 0, -1, 0.1}};
    auto ev = simulator_evaluator(models, resim::FluidSpec{}, wells, resim::Numerics{});
    BhpSchedule u(2, 1, 60.0, {{325.0, 335.0}, {300.0, 315.0}});
    try {
        ev({u});
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("particle 0, realization 0"), std::string::npos) << e.what();
    }
}
