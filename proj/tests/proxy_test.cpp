#include <gtest/gtest.h>

#include <filesystem>
#include <limits>
#include <map>
#include <set>

#include "clrm/proxy.hpp"

using namespace clrm;
using namespace clrm::proxy;
using geostat::GridSpec;
using resim::WellKind;
using resim::WellSpec;

namespace {

const GridSpec kTinyGrid{6, 6, 2, 30.0, 30.0, 4.0};

Geomodel random_model(const GridSpec& g, std::uint64_t seed) {
    Geomodel m{g, std::vector<double>(g.cells())};
    auto rng = make_rng(seed, {tag("test-model")});
    for (auto& v : m.logk) v = 4.79 + 1.5 * std_normal(rng);
    return m;
}

std::vector<WellSpec> tiny_wells() {
    return {WellSpec{"I1", WellKind::injector, 0, 0, 0, -1, 0.1}, WellSpec{"P1", WellKind::producer, 5, 5, 0, -1, 0.1}};
}

std::vector<std::pair<double, double>> tiny_bounds() { return {{325.0, 335.0}, {300.0, 315.0}}; }

// 2 control steps of 60 days: report times 0, 30, ..., 120.
ProxyConfig tiny_config(int n_neu = 8) {
    auto c = ProxyConfig::for_grid(kTinyGrid, {"I1"}, {"P1"}, n_neu, 5);
    return c;
}

DatasetSpec tiny_spec(int n_train, int n_test) {
    DatasetSpec s;
    s.n_train = n_train;
    s.n_test = n_test;
    s.n_cs = 2;
    s.control_days = 60.0;
    return s;
}

resim::Numerics tiny_numerics() {
    resim::Numerics n;
    n.pressure_step_days = 10.0;
    return n;
}

RateSeries constant_series(int n_t, std::vector<std::string> inj, std::vector<std::string> prod, double v) {
    std::vector<double> t(n_t);
    for (int i = 0; i < n_t; ++i) t[i] = 30.0 * i;
    RateSeries r(t, std::move(inj), std::move(prod));
    std::fill(r.values.begin(), r.values.end(), v);
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

TEST(ProxyArchitecture, FieldScaleParameterCount) {
    auto cfg = ProxyConfig::for_grid(GridSpec{40, 40, 8, 15.0, 15.0, 4.0}, {"I1", "I2", "I3"}, {"P1", "P2", "P3", "P4"}, 200, 31);
    EXPECT_EQ(cfg.n_in(), 7);
    EXPECT_EQ(cfg.n_out(), 11);
    auto pm = build_proxy(cfg, GridSpec{40, 40, 8, 15.0, 15.0, 4.0}, 1);
    EXPECT_EQ(pm.parameter_count(), 333523u);
    EXPECT_EQ(cfg.closed_form_parameter_count(), 333523u);
}

TEST(ProxyArchitecture, DeskParameterCountMatchesEnumeration) {
    GridSpec g{16, 16, 8, 30.0, 30.0, 4.0};
    auto cfg = ProxyConfig::for_grid(g, {"I1"}, {"P1", "P2"}, 50, 31);
    auto pm = build_proxy(cfg, g, 3);
    const std::size_t expected = (112 + 872 + 3472) + 56 + 2 * (2 * 2 * 1 * 16 * 50 + 50) + 4 * ((3 + 50) * 50 + 50) +
                                 (50 * 5 + 5);
    std::size_t enumerated = 0;
    for (const auto& p : pm.store.params()) enumerated += p.value.size();
    EXPECT_EQ(enumerated, expected);
    EXPECT_EQ(pm.parameter_count(), expected);
    EXPECT_EQ(cfg.closed_form_parameter_count(), expected);
}

TEST(ProxyArchitecture, RunningStatisticsAreNotTrainable) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 1);
    EXPECT_EQ(pm.store.buffer_count(), 6);
    for (const auto& p : pm.store.params()) EXPECT_EQ(p.name.find("running"), std::string::npos);
}

TEST(ProxyArchitecture, InputExtentsMustBeMultiplesOfEight) {
    auto cfg = tiny_config();
    cfg.nx = 12;
    EXPECT_THROW(build_proxy(cfg, kTinyGrid, 1), ConfigError);
    cfg = tiny_config();
    EXPECT_THROW(build_proxy(cfg, GridSpec{9, 6, 2, 30.0, 30.0, 4.0}, 1), ConfigError);
}

TEST(ProxyArchitecture, GridIsPaddedToMultipleOfEight) {
    auto c = ProxyConfig::for_grid(GridSpec{20, 17, 8, 1, 1, 1}, {"I"}, {"P"}, 4, 3);
    EXPECT_EQ(c.nx, 24);
    EXPECT_EQ(c.ny, 24);
    EXPECT_EQ(c.nz, 8);
}

TEST(ProxyArchitecture, InitializationFollowsConventions) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 5);
    for (int l = 0; l < 3; ++l) {
        for (double v : pm.store[pm.id.bn_gamma[l]].value.data) EXPECT_EQ(v, 1.0);
        for (double v : pm.store[pm.id.bn_beta[l]].value.data) EXPECT_EQ(v, 0.0);
        for (double v : pm.store[pm.id.conv_b[l]].value.data) EXPECT_EQ(v, 0.0);
    }
    const auto& w = pm.store[pm.id.fc3_w].value;
    const double limit = std::sqrt(6.0 / (8 + 3));
    double mx = 0.0;
    for (double v : w.data) mx = std::max(mx, std::abs(v));
    EXPECT_LE(mx, limit);
    EXPECT_GT(mx, 0.0);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

TEST(ProxyForward, UntrainedOutputsAreFiniteWithExpectedShape) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 7);
    auto m = random_model(kTinyGrid, 1);
    BhpSchedule u(2, 2, 60.0, tiny_bounds());
    auto r = forward(pm, m, u);
    EXPECT_EQ(r.n_times(), 5);
    EXPECT_EQ(r.n_streams(), 3);
    EXPECT_EQ(r.times.back(), 120.0);
    for (double v : r.values) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
    }
}

TEST(ProxyForward, DeterministicForIdenticalInputsAndSeeds) {
    auto a = build_proxy(tiny_config(), kTinyGrid, 11);
    auto b = build_proxy(tiny_config(), kTinyGrid, 11);
    auto m = random_model(kTinyGrid, 2);
    BhpSchedule u(2, 2, 60.0, tiny_bounds());
    u.at(0, 1) = 334.0;
    const auto ra = forward(a, m, u);
    EXPECT_EQ(ra.values, forward(a, m, u).values);
    EXPECT_EQ(ra.values, forward(b, m, u).values);
}

TEST(ProxyForward, StepInputsUseControlStepContainingReportTime) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 1);
    BhpSchedule u(2, 2, 60.0, tiny_bounds());
    u.at(0, 0) = 325.0;
    u.at(0, 1) = 335.0;
    u.at(1, 0) = 315.0;
    u.at(1, 1) = 303.0;
    // Report times 0, 30 belong to step 0; 60, 90 and the final 120 to step 1.
    const std::vector<double> inj{0.0, 0.0, 1.0, 1.0, 1.0}, prod{1.0, 1.0, 0.2, 0.2, 0.2};
    for (int t = 0; t < 5; ++t) {
        auto x = step_inputs(pm, {&u}, t);
        EXPECT_NEAR(x[0], inj[t], 1e-12) << t;
        EXPECT_NEAR(x[1], prod[t], 1e-12) << t;
    }
}

TEST(ProxyForward, DegenerateBoundsMapToMidpoint) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 1);
    BhpSchedule u(2, 2, 60.0, {{330.0, 330.0}, {300.0, 315.0}});
    EXPECT_EQ(step_inputs(pm, {&u}, 0)[0], 0.5);
}

TEST(ProxyForward, BatchedPredictionMatchesSingleForward) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 13);
    auto m0 = random_model(kTinyGrid, 3), m1 = random_model(kTinyGrid, 4);
    BhpSchedule u0(2, 2, 60.0, tiny_bounds()), u1(2, 2, 60.0, tiny_bounds());
    u1.at(1, 0) = 301.0;
    const auto enc = encode_models(pm, {&m0, &m1});
    const auto out = predict(pm, enc, {1, 0, 1}, {&u0, &u1, &u1});
    ASSERT_EQ(out.size(), 3u);
    const auto single = forward(pm, m1, u0).values;
    for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(out[0].values[i], single[i], 1e-12);
    const auto single2 = forward(pm, m0, u1).values;
    for (std::size_t i = 0; i < single2.size(); ++i) EXPECT_NEAR(out[1].values[i], single2[i], 1e-12);
}

TEST(ProxyForward, GridMismatchThrows) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 1);
    auto m = random_model(GridSpec{6, 6, 2, 20.0, 30.0, 4.0}, 1);
    BhpSchedule u(2, 2, 60.0, tiny_bounds());
    EXPECT_THROW(forward(pm, m, u), ShapeError);
}

TEST(ProxyForward, InvariantToThreadLimit) {
    auto pm = build_proxy(tiny_config(), kTinyGrid, 17);
    auto m = random_model(kTinyGrid, 5);
    BhpSchedule u(2, 2, 60.0, tiny_bounds());
    const int keep = thread_limit();
    set_thread_limit(1);
    const auto a = forward(pm, m, u).values;
    set_thread_limit(4);
    const auto b = forward(pm, m, u).values;
    set_thread_limit(keep);
    EXPECT_EQ(a, b);
}

// ---------------------------------------------------------------------------
// Error measures
// ---------------------------------------------------------------------------

TEST(ProxyError, IdenticalSeriesGiveZero) {
    auto s = constant_series(31, {"I1"}, {"P1", "P2"}, 50.0);
    ErrorConfig ec;
    EXPECT_EQ(sample_error(s, s, ec, 1), 0.0);
    EXPECT_EQ(sample_error(s, s, ec, 2), 0.0);
    ec.alpha_prod_oil = 7.0;
    EXPECT_EQ(sample_error(s, s, ec, 2), 0.0);
}

TEST(ProxyError, ZeroWaterStreamLiteralSum) {
    // One producer, no injectors: oil matches, water is 10 against 0.
    auto sim = constant_series(31, {}, {"P1"}, 0.0);
    auto prox = sim;
    for (int t = 0; t < 31; ++t) {
        sim.at(0, t) = prox.at(0, t) = 80.0;
        prox.at(1, t) = 10.0;
    }
    ErrorConfig ec;
    ec.time_average = false;
    // 30 terms of 10 / (0 + 20), averaged over 2 streams.
    EXPECT_NEAR(sample_error(sim, prox, ec, 2), 15.0 / 2.0, 1e-12);
    ec.time_average = true;
    EXPECT_NEAR(sample_error(sim, prox, ec, 2), 0.5 / 2.0, 1e-12);
    EXPECT_NEAR(sample_error(sim, prox, ec, 1), 0.5 / 2.0, 1e-12);
}

TEST(ProxyError, StartTimeExcludesDayZeroRow) {
    auto sim = constant_series(5, {"I1"}, {}, 100.0);
    auto prox = sim;
    prox.at(0, 0) = 150.0;
    ErrorConfig ec;
    ec.time_average = false;
    EXPECT_NEAR(sample_error(sim, prox, ec, 1), 0.5, 1e-12);
    EXPECT_EQ(sample_error(sim, prox, ec, 2), 0.0);
}

TEST(ProxyError, ScaleInvariantWithoutAlpha) {
    auto sim = constant_series(7, {"I1"}, {"P1"}, 0.0), prox = sim;
    auto rng = make_rng(3, {tag("scale")});
    for (std::size_t i = 0; i < sim.values.size(); ++i) {
        sim.values[i] = 0.5 + 100.0 * uniform01(rng);
        prox.values[i] = 100.0 * uniform01(rng);
    }
    ErrorConfig ec;
    ec.alpha_prod_water = 0.0;
    ec.denominator_floor = 0.0;
    const double base = sample_error(sim, prox, ec, 2);
    for (double c : {1e-3, 0.37, 42.0}) {
        auto a = sim, b = prox;
        for (auto& v : a.values) v *= c;
        for (auto& v : b.values) v *= c;
        EXPECT_NEAR(sample_error(a, b, ec, 2), base, 1e-12 * base);
    }
}

TEST(ProxyError, AlphaNeverIncreasesError) {
    auto sim = constant_series(7, {"I1"}, {"P1"}, 30.0), prox = sim;
    for (std::size_t i = 0; i < prox.values.size(); ++i) prox.values[i] += (i % 3) * 4.0;
    ErrorConfig ec;
    ec.alpha_prod_water = 0.0;
    const double e0 = sample_error(sim, prox, ec, 2);
    ec.alpha_prod_water = 20.0;
    const double e1 = sample_error(sim, prox, ec, 2);
    ec.alpha_prod_water = 200.0;
    EXPECT_LE(e1, e0);
    EXPECT_LE(sample_error(sim, prox, ec, 2), e1);
}

TEST(ProxyError, ShapeMismatchThrows) {
    auto a = constant_series(7, {"I1"}, {"P1"}, 30.0), b = constant_series(6, {"I1"}, {"P1"}, 30.0);
    EXPECT_THROW(sample_error(a, b, ErrorConfig{}, 2), ShapeError);
}

TEST(ProxyError, ZeroDenominatorWithoutFloorThrows) {
    auto a = constant_series(3, {"I1"}, {}, 0.0);
    ErrorConfig ec;
    ec.denominator_floor = 0.0;
    EXPECT_THROW(sample_error(a, a, ec, 2), NumericalError);
}

TEST(ProxyError, EnsembleIsMeanOfSamples) {
    EXPECT_NEAR(ensemble_error({0.04, 0.08}), 0.06, 1e-15);
    EXPECT_EQ(ensemble_error({0.123}), 0.123);
    EXPECT_EQ(ensemble_error({0.0, 0.0}), 0.0);
    EXPECT_THROW(ensemble_error({}), ShapeError);
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

TEST(ProxyDataset, UniformDrawMean) {
    auto rng = make_rng(2024, {tag("uniform-check")});
    double s = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) s += draw_schedule({{300.0, 315.0}}, 1, 30.0, nullptr, 0, rng).at(0, 0);
    EXPECT_NEAR(s / n, 307.5, 0.15);
}

TEST(ProxyDataset, DegenerateBoundsGiveConstantSchedules) {
    auto rng = make_rng(1, {tag("x")});
    for (int i = 0; i < 20; ++i) {
        auto u = draw_schedule({{330.0, 330.0}, {305.0, 305.0}}, 3, 60.0, nullptr, 0, rng);
        for (int s = 0; s < 3; ++s) {
            EXPECT_EQ(u.at(0, s), 330.0);
            EXPECT_EQ(u.at(1, s), 305.0);
        }
    }
}

TEST(ProxyDataset, SplitsPrefixAndDeterminism) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 1), random_model(kTinyGrid, 2), random_model(kTinyGrid, 3)};
    auto spec = tiny_spec(3, 2);
    spec.n_cs = 3;
    spec.control_days = 40.0;
    BhpSchedule prefix(2, 3, 40.0, tiny_bounds());
    prefix.at(0, 0) = 326.5;
    prefix.at(1, 0) = 311.25;
    prefix.at(0, 1) = 333.0;
    prefix.at(1, 1) = 301.0;
    auto ds = make_dataset(models, {2, 0}, tiny_wells(), resim::FluidSpec{}, tiny_numerics(), spec, tiny_bounds(), &prefix, 2, 99);
    ASSERT_EQ(ds.train.size(), 6u);
    ASSERT_EQ(ds.test.size(), 4u);
    EXPECT_EQ(ds.realizations, (std::vector<int>{0, 2}));
    std::map<int, int> per_model;
    std::set<std::vector<double>> distinct;
    for (const auto* split : {&ds.train, &ds.test})
        for (const auto& s : *split) {
            ++per_model[s.realization];
            distinct.insert(s.schedule.bhp);
            for (int w = 0; w < 2; ++w) {
                EXPECT_EQ(s.schedule.at(w, 0), prefix.at(w, 0));
                EXPECT_EQ(s.schedule.at(w, 1), prefix.at(w, 1));
                EXPECT_GE(s.schedule.at(w, 2), tiny_bounds()[w].first);
                EXPECT_LE(s.schedule.at(w, 2), tiny_bounds()[w].second);
            }
            EXPECT_EQ(s.rates.n_times(), 5);
        }
    EXPECT_EQ(per_model[0], 5);
    EXPECT_EQ(per_model[2], 5);
    EXPECT_EQ(distinct.size(), 10u);

    auto again = make_dataset(models, {2, 0}, tiny_wells(), resim::FluidSpec{}, tiny_numerics(), spec, tiny_bounds(), &prefix, 2, 99);
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        EXPECT_EQ(again.train[i].schedule.bhp, ds.train[i].schedule.bhp);
        EXPECT_EQ(again.train[i].rates.values, ds.train[i].rates.values);
    }
}

TEST(ProxyDataset, PerModelTestCounts) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 1), random_model(kTinyGrid, 2)};
    auto spec = tiny_spec(1, 0);
    spec.n_test_per_model = {2, 0};
    auto ds = make_dataset(models, {0, 1}, tiny_wells(), resim::FluidSpec{}, tiny_numerics(), spec, tiny_bounds(), nullptr, 0, 5);
    EXPECT_EQ(ds.train.size(), 2u);
    ASSERT_EQ(ds.test.size(), 2u);
    EXPECT_EQ(ds.test[0].realization, 0);
    EXPECT_EQ(ds.test[1].realization, 0);
}

TEST(ProxyDataset, SimulatorFailureIdentifiesSample) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 1)};
    auto wells = tiny_wells();
    wells[1].i = 40;  // outside the grid
    try {
        make_dataset(models, {0}, wells, resim::FluidSpec{}, tiny_numerics(), tiny_spec(1, 0), tiny_bounds(), nullptr, 0, 1);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("realization 0, schedule 0"), std::string::npos) << e.what();
    }
}

TEST(ProxyDataset, DirectoryRoundTrip) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 1), random_model(kTinyGrid, 2)};
    auto ds = make_dataset(models, {0, 1}, tiny_wells(), resim::FluidSpec{}, tiny_numerics(), tiny_spec(2, 1), tiny_bounds(), nullptr, 0, 8);
    const auto dir = std::filesystem::temp_directory_path() / "clrm_proxy_dataset_rt";
    std::filesystem::remove_all(dir);
    write_dataset(dir, ds, tiny_wells());
    EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
    auto back = read_dataset(dir, tiny_wells());
    EXPECT_EQ(back.seed, 8u);
    EXPECT_EQ(back.realizations, ds.realizations);
    ASSERT_EQ(back.train.size(), ds.train.size());
    ASSERT_EQ(back.test.size(), ds.test.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        EXPECT_EQ(back.train[i].realization, ds.train[i].realization);
        for (std::size_t k = 0; k < ds.train[i].schedule.bhp.size(); ++k)
            EXPECT_NEAR(back.train[i].schedule.bhp[k], ds.train[i].schedule.bhp[k], 1e-9);
        for (std::size_t k = 0; k < ds.train[i].rates.values.size(); ++k)
            EXPECT_NEAR(back.train[i].rates.values[k], ds.train[i].rates.values[k], 1e-9 * (1 + std::abs(ds.train[i].rates.values[k])));
    }
    std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Gradients and training
// ---------------------------------------------------------------------------

TEST(ProxyGradient, CompositeNetworkMatchesFiniteDifferences) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 21), random_model(kTinyGrid, 22)};
    auto pm = build_proxy(tiny_config(6), kTinyGrid, 4);
    std::vector<Sample> samples(2);
    auto rng = make_rng(77, {tag("fd-targets")});
    for (int r = 0; r < 2; ++r) {
        samples[r].realization = r;
        samples[r].schedule = draw_schedule(tiny_bounds(), 2, 60.0, nullptr, 0, rng);
        samples[r].rates = constant_series(5, {"I1"}, {"P1"}, 0.0);
        for (auto& v : samples[r].rates.values) v = 5.0 + 60.0 * uniform01(rng);
    }
    Dataset ds;
    ds.train = samples;
    fit_normalization(pm, ds, models);
    // Random initial outputs are far below the targets; push them into range
    // so both signs of the residual appear.
    for (auto& v : pm.norm.output_scale) v = 40.0;
    const ErrorConfig ec;

    auto loss_value = [&]() {
        nn::Tape tp(false);
        return tp.value(training_loss(tp, pm, samples, models, ec))[0];
    };
    pm.store.zero_grad();
    {
        nn::Tape tp;
        tp.backward(training_loss(tp, pm, samples, models, ec));
    }
    std::vector<std::pair<int, std::size_t>> all;
    for (int p = 0; p < pm.store.size(); ++p)
        for (std::size_t i = 0; i < pm.store[p].value.size(); ++i) all.push_back({p, i});
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(100);
    const double h = 1e-5;
    double worst = 0.0;
    int nonzero = 0;
    for (auto [p, i] : all) {
        auto& v = pm.store[p].value[i];
        const double keep = v;
        v = keep + h;
        const double lp = loss_value();
        v = keep - h;
        const double lm = loss_value();
        v = keep;
        const double fd = (lp - lm) / (2 * h);
        const double an = pm.store[p].grad[i];
        if (std::abs(an) > 1e-8) ++nonzero;
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        worst = std::max(worst, rel);
        EXPECT_LE(rel, 1e-4) << pm.store[p].name << "[" << i << "] analytic " << an << " fd " << fd;
    }
    EXPECT_GT(nonzero, 50);
    std::printf("composite proxy gradient: max relative error %.3g over 100 parameters\n", worst);
}

TEST(ProxyTraining, OverfitsSingleSample) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 31)};
    auto ds = make_dataset(models, {0}, tiny_wells(), resim::FluidSpec{}, tiny_numerics(), tiny_spec(1, 0), tiny_bounds(), nullptr, 0, 3);
    auto pm = build_proxy(tiny_config(16), kTinyGrid, 9);
    TrainConfig hc;
    hc.max_epochs = 3000;
    hc.log_interval = 50;
    const ErrorConfig ec;
    auto res = train(pm, ds, models, ec, hc);
    EXPECT_TRUE(res.converged) << "E_train " << res.e_train << " after " << res.epochs << " epochs";
    EXPECT_LT(res.e_train, 0.05);
    const auto pred = forward(pm, models[0], ds.train[0].schedule);
    EXPECT_LE(sample_error(ds.train[0].rates, pred, ec, 2), 0.05);
    std::printf("single-sample overfit: %d epochs, E_train %.4f\n", res.epochs, res.e_train);
}

class TrainedTinyProxy : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        models_ = new std::vector<Geomodel>{random_model(kTinyGrid, 41), random_model(kTinyGrid, 42), random_model(kTinyGrid, 43)};
        ds_ = new Dataset(make_dataset(*models_, {0, 1, 2}, tiny_wells(), resim::FluidSpec{}, tiny_numerics(), tiny_spec(3, 1),
                                       tiny_bounds(), nullptr, 0, 12));
        hc_.max_epochs = 300;
        hc_.log_interval = 10;
        hc_.tol = 0.02;
        pm_ = new ProxyModel(build_proxy(tiny_config(12), kTinyGrid, 2));
        result_ = new TrainResult(train(*pm_, *ds_, *models_, ErrorConfig{}, hc_));
    }
    static void TearDownTestSuite() {
        delete models_;
        delete ds_;
        delete pm_;
        delete result_;
    }
    static std::vector<Geomodel>* models_;
    static Dataset* ds_;
    static ProxyModel* pm_;
    static TrainResult* result_;
    static TrainConfig hc_;
};
std::vector<Geomodel>* TrainedTinyProxy::models_ = nullptr;
Dataset* TrainedTinyProxy::ds_ = nullptr;
ProxyModel* TrainedTinyProxy::pm_ = nullptr;
TrainResult* TrainedTinyProxy::result_ = nullptr;
TrainConfig TrainedTinyProxy::hc_;

TEST_F(TrainedTinyProxy, LossDecreasesOverWindows) {
    const auto& h = result_->history;
    ASSERT_GE(h.size(), 6u);
    EXPECT_LT(h.back().loss, h.front().loss);
    // Logged every 10 epochs: compare points 50 epochs apart.
    for (std::size_t i = 0; i + 5 < h.size(); ++i)
        EXPECT_LE(h[i + 5].loss, 1.05 * h[i].loss) << "epochs " << h[i].epoch << " -> " << h[i + 5].epoch;
}

TEST_F(TrainedTinyProxy, HistoryIsReproducible) {
    auto pm = build_proxy(tiny_config(12), kTinyGrid, 2);
    auto again = train(pm, *ds_, *models_, ErrorConfig{}, hc_);
    ASSERT_EQ(again.history.size(), result_->history.size());
    for (std::size_t i = 0; i < again.history.size(); ++i) {
        EXPECT_EQ(again.history[i].loss, result_->history[i].loss);
        EXPECT_EQ(again.history[i].e_test, result_->history[i].e_test);
    }
}

TEST_F(TrainedTinyProxy, HistoryRowsAndLearningRateSwitch) {
    const auto& h = result_->history;
    EXPECT_EQ(h.front().epoch, 1);
    EXPECT_EQ(h.front().lr, hc_.lr);
    for (std::size_t i = 0; i < h.size(); ++i) {
        EXPECT_TRUE(h[i].lr == hc_.lr || h[i].lr == hc_.lr_final);
        if (i > 0) {
            EXPECT_LE(h[i].lr, h[i - 1].lr);
        }
        EXPECT_GE(h[i].e_test, 0.0);
    }
    EXPECT_EQ(h.back().epoch, result_->epochs);
}

TEST_F(TrainedTinyProxy, InferenceMatchesTrainingStatistics) {
    // After training the batch-norm buffers hold the exact statistics of the
    // training geomodels, so inference reproduces the training-mode E_train.
    std::vector<double> per;
    const double e = evaluate_split(*pm_, ds_->train, *models_, ErrorConfig{}, &per);
    nn::Tape tp(false);
    nn::Var y;
    auto copy = *pm_;
    training_loss(tp, copy, ds_->train, *models_, ErrorConfig{}, &y);
    std::vector<double> per_train;
    for (std::size_t r = 0; r < ds_->train.size(); ++r)
        per_train.push_back(sample_error(ds_->train[r].rates, to_rates(pm_->cfg, tp.value(y), static_cast<int>(r)), ErrorConfig{}, 2));
    EXPECT_NEAR(e, ensemble_error(per_train), 1e-6);
}

TEST_F(TrainedTinyProxy, RetrainWithZeroRateKeepsParameters) {
    auto pm = *pm_;
    TrainConfig hc = hc_;
    hc.lr = hc.lr_final = 0.0;
    hc.max_epochs = 3;
    retrain(pm, *ds_, *models_, ErrorConfig{}, hc);
    for (int p = 0; p < pm.store.size(); ++p) EXPECT_EQ(pm.store[p].value.data, pm_->store[p].value.data) << pm.store[p].name;
}

TEST_F(TrainedTinyProxy, RetrainOnSameDataDoesNotWorsen) {
    auto pm = *pm_;
    const double before = evaluate_split(pm, ds_->train, *models_, ErrorConfig{});
    TrainConfig hc = hc_;
    hc.lr = hc.lr_final = 1e-4;
    hc.max_epochs = 50;
    retrain(pm, *ds_, *models_, ErrorConfig{}, hc);
    const double after = evaluate_split(pm, ds_->train, *models_, ErrorConfig{});
    EXPECT_LE(after, 1.10 * before);
}

TEST_F(TrainedTinyProxy, SaveLoadRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "clrm_proxy_rt";
    std::filesystem::remove_all(dir);
    save_proxy(dir, *pm_);
    EXPECT_TRUE(std::filesystem::exists(dir / "proxy.ckpt.json"));
    auto back = load_proxy(dir);
    EXPECT_EQ(back.parameter_count(), pm_->parameter_count());
    EXPECT_EQ(back.norm.output_scale, pm_->norm.output_scale);
    const auto& s = ds_->test[0];
    EXPECT_EQ(forward(back, (*models_)[s.realization], s.schedule).values,
              forward(*pm_, (*models_)[s.realization], s.schedule).values);
    std::filesystem::remove_all(dir);
}

TEST_F(TrainedTinyProxy, HistoryCsv) {
    const auto p = std::filesystem::temp_directory_path() / "clrm_history.csv";
    write_history_csv(p, result_->history);
    auto is = open_in(p);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "epoch,L,E_train,E_test,lr");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, static_cast<int>(result_->history.size()));
    std::filesystem::remove(p);
}

TEST(ProxyTraining, NonFiniteTargetsAbort) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 1)};
    auto pm = build_proxy(tiny_config(), kTinyGrid, 1);
    Dataset ds;
    Sample s;
    s.schedule = BhpSchedule(2, 2, 60.0, tiny_bounds());
    s.rates = constant_series(5, {"I1"}, {"P1"}, 10.0);
    s.rates.at(1, 3) = std::numeric_limits<double>::quiet_NaN();
    ds.train.push_back(s);
    try {
        train(pm, ds, models, ErrorConfig{}, TrainConfig{});
        FAIL() << "expected a numerical error";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    }
}

TEST(ProxyTraining, RetrainRequiresTrainedModel) {
    std::vector<Geomodel> models{random_model(kTinyGrid, 1)};
    auto pm = build_proxy(tiny_config(), kTinyGrid, 1);
    EXPECT_THROW(retrain(pm, Dataset{}, models, ErrorConfig{}, TrainConfig{}), ConfigError);
}
