#pragma once

// CNN-RNN well-rate proxy: a 3-stage Conv/BN/ReLU/Pool encoder maps the
// log-permeability field to the LSTM's initial long- and short-term states; the
// LSTM consumes normalized BHPs every report step and a linear head emits
// per-well rates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clrm/common.hpp"
#include "clrm/geostat.hpp"
#include "clrm/nn.hpp"
#include "clrm/resim.hpp"

namespace clrm::proxy {

using geostat::Geomodel;
using geostat::GridSpec;
using resim::BhpSchedule;
using resim::RateSeries;

struct ProxyConfig {
    int nx = 8, ny = 8, nz = 8;  // network input extents, zero-padded beyond the model grid
    std::array<int, 3> channels{4, 8, 16};
    int n_neu = 200;
    int n_t = 31;
    std::vector<std::string> injectors, producers;
    nn::CellActivation cell_activation = nn::CellActivation::relu;
    double report_interval_days = 30.0;

    int n_inj() const { return static_cast<int>(injectors.size()); }
    int n_prod() const { return static_cast<int>(producers.size()); }
    int n_in() const { return n_inj() + n_prod(); }
    int n_out() const { return n_inj() + 2 * n_prod(); }
    int flat_size() const { return (nx / 8) * (ny / 8) * (nz / 8) * channels[2]; }

    void validate() const {
        CLRM_REQUIRE(nx > 0 && ny > 0 && nz > 0 && nx % 8 == 0 && ny % 8 == 0 && nz % 8 == 0, ConfigError,
                     "proxy input extents (" << nx << "," << ny << "," << nz << ") must be positive multiples of 8");
        CLRM_REQUIRE(channels[0] > 0 && channels[1] > 0 && channels[2] > 0, ConfigError, "channel counts must be > 0");
        CLRM_REQUIRE(n_neu >= 1, ConfigError, "N_neu must be >= 1");
        CLRM_REQUIRE(n_t >= 2, ConfigError, "N_t must be >= 2");
        CLRM_REQUIRE(n_prod() >= 1 || n_inj() >= 1, ConfigError, "proxy needs at least one well");
        CLRM_REQUIRE(report_interval_days > 0, ConfigError, "report interval must be > 0");
    }

    std::size_t closed_form_parameter_count() const {
        const std::size_t c1 = channels[0], c2 = channels[1], c3 = channels[2], n = n_neu;
        const std::size_t conv = (27 * 1 * c1 + c1) + (27 * c1 * c2 + c2) + (27 * c2 * c3 + c3);
        const std::size_t bn = 2 * (c1 + c2 + c3);
        const std::size_t fc12 = 2 * (static_cast<std::size_t>(flat_size()) * n + n);
        const std::size_t lstm = 4 * ((static_cast<std::size_t>(n_in()) + n) * n + n);
        const std::size_t fc3 = n * n_out() + n_out();
        return conv + bn + fc12 + lstm + fc3;
    }

    // Smallest multiple-of-8 extents covering the grid.
    static ProxyConfig for_grid(const GridSpec& g, std::vector<std::string> injectors, std::vector<std::string> producers,
                                int n_neu, int n_t) {
        auto up8 = [](int v) { return (v + 7) / 8 * 8; };
        ProxyConfig c;
        c.nx = up8(g.nx);
        c.ny = up8(g.ny);
        c.nz = up8(g.nz);
        c.n_neu = n_neu;
        c.n_t = n_t;
        c.injectors = std::move(injectors);
        c.producers = std::move(producers);
        return c;
    }
};

// Relative-error weights alpha per well type and phase, and the floor on
// the denominator q_sim + alpha.
struct ErrorConfig {
    double alpha_inj_water = 0.0;
    double alpha_prod_oil = 0.0;
    double alpha_prod_water = 20.0;  // m^3/day
    bool time_average = true;        // divide each stream's sum by its number of terms
    double denominator_floor = 1.0;  // m^3/day

    void validate() const {
        CLRM_REQUIRE(alpha_inj_water >= 0 && alpha_prod_oil >= 0 && alpha_prod_water >= 0, ConfigError,
                     "error weights alpha must be >= 0");
        CLRM_REQUIRE(denominator_floor >= 0, ConfigError, "denominator floor must be >= 0");
    }
    double alpha(int stream, int n_inj, int n_prod) const {
        if (stream < n_inj) return alpha_inj_water;
        if (stream < n_inj + n_prod) return alpha_prod_oil;
        return alpha_prod_water;
    }
    double denominator(double q_sim, int stream, int n_inj, int n_prod) const {
        CLRM_REQUIRE(std::isfinite(q_sim), NumericalError, "non-finite simulated rate " << q_sim);
        const double d = std::max(q_sim + alpha(stream, n_inj, n_prod), denominator_floor);
        CLRM_REQUIRE(d > 0, NumericalError, "zero error denominator (simulated rate 0 with alpha = 0 and no floor)");
        return d;
    }
};

// Error of one sample: mean over well-phase streams of the relative-error
// sums over report steps start_t..N_t (1-based).
inline double sample_error(const RateSeries& sim, const RateSeries& prox, const ErrorConfig& ec, int start_t) {
    CLRM_REQUIRE(sim.n_times() == prox.n_times() && sim.n_inj() == prox.n_inj() && sim.n_prod() == prox.n_prod(),
                 ShapeError, "sample_error: rate series shapes differ");
    CLRM_REQUIRE(start_t >= 1 && start_t <= sim.n_times(), ConfigError, "sample_error: start_t out of range");
    const int ns = sim.n_streams(), nt = sim.n_times();
    const double terms = ec.time_average ? static_cast<double>(nt - start_t + 1) : 1.0;
    double total = 0.0;
    for (int s = 0; s < ns; ++s) {
        double e = 0.0;
        for (int t = start_t - 1; t < nt; ++t)
            e += std::abs(sim.at(s, t) - prox.at(s, t)) / ec.denominator(sim.at(s, t), s, sim.n_inj(), sim.n_prod());
        total += e / terms;
    }
    return total / ns;
}

// Mean of per-sample errors.
inline double ensemble_error(const std::vector<double>& per_sample) {
    CLRM_REQUIRE(!per_sample.empty(), ShapeError, "ensemble_error of an empty split");
    double s = 0.0;
    for (double v : per_sample) s += v;
    return s / static_cast<double>(per_sample.size());
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Normalization {
    bool fitted = false;
    double logk_mean = 0.0, logk_sd = 1.0;
    std::vector<std::pair<double, double>> bhp_bounds;  // per schedule well
    std::vector<double> output_scale;                   // per output stream, m^3/day
};

struct ProxyModel {
    ProxyConfig cfg;
    GridSpec grid;
    Normalization norm;
    nn::ParameterStore store;
    nn::BatchNormOptions bn;

    struct Ids {
        std::array<int, 3> conv_w{}, conv_b{}, bn_gamma{}, bn_beta{}, bn_mean{}, bn_var{};
        int fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;
        int lstm_wx = -1, lstm_wh = -1, lstm_b = -1;
        int fc3_w = -1, fc3_b = -1;
    } id;

    std::size_t parameter_count() const { return store.total_count(); }
};

inline ProxyModel build_proxy(const ProxyConfig& cfg, const GridSpec& grid, std::uint64_t seed) {
    cfg.validate();
    grid.validate();
    CLRM_REQUIRE(grid.nx <= cfg.nx && grid.ny <= cfg.ny && grid.nz <= cfg.nz, ConfigError,
                 "grid " << grid.nx << "x" << grid.ny << "x" << grid.nz << " does not fit proxy input " << cfg.nx << "x"
                         << cfg.ny << "x" << cfg.nz);
    ProxyModel m;
    m.cfg = cfg;
    m.grid = grid;
    auto& st = m.store;
    auto& id = m.id;
    int cin = 1;
    for (int l = 0; l < 3; ++l) {
        const int co = cfg.channels[l];
        const std::string p = "conv" + std::to_string(l + 1);
        id.conv_w[l] = st.add(p + ".w", {3, 3, 3, cin, co});
        id.conv_b[l] = st.add(p + ".b", {co});
        const std::string b = "bn" + std::to_string(l + 1);
        id.bn_gamma[l] = st.add(b + ".gamma", {co});
        id.bn_beta[l] = st.add(b + ".beta", {co});
        id.bn_mean[l] = st.add_buffer(b + ".running_mean", {co}, 0.0);
        id.bn_var[l] = st.add_buffer(b + ".running_var", {co}, 1.0);
        cin = co;
    }
    const int n = cfg.n_neu, f = cfg.flat_size();
    id.fc1_w = st.add("fc1.w", {f, n});
    id.fc1_b = st.add("fc1.b", {n});
    id.fc2_w = st.add("fc2.w", {f, n});
    id.fc2_b = st.add("fc2.b", {n});
    id.lstm_wx = st.add("lstm.wx", {cfg.n_in(), 4 * n});
    id.lstm_wh = st.add("lstm.wh", {n, 4 * n});
    id.lstm_b = st.add("lstm.b", {4 * n});
    id.fc3_w = st.add("fc3.w", {n, cfg.n_out()});
    id.fc3_b = st.add("fc3.b", {cfg.n_out()});

    auto rng = make_rng(seed, {tag("proxy-init")});
    cin = 1;
    for (int l = 0; l < 3; ++l) {
        nn::glorot_uniform(st[id.conv_w[l]].value, 27.0 * cin, 27.0 * cfg.channels[l], rng);
        std::fill(st[id.bn_gamma[l]].value.data.begin(), st[id.bn_gamma[l]].value.data.end(), 1.0);
        cin = cfg.channels[l];
    }
    nn::glorot_uniform(st[id.fc1_w].value, f, n, rng);
    nn::glorot_uniform(st[id.fc2_w].value, f, n, rng);
    nn::glorot_uniform(st[id.lstm_wx].value, cfg.n_in(), 4.0 * n, rng);
    nn::glorot_uniform(st[id.lstm_wh].value, n, 4.0 * n, rng);
    nn::glorot_uniform(st[id.fc3_w].value, n, cfg.n_out(), rng);
    return m;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

namespace detail {

inline nn::Tensor input_tensor(const ProxyModel& pm, const std::vector<const Geomodel*>& models) {
    const auto& c = pm.cfg;
    const int g = static_cast<int>(models.size());
    nn::Tensor x({g, c.nx, c.ny, c.nz, 1});
    for (int b = 0; b < g; ++b) {
        const auto& m = *models[b];
        CLRM_REQUIRE(m.grid == pm.grid, ShapeError, "geomodel grid does not match the proxy grid");
        for (int i = 0; i < m.grid.nx; ++i)
            for (int j = 0; j < m.grid.ny; ++j)
                for (int k = 0; k < m.grid.nz; ++k)
                    x[(((static_cast<std::size_t>(b) * c.nx + i) * c.ny + j) * c.nz + k)] =
                        (m.logk[m.grid.index(i, j, k)] - pm.norm.logk_mean) / pm.norm.logk_sd;
    }
    return x;
}

inline std::pair<double, double> bounds_for(const ProxyModel& pm, const BhpSchedule& u, int w) {
    return pm.norm.bhp_bounds.empty() ? u.bounds[w] : pm.norm.bhp_bounds[w];
}

}  // namespace detail

struct InitialStates {
    nn::Var c0, h0;  // (G, N_neu)
};

// CNN encoder over distinct geomodels. Training mode normalizes with batch
// statistics and updates the running buffers with `momentum`.
inline InitialStates encode(nn::Tape& tp, ProxyModel& pm, const std::vector<const Geomodel*>& models, bool train,
                            double momentum) {
    auto& st = pm.store;
    const auto& id = pm.id;
    nn::BatchNormOptions bn = pm.bn;
    bn.momentum = momentum;
    nn::Var x = tp.constant(detail::input_tensor(pm, models));
    for (int l = 0; l < 3; ++l) {
        x = nn::conv3d(tp, x, tp.param(st, id.conv_w[l]), tp.param(st, id.conv_b[l]));
        x = nn::batchnorm(tp, x, tp.param(st, id.bn_gamma[l]), tp.param(st, id.bn_beta[l]), st.buffer(id.bn_mean[l]).value,
                          st.buffer(id.bn_var[l]).value, train, bn);
        x = nn::relu(tp, x);
        x = nn::maxpool3d(tp, x);
    }
    x = nn::reshape(tp, x, {static_cast<int>(models.size()), pm.cfg.flat_size()});
    return {nn::dense(tp, x, tp.param(st, id.fc1_w), tp.param(st, id.fc1_b)),
            nn::dense(tp, x, tp.param(st, id.fc2_w), tp.param(st, id.fc2_b))};
}

// Normalized BHP inputs for RNN step t (0-based): controls of the step that
// contains day interval * t.
inline nn::Tensor step_inputs(const ProxyModel& pm, const std::vector<const BhpSchedule*>& u, int t) {
    const int b = static_cast<int>(u.size()), nin = pm.cfg.n_in();
    nn::Tensor x({b, nin});
    const double day = pm.cfg.report_interval_days * t;
    for (int r = 0; r < b; ++r) {
        CLRM_REQUIRE(u[r]->n_wells == nin, ShapeError, "schedule has " << u[r]->n_wells << " wells, proxy expects " << nin);
        const int s = u[r]->step_at(day);
        for (int w = 0; w < nin; ++w) {
            const auto [lo, hi] = detail::bounds_for(pm, *u[r], w);
            x[static_cast<std::size_t>(r) * nin + w] = hi > lo ? (u[r]->at(w, s) - lo) / (hi - lo) : 0.5;
        }
    }
    return x;
}

// LSTM over N_t steps and the FC3 head; returns (B, N_t, N_out) rates in
// m^3/day, not clamped.
inline nn::Var decode(nn::Tape& tp, ProxyModel& pm, nn::Var c0, nn::Var h0, const std::vector<const BhpSchedule*>& u) {
    auto& st = pm.store;
    const auto& id = pm.id;
    const int b = static_cast<int>(u.size()), nt = pm.cfg.n_t, n = pm.cfg.n_neu, no = pm.cfg.n_out();
    CLRM_REQUIRE(pm.norm.output_scale.size() == static_cast<std::size_t>(no) || pm.norm.output_scale.empty(), ShapeError,
                 "output scale size mismatch");
    nn::Var wx = tp.param(st, id.lstm_wx), wh = tp.param(st, id.lstm_wh), lb = tp.param(st, id.lstm_b);
    nn::LstmState s{h0, c0};
    std::vector<nn::Var> hs;
    hs.reserve(nt);
    for (int t = 0; t < nt; ++t) {
        s = nn::lstm_step(tp, tp.constant(step_inputs(pm, u, t)), s, wx, wh, lb, pm.cfg.cell_activation);
        hs.push_back(s.h);
    }
    nn::Var h = nn::reshape(tp, nn::stack_time(tp, hs), {b * nt, n});
    nn::Var y = nn::dense(tp, h, tp.param(st, id.fc3_w), tp.param(st, id.fc3_b));
    y = nn::reshape(tp, y, {b, nt, no});
    const std::vector<double> scale = pm.norm.output_scale.empty() ? std::vector<double>(no, 1.0) : pm.norm.output_scale;
    return nn::scale_last(tp, y, scale);
}

inline std::vector<double> report_times(const ProxyConfig& cfg) {
    std::vector<double> t(cfg.n_t);
    for (int i = 0; i < cfg.n_t; ++i) t[i] = cfg.report_interval_days * i;
    return t;
}

inline RateSeries to_rates(const ProxyConfig& cfg, const nn::Tensor& y, int row) {
    RateSeries r(report_times(cfg), cfg.injectors, cfg.producers);
    const int nt = cfg.n_t, no = cfg.n_out();
    for (int t = 0; t < nt; ++t)
        for (int s = 0; s < no; ++s) r.at(s, t) = std::max(0.0, y[(static_cast<std::size_t>(row) * nt + t) * no + s]);
    return r;
}

// Cached encoder output for inference over many schedules per geomodel.
struct Encoding {
    nn::Tensor c0, h0;  // (G, N_neu)
};

inline Encoding encode_models(ProxyModel& pm, const std::vector<const Geomodel*>& models) {
    nn::Tape tp(false);
    auto s = encode(tp, pm, models, false, pm.bn.momentum);
    return {tp.value(s.c0), tp.value(s.h0)};
}

// Rates for schedules u[r] on encoded geomodel which[r]; outputs clamped at 0.
inline std::vector<RateSeries> predict(ProxyModel& pm, const Encoding& enc, const std::vector<int>& which,
                                       const std::vector<const BhpSchedule*>& u) {
    CLRM_REQUIRE(which.size() == u.size(), ShapeError, "predict: index/schedule count mismatch");
    if (u.empty()) return {};
    nn::Tape tp(false);
    nn::Var c0 = nn::gather_rows(tp, tp.constant(enc.c0), which);
    nn::Var h0 = nn::gather_rows(tp, tp.constant(enc.h0), which);
    const auto& y = tp.value(decode(tp, pm, c0, h0, u));
    std::vector<RateSeries> out;
    out.reserve(u.size());
    for (std::size_t r = 0; r < u.size(); ++r) out.push_back(to_rates(pm.cfg, y, static_cast<int>(r)));
    return out;
}

inline RateSeries forward(ProxyModel& pm, const Geomodel& m, const BhpSchedule& u) {
    return predict(pm, encode_models(pm, {&m}), {0}, {&u}).front();
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Sample {
    int realization = 0;
    BhpSchedule schedule;
    RateSeries rates;
};

struct Dataset {
    std::uint64_t seed = 0;
    int fixed_steps = 0;
    std::vector<int> realizations;  // model ids present, ascending
    std::vector<Sample> train, test;
};

struct DatasetSpec {
    int n_train = 15;                    // N_B,train per realization
    int n_test = 10;                     // N_B,test per realization
    std::vector<int> n_test_per_model;   // optional override of n_test
    int n_cs = 5;
    double control_days = 180.0;
};

// Uniform BHP draws within bounds for the free control steps; the first
// `fixed_steps` steps are copied from `prefix`.
inline BhpSchedule draw_schedule(const std::vector<std::pair<double, double>>& bounds, int n_cs, double control_days,
                                 const BhpSchedule* prefix, int fixed_steps, Rng& rng) {
    BhpSchedule u(static_cast<int>(bounds.size()), n_cs, control_days, bounds);
    for (int w = 0; w < u.n_wells; ++w)
        for (int s = 0; s < n_cs; ++s) {
            if (s < fixed_steps) {
                u.at(w, s) = prefix->at(w, s);
            } else {
                const auto [lo, hi] = bounds[w];
                u.at(w, s) = lo + uniform01(rng) * (hi - lo);
            }
        }
    return u;
}

inline Dataset make_dataset(const std::vector<Geomodel>& models, const std::vector<int>& realizations,
                            const std::vector<resim::WellSpec>& wells, const resim::FluidSpec& fluid,
                            const resim::Numerics& num, const DatasetSpec& spec,
                            const std::vector<std::pair<double, double>>& bounds, const BhpSchedule* prefix,
                            int fixed_steps, std::uint64_t seed) {
    CLRM_REQUIRE(!realizations.empty(), ConfigError, "make_dataset needs at least one realization");
    CLRM_REQUIRE(spec.n_train >= 1 && spec.n_test >= 0, ConfigError, "make_dataset needs N_B,train >= 1 and N_B,test >= 0");
    CLRM_REQUIRE(bounds.size() == wells.size(), ShapeError, "bounds/well count mismatch");
    CLRM_REQUIRE(fixed_steps >= 0 && fixed_steps <= spec.n_cs, ConfigError, "fixed prefix longer than the schedule");
    CLRM_REQUIRE(fixed_steps == 0 || (prefix && prefix->n_cs == spec.n_cs && prefix->n_wells == static_cast<int>(wells.size())),
                 ConfigError, "fixed prefix schedule missing or mis-shaped");
    CLRM_REQUIRE(spec.n_test_per_model.empty() || spec.n_test_per_model.size() == realizations.size(), ConfigError,
                 "n_test_per_model must list one count per realization");
    for (int r : realizations) CLRM_REQUIRE(r >= 0 && r < static_cast<int>(models.size()), ConfigError, "bad realization id " << r);
    for (std::size_t a = 1; a < realizations.size(); ++a)
        CLRM_REQUIRE(models[realizations[a]].grid == models[realizations[0]].grid, ConfigError, "models must share one grid");

    Dataset ds;
    ds.seed = seed;
    ds.fixed_steps = fixed_steps;
    ds.realizations = realizations;
    std::sort(ds.realizations.begin(), ds.realizations.end());

    struct Job {
        int realization;
        bool train;
        int slot;
    };
    std::vector<Job> jobs;
    for (std::size_t k = 0; k < realizations.size(); ++k) {
        const int n_test = spec.n_test_per_model.empty() ? spec.n_test : spec.n_test_per_model[k];
        for (int j = 0; j < spec.n_train + n_test; ++j) jobs.push_back({realizations[k], j < spec.n_train, j});
    }
    std::vector<Sample> samples(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
        const auto& jb = jobs[i];
        try {
            auto rng = make_rng(seed, {tag("dataset"), static_cast<std::uint64_t>(jb.realization),
                                       static_cast<std::uint64_t>(jb.slot)});
            samples[i].realization = jb.realization;
            samples[i].schedule = draw_schedule(bounds, spec.n_cs, spec.control_days, prefix, fixed_steps, rng);
            samples[i].rates = resim::simulate(models[jb.realization], fluid, wells, samples[i].schedule, num);
        } catch (...) {
            rethrow_with_context("dataset sample " + std::to_string(i) + " (realization " +
                                 std::to_string(jb.realization) + ", schedule " + std::to_string(jb.slot) + ")");
        }
    });
    for (std::size_t i = 0; i < jobs.size(); ++i) (jobs[i].train ? ds.train : ds.test).push_back(std::move(samples[i]));
    return ds;
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds, const std::vector<resim::WellSpec>& wells) {
    nlohmann::json j;
    j["seed"] = ds.seed;
    j["fixed_steps"] = ds.fixed_steps;
    j["realizations"] = ds.realizations;
    std::vector<std::string> names;
    for (const auto& w : wells) names.push_back(w.name);
    j["wells"] = names;
    const auto* first = !ds.train.empty() ? &ds.train.front() : nullptr;
    if (first) {
        j["n_cs"] = first->schedule.n_cs;
        j["control_days"] = first->schedule.control_days;
        j["bounds"] = first->schedule.bounds;
    }
    for (const char* split : {"train", "test"}) {
        const auto& v = std::string(split) == "train" ? ds.train : ds.test;
        j[split] = nlohmann::json::array();
        for (std::size_t i = 0; i < v.size(); ++i) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "%s/%04zu", split, i);
            resim::write_rates_csv(dir / (std::string(stem) + "_rates.csv"), v[i].rates);
            resim::write_schedule_csv(dir / (std::string(stem) + "_schedule.csv"), v[i].schedule, wells);
            j[split].push_back({{"realization", v[i].realization}, {"stem", stem}});
        }
    }
    auto os = open_out(dir / "manifest.json");
    os << j.dump(2) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& dir, const std::vector<resim::WellSpec>& wells) {
    nlohmann::json j;
    try {
        auto is = open_in(dir / "manifest.json");
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad dataset manifest in " + dir.string() + ": " + e.what());
    }
    Dataset ds;
    ds.seed = j.at("seed").get<std::uint64_t>();
    ds.fixed_steps = j.at("fixed_steps").get<int>();
    ds.realizations = j.at("realizations").get<std::vector<int>>();
    const auto names = j.at("wells").get<std::vector<std::string>>();
    CLRM_REQUIRE(names.size() == wells.size(), IoError, "dataset wells do not match the configuration");
    for (std::size_t w = 0; w < wells.size(); ++w)
        CLRM_REQUIRE(names[w] == wells[w].name, IoError, "dataset well " << names[w] << " != " << wells[w].name);
    const int n_cs = j.at("n_cs").get<int>();
    const double days = j.at("control_days").get<double>();
    const auto bounds = j.at("bounds").get<std::vector<std::pair<double, double>>>();
    for (const char* split : {"train", "test"}) {
        auto& v = std::string(split) == "train" ? ds.train : ds.test;
        for (const auto& e : j.at(split)) {
            Sample s;
            s.realization = e.at("realization").get<int>();
            const auto stem = e.at("stem").get<std::string>();
            s.rates = resim::read_rates_csv(dir / (stem + "_rates.csv"));
            s.schedule = BhpSchedule(static_cast<int>(wells.size()), n_cs, days, bounds);
            resim::read_schedule_csv(dir / (stem + "_schedule.csv"), s.schedule, wells);
            v.push_back(std::move(s));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-3;
    double lr_final = 1e-4;
    double tol = 0.05;
    double switch_factor = 2.0;  // lr drops to lr_final once E_train < switch_factor * tol
    int max_epochs = 20000;
    int log_interval = 10;
    double divergence_factor = 10.0;
};

struct HistoryRow {
    int epoch = 0;
    double loss = 0, e_train = 0, e_test = 0, lr = 0;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    bool converged = false;
    int epochs = 0;
    double e_train = 0, e_test = 0;
};

namespace detail {

struct Batch {
    std::vector<const Geomodel*> models;  // distinct geomodels
    std::vector<int> which;               // per sample, index into models
    std::vector<const BhpSchedule*> u;
    std::vector<const RateSeries*> target;
};

inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<Geomodel>& models) {
    Batch b;
    std::map<int, int> slot;
    for (const auto& s : samples) slot.emplace(s.realization, 0);
    for (auto& [r, k] : slot) {
        CLRM_REQUIRE(r >= 0 && r < static_cast<int>(models.size()), ConfigError, "sample refers to unknown realization " << r);
        k = static_cast<int>(b.models.size());
        b.models.push_back(&models[r]);
    }
    for (const auto& s : samples) {
        b.which.push_back(slot[s.realization]);
        b.u.push_back(&s.schedule);
        b.target.push_back(&s.rates);
    }
    return b;
}

// Targets and relative-error weights for the loss over report steps start_t..N_t,
// averaged over samples and streams.
inline std::pair<nn::Tensor, nn::Tensor> loss_terms(const ProxyModel& pm, const Batch& b, const ErrorConfig& ec,
                                                    int start_t) {
    const int nb = static_cast<int>(b.u.size()), nt = pm.cfg.n_t, no = pm.cfg.n_out();
    nn::Tensor target({nb, nt, no}), weight({nb, nt, no});
    const double terms = ec.time_average ? static_cast<double>(nt - start_t + 1) : 1.0;
    for (int r = 0; r < nb; ++r) {
        const auto& q = *b.target[r];
        CLRM_REQUIRE(q.n_times() == nt && q.n_streams() == no, ShapeError,
                     "training target has " << q.n_times() << " times / " << q.n_streams() << " streams, proxy expects "
                                            << nt << " / " << no);
        for (int t = 0; t < nt; ++t)
            for (int s = 0; s < no; ++s) {
                const std::size_t i = (static_cast<std::size_t>(r) * nt + t) * no + s;
                target[i] = q.at(s, t);
                weight[i] = t + 1 >= start_t
                                ? 1.0 / (ec.denominator(q.at(s, t), s, pm.cfg.n_inj(), pm.cfg.n_prod()) * terms * no * nb)
                                : 0.0;
            }
    }
    return {std::move(target), std::move(weight)};
}

inline std::vector<double> per_sample_errors(const ProxyModel& pm, const Batch& b, const nn::Tensor& y,
                                             const ErrorConfig& ec) {
    std::vector<double> e(b.u.size());
    for (std::size_t r = 0; r < b.u.size(); ++r) e[r] = sample_error(*b.target[r], to_rates(pm.cfg, y, static_cast<int>(r)), ec, 2);
    return e;
}

}  // namespace detail

// Training loss L (ensemble error with sums from t = 1) on a set of
// samples, recorded on `tp`. Batch-norm runs in training mode.
inline nn::Var training_loss(nn::Tape& tp, ProxyModel& pm, const std::vector<Sample>& samples,
                             const std::vector<Geomodel>& models, const ErrorConfig& ec, nn::Var* outputs = nullptr) {
    const auto b = detail::make_batch(samples, models);
    auto init = encode(tp, pm, b.models, true, pm.bn.momentum);
    nn::Var c0 = nn::gather_rows(tp, init.c0, b.which);
    nn::Var h0 = nn::gather_rows(tp, init.h0, b.which);
    nn::Var y = decode(tp, pm, c0, h0, b.u);
    if (outputs) *outputs = y;
    auto [target, weight] = detail::loss_terms(pm, b, ec, 1);
    return nn::weighted_abs_error(tp, y, target, weight);
}

// Input/output normalization from a training split (frozen afterwards).
inline void fit_normalization(ProxyModel& pm, const Dataset& ds, const std::vector<Geomodel>& models) {
    CLRM_REQUIRE(!ds.train.empty(), ConfigError, "cannot fit normalization on an empty training split");
    std::set<int> ids;
    for (const auto& s : ds.train) ids.insert(s.realization);
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (int r : ids)
        for (double v : models[r].logk) {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    pm.norm.logk_mean = sum / n;
    pm.norm.logk_sd = std::sqrt(std::max(sq / n - pm.norm.logk_mean * pm.norm.logk_mean, 0.0));
    if (!(pm.norm.logk_sd > 1e-12)) pm.norm.logk_sd = 1.0;
    pm.norm.bhp_bounds = ds.train.front().schedule.bounds;
    pm.norm.output_scale.assign(pm.cfg.n_out(), 0.0);
    for (const auto& s : ds.train)
        for (int k = 0; k < s.rates.n_streams(); ++k)
            for (int t = 0; t < s.rates.n_times(); ++t)
                pm.norm.output_scale[k] = std::max(pm.norm.output_scale[k], s.rates.at(k, t));
    for (auto& v : pm.norm.output_scale) v = std::max(v, 1.0);
    pm.norm.fitted = true;
}

// Sets the batch-norm buffers to the exact batch statistics of `models`
// under the current parameters.
inline void refresh_batchnorm(ProxyModel& pm, const std::vector<const Geomodel*>& models) {
    nn::Tape tp(false);
    encode(tp, pm, models, true, 0.0);
}

inline double evaluate_split(ProxyModel& pm, const std::vector<Sample>& samples, const std::vector<Geomodel>& models,
                             const ErrorConfig& ec, std::vector<double>* per_sample = nullptr) {
    if (samples.empty()) return 0.0;
    const auto b = detail::make_batch(samples, models);
    const auto enc = encode_models(pm, b.models);
    nn::Tape tp(false);
    nn::Var c0 = nn::gather_rows(tp, tp.constant(enc.c0), b.which);
    nn::Var h0 = nn::gather_rows(tp, tp.constant(enc.h0), b.which);
    const auto e = detail::per_sample_errors(pm, b, tp.value(decode(tp, pm, c0, h0, b.u)), ec);
    if (per_sample) *per_sample = e;
    return ensemble_error(e);
}

// Full-batch Adam on L. E_train is evaluated each epoch from the same forward
// pass (start_t = 2, outputs clamped); E_test is logged every log_interval
// epochs. Stops when E_train < tol or at max_epochs.
inline TrainResult train(ProxyModel& pm, const Dataset& ds, const std::vector<Geomodel>& models, const ErrorConfig& ec,
                         const TrainConfig& hc) {
    ec.validate();
    CLRM_REQUIRE(!ds.train.empty(), ConfigError, "training split is empty");
    CLRM_REQUIRE(hc.lr >= 0 && hc.lr_final >= 0 && hc.max_epochs >= 1 && hc.log_interval >= 1, ConfigError,
                 "invalid training hyperparameters");
    if (!pm.norm.fitted) fit_normalization(pm, ds, models);
    const auto batch = detail::make_batch(ds.train, models);

    nn::Adam adam;
    adam.lr = hc.lr;
    TrainResult res;
    double first_loss = -1.0;
    auto log = [&](int epoch, double loss, double e_train) {
        refresh_batchnorm(pm, batch.models);
        const double e_test = evaluate_split(pm, ds.test, models, ec);
        res.history.push_back({epoch, loss, e_train, e_test, adam.lr});
        res.e_test = e_test;
    };

    for (int epoch = 1; epoch <= hc.max_epochs; ++epoch) {
        pm.store.zero_grad();
        nn::Tape tp;
        nn::Var y, loss;
        try {
            loss = training_loss(tp, pm, ds.train, models, ec, &y);
        } catch (...) {
            rethrow_with_context("training epoch " + std::to_string(epoch));
        }
        const double l = tp.value(loss)[0];
        CLRM_REQUIRE(std::isfinite(l), NumericalError, "non-finite training loss at epoch " << epoch);
        if (first_loss < 0) first_loss = l;
        CLRM_REQUIRE(l <= hc.divergence_factor * first_loss, NumericalError,
                     "training diverged at epoch " << epoch << " (loss " << l << " vs initial " << first_loss << ")");
        const double e_train = ensemble_error(detail::per_sample_errors(pm, batch, tp.value(y), ec));
        res.epochs = epoch;
        res.e_train = e_train;
        const bool done = e_train < hc.tol;
        if (done || epoch == 1 || epoch % hc.log_interval == 0 || epoch == hc.max_epochs) log(epoch, l, e_train);
        if (done) {
            res.converged = true;
            break;
        }
        if (e_train < hc.switch_factor * hc.tol) adam.lr = hc.lr_final;
        tp.backward(loss);
        adam.step(pm.store);
    }
    refresh_batchnorm(pm, batch.models);
    return res;
}

// Warm-start continuation with the retraining hyperparameters; normalization
// stays frozen.
inline TrainResult retrain(ProxyModel& pm, const Dataset& ds, const std::vector<Geomodel>& models, const ErrorConfig& ec,
                           TrainConfig hc) {
    CLRM_REQUIRE(pm.norm.fitted, ConfigError, "retrain needs a previously trained proxy");
    return train(pm, ds, models, ec, hc);
}

inline void write_history_csv(const std::filesystem::path& p, const std::vector<HistoryRow>& h) {
    auto os = open_out(p);
    os << "epoch,L,E_train,E_test,lr\n";
    for (const auto& r : h)
        os << r.epoch << ',' << fmt12(r.loss) << ',' << fmt12(r.e_train) << ',' << fmt12(r.e_test) << ',' << fmt12(r.lr) << '\n';
}

// ---------------------------------------------------------------------------
// Persistence: proxy.json (configuration, grid, normalization) + checkpoint.
// ---------------------------------------------------------------------------

inline void save_proxy(const std::filesystem::path& dir, const ProxyModel& pm) {
    nlohmann::json j;
    const auto& c = pm.cfg;
    j["input_extents"] = {c.nx, c.ny, c.nz};
    j["channels"] = c.channels;
    j["n_neu"] = c.n_neu;
    j["n_t"] = c.n_t;
    j["injectors"] = c.injectors;
    j["producers"] = c.producers;
    j["cell_activation"] = c.cell_activation == nn::CellActivation::relu ? "relu" : "tanh";
    j["report_interval_days"] = c.report_interval_days;
    j["grid"] = {{"nx", pm.grid.nx}, {"ny", pm.grid.ny}, {"nz", pm.grid.nz},
                 {"dx", pm.grid.dx}, {"dy", pm.grid.dy}, {"dz", pm.grid.dz}};
    j["normalization"] = {{"fitted", pm.norm.fitted},
                          {"logk_mean", pm.norm.logk_mean},
                          {"logk_sd", pm.norm.logk_sd},
                          {"bhp_bounds", pm.norm.bhp_bounds},
                          {"output_scale", pm.norm.output_scale}};
    j["batchnorm"] = {{"momentum", pm.bn.momentum}, {"eps", pm.bn.eps}};
    j["trainable_parameters"] = pm.parameter_count();
    auto os = open_out(dir / "proxy.json");
    os << std::setprecision(17) << j.dump(2) << '\n';
    nn::save_checkpoint(dir / "proxy.ckpt", pm.store);
}

inline ProxyModel load_proxy(const std::filesystem::path& dir) {
    nlohmann::json j;
    try {
        auto is = open_in(dir / "proxy.json");
        j = nlohmann::json::parse(is);
        ProxyConfig c;
        const auto ext = j.at("input_extents").get<std::vector<int>>();
        CLRM_REQUIRE(ext.size() == 3, IoError, "bad input_extents");
        c.nx = ext[0];
        c.ny = ext[1];
        c.nz = ext[2];
        c.channels = j.at("channels").get<std::array<int, 3>>();
        c.n_neu = j.at("n_neu").get<int>();
        c.n_t = j.at("n_t").get<int>();
        c.injectors = j.at("injectors").get<std::vector<std::string>>();
        c.producers = j.at("producers").get<std::vector<std::string>>();
        c.cell_activation = j.at("cell_activation").get<std::string>() == "tanh" ? nn::CellActivation::tanh
                                                                               : nn::CellActivation::relu;
        c.report_interval_days = j.at("report_interval_days").get<double>();
        const auto& g = j.at("grid");
        GridSpec grid{g.at("nx").get<int>(), g.at("ny").get<int>(), g.at("nz").get<int>(),
                      g.at("dx").get<double>(), g.at("dy").get<double>(), g.at("dz").get<double>()};
        ProxyModel pm = build_proxy(c, grid, 0);
        const auto& n = j.at("normalization");
        pm.norm.fitted = n.at("fitted").get<bool>();
        pm.norm.logk_mean = n.at("logk_mean").get<double>();
        pm.norm.logk_sd = n.at("logk_sd").get<double>();
        pm.norm.bhp_bounds = n.at("bhp_bounds").get<std::vector<std::pair<double, double>>>();
        pm.norm.output_scale = n.at("output_scale").get<std::vector<double>>();
        pm.bn.momentum = j.at("batchnorm").at("momentum").get<double>();
        pm.bn.eps = j.at("batchnorm").at("eps").get<double>();
        nn::load_checkpoint(dir / "proxy.ckpt", pm.store);
        return pm;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad proxy description in " + dir.string() + ": " + e.what());
    }
}

}  // namespace clrm::proxy
