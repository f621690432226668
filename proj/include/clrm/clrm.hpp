#pragma once

// Closed-loop reservoir management: initial proxy training, then per cycle
// robust optimization with the proxy, operation of the true model for one
// control step, history matching on everything observed so far and proxy
// retraining. Keeps the simulation ledger.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clrm/common.hpp"
#include "clrm/config.hpp"
#include "clrm/geostat.hpp"
#include "clrm/hm.hpp"
#include "clrm/proxy.hpp"
#include "clrm/resim.hpp"
#include "clrm/robustopt.hpp"

namespace clrm::loop {

using config::RunConfig;
using geostat::Geomodel;
using resim::BhpSchedule;
using resim::RateSeries;

// ---------------------------------------------------------------------------
// Setup shared with the stage-by-stage CLI
// ---------------------------------------------------------------------------

struct Geomodels {
    geostat::HardData hard_data;
    std::vector<Geomodel> priors;  // n_prior realizations, PCA inputs
    std::vector<Geomodel> truths;  // n_truth realizations, never seen by the loop
};

inline Geomodels generate_models(const RunConfig& c) {
    const auto cells = c.hard_data_cells();
    Geomodels g;
    g.hard_data = geostat::draw_hard_data(c.grid, c.variogram, cells, stream_seed(c.seed, {tag("hard-data")}));
    auto all = geostat::sample_realizations(c.grid, c.variogram, g.hard_data, c.geomodels.n_prior + c.geomodels.n_truth,
                                            stream_seed(c.seed, {tag("realizations")}));
    g.truths.assign(all.begin() + c.geomodels.n_prior, all.end());
    all.resize(c.geomodels.n_prior);
    g.priors = std::move(all);
    return g;
}

inline geostat::PcaBasis build_basis(const RunConfig& c, const std::vector<Geomodel>& priors) {
    auto pb = geostat::build_pca(priors, c.geomodels.energy_target);
    CLRM_REQUIRE(pb.l <= c.geomodels.max_latent, ConfigError,
                 "PCA needs l = " << pb.l << " components for the energy target, above max_latent = "
                                  << c.geomodels.max_latent);
    return pb;
}

// First `steps` control steps of u.
inline BhpSchedule truncate(const BhpSchedule& u, int steps) {
    BhpSchedule t(u.n_wells, steps, u.control_days, u.bounds);
    for (int w = 0; w < u.n_wells; ++w)
        for (int s = 0; s < steps; ++s) t.at(w, s) = u.at(w, s);
    return t;
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

struct Ledger {
    long long training_sims = 0;    // proxy training splits
    long long test_sims = 0;        // proxy test splits
    long long hm_sims = 0;          // RML forward runs
    long long validation_sims = 0;  // simulator checks of optimized schedules
    long long truth_sims = 0;       // runs of the true model
    long long proxy_evaluations = 0;

    long long total() const { return training_sims + test_sims + hm_sims + validation_sims + truth_sims; }
};

// Simulation counts of proxy-based and simulation-based CLRM for a
// configuration. Training counts cover the training splits only.
struct LedgerReport {
    long long initial_training = 0, retraining_per_cycle = 0;
    long long proxy_training = 0;
    long long counterfactual_ro = 0;
    long long hm = 0;
    long long proxy_total = 0, counterfactual_total = 0;
    double ro_speedup = 0.0, total_speedup = 0.0;
};

inline LedgerReport ledger_report(const RunConfig& c, long long hm_sims) {
    LedgerReport r;
    const long long n_r = c.clrm.n_r;
    r.initial_training = n_r * c.dataset.n_train;
    r.retraining_per_cycle = n_r * c.dataset.retrain_n_train;
    r.proxy_training = r.initial_training + (c.clrm.n_cyc - 1) * r.retraining_per_cycle;
    r.counterfactual_ro = static_cast<long long>(c.clrm.n_cyc) * c.robust.pso.n_s * c.robust.pso.n_i * n_r;
    r.hm = hm_sims;
    r.proxy_total = r.proxy_training + hm_sims;
    r.counterfactual_total = r.counterfactual_ro + hm_sims;
    r.ro_speedup = static_cast<double>(r.counterfactual_ro) / static_cast<double>(r.proxy_training);
    r.total_speedup = static_cast<double>(r.counterfactual_total) / static_cast<double>(r.proxy_total);
    return r;
}

// History-matching cost assumed for a configuration that has not been run.
inline long long reference_hm_sims(const RunConfig& c) {
    return std::llround((c.clrm.n_cyc - 1) * c.clrm.n_r * c.hm.reference_sims_per_run);
}

inline std::string with_commas(long long v) {
    std::string s = std::to_string(v < 0 ? -v : v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
    return v < 0 ? "-" + s : s;
}

inline std::string fixed2(double v) {
    char b[64];
    std::snprintf(b, sizeof b, "%.2f", v);
    return b;
}

inline std::vector<std::string> ledger_lines(const RunConfig& c, const LedgerReport& r) {
    return {
        "proxy-side training simulations: " + with_commas(r.initial_training) + " + " +
            with_commas(r.retraining_per_cycle) + " x " + std::to_string(c.clrm.n_cyc - 1) + " = " +
            with_commas(r.proxy_training),
        "simulation-based robust optimization: " + std::to_string(c.clrm.n_cyc) + " x " +
            std::to_string(c.robust.pso.n_s) + " x " + std::to_string(c.robust.pso.n_i) + " x " +
            std::to_string(c.clrm.n_r) + " = " + with_commas(r.counterfactual_ro),
        "robust optimization speedup: " + with_commas(r.counterfactual_ro) + " / " + with_commas(r.proxy_training) +
            " = " + fixed2(r.ro_speedup),
        "history matching simulations: " + with_commas(r.hm),
        "total: " + with_commas(r.counterfactual_total) + " / " + with_commas(r.proxy_total) + " = " +
            fixed2(r.total_speedup),
    };
}

inline nlohmann::json ledger_json(const RunConfig& c, const LedgerReport& r) {
    return {{"initial_training_sims", r.initial_training},
            {"retraining_sims_per_cycle", r.retraining_per_cycle},
            {"proxy_training_sims", r.proxy_training},
            {"counterfactual_ro_sims", r.counterfactual_ro},
            {"hm_sims", r.hm},
            {"proxy_total_sims", r.proxy_total},
            {"counterfactual_total_sims", r.counterfactual_total},
            {"ro_speedup", r.ro_speedup},
            {"total_speedup", r.total_speedup},
            {"lines", ledger_lines(c, r)}};
}

// ---------------------------------------------------------------------------
// Cycle records
// ---------------------------------------------------------------------------

struct HmSummary {
    int n_obs = 0;
    double window_days = 0.0;
    std::vector<double> initial_mismatch, final_mismatch;
    int degraded = 0;
    long long simulations = 0;

    double improved_fraction() const {
        if (initial_mismatch.empty()) return 1.0;
        int n = 0;
        for (std::size_t k = 0; k < initial_mismatch.size(); ++k) n += final_mismatch[k] < initial_mismatch[k];
        return static_cast<double>(n) / static_cast<double>(initial_mismatch.size());
    }
};

struct TrainingSummary {
    int epochs = 0;
    bool converged = false;
    double e_train = 0.0, e_test = 0.0;
};

struct CycleRecord {
    int cycle = 0;  // 1-based
    int fixed_steps = 0;
    BhpSchedule schedule;  // optimized plan u^c over the full horizon
    double J = 0.0, h = 0.0;
    robustopt::EnsembleEval proxy_eval, sim_eval;
    std::vector<double> sim_peaks_all;  // per constraint, max over all realizations
    bool sim_feasible = true;           // kept realizations satisfy every constraint under the simulator
    double truth_npv = 0.0;             // plan u^c on the true model
    std::vector<double> u1_sim_npvs;    // plan u^1 on this cycle's ensemble
    double u1_expected_sim_npv = 0.0;
    double u1_npv_iqr = 0.0;
    std::optional<HmSummary> hm;
    TrainingSummary training;
    Ledger ledger;  // increments charged during this cycle
};

inline double iqr(const std::vector<double>& v) { return percentile(v, 0.75) - percentile(v, 0.25); }

struct ClrmResult {
    std::vector<CycleRecord> cycles;
    Ledger ledger;
    int latent_dim = 0;
    double energy_fraction = 0.0;
    double truth_npv_u1 = 0.0, truth_npv_final = 0.0;
    double final_u1_expected_sim_npv = 0.0, final_expected_sim_npv = 0.0;
};

struct Options {
    std::filesystem::path out;  // empty: no files
    bool verbose = false;
    bool simulator_optimization = false;  // optimize with the simulator instead of the proxy
};

namespace detail {

inline void log(const Options& o, const std::string& s) {
    if (o.verbose) std::cerr << "[clrm] " << s << std::endl;
}

inline nlohmann::json hm_json(const HmSummary& h) {
    return {{"n_obs", h.n_obs},
            {"window_days", h.window_days},
            {"improved_fraction", h.improved_fraction()},
            {"degraded_runs", h.degraded},
            {"simulations", h.simulations},
            {"initial_mismatch", h.initial_mismatch},
            {"final_mismatch", h.final_mismatch}};
}

inline nlohmann::json ledger_counts(const Ledger& l) {
    return {{"training_sims", l.training_sims}, {"test_sims", l.test_sims},
            {"hm_sims", l.hm_sims},             {"validation_sims", l.validation_sims},
            {"truth_sims", l.truth_sims},       {"proxy_evaluations", l.proxy_evaluations},
            {"total_sims", l.total()}};
}

inline nlohmann::json cycle_json(const CycleRecord& r) {
    nlohmann::json j = {{"cycle", r.cycle},
                        {"fixed_steps", r.fixed_steps},
                        {"J", r.J},
                        {"h", r.h},
                        {"expected_proxy_npv", r.proxy_eval.expected_npv},
                        {"expected_sim_npv", r.sim_eval.expected_npv},
                        {"kept_proxy", r.proxy_eval.kept},
                        {"kept_sim", r.sim_eval.kept},
                        {"proxy_peaks", r.proxy_eval.peaks},
                        {"sim_peaks_kept", r.sim_eval.peaks},
                        {"sim_peaks_all", r.sim_peaks_all},
                        {"sim_feasible", r.sim_feasible},
                        {"truth_npv", r.truth_npv},
                        {"u1_expected_sim_npv", r.u1_expected_sim_npv},
                        {"u1_npv_iqr", r.u1_npv_iqr},
                        {"training",
                         {{"epochs", r.training.epochs},
                          {"converged", r.training.converged},
                          {"e_train", r.training.e_train},
                          {"e_test", r.training.e_test}}},
                        {"ledger", ledger_counts(r.ledger)}};
    j["hm"] = r.hm ? hm_json(*r.hm) : nlohmann::json(nullptr);
    return j;
}

inline void write_npv_csv(const std::filesystem::path& p, const CycleRecord& r) {
    auto os = open_out(p);
    os << "realization,proxy_npv,sim_npv,kept_proxy,kept_sim,u1_sim_npv\n";
    auto has = [](const std::vector<int>& v, int i) { return std::find(v.begin(), v.end(), i) != v.end(); };
    for (std::size_t i = 0; i < r.proxy_eval.npvs.size(); ++i) {
        const int k = static_cast<int>(i);
        os << i << ',' << fmt12(r.proxy_eval.npvs[i]) << ',' << fmt12(r.sim_eval.npvs[i]) << ','
           << has(r.proxy_eval.kept, k) << ',' << has(r.sim_eval.kept, k) << ',' << fmt12(r.u1_sim_npvs[i]) << '\n';
    }
}

// Constrained quantities in time for each realization and the truth.
inline void write_constraint_csv(const std::filesystem::path& p, const std::vector<robustopt::ConstraintSpec>& cs,
                                 const std::vector<RateSeries>& sims, const RateSeries& truth) {
    auto os = open_out(p);
    os << "source,realization,time_days,constraint,value,limit\n";
    auto emit = [&](const std::string& src, int id, const RateSeries& r) {
        for (const auto& c : cs)
            for (int t = 0; t < r.n_times(); ++t)
                os << src << ',' << id << ',' << fmt12(r.times[t]) << ',' << c.label() << ','
                   << fmt12(robustopt::constraint_quantity(r, c, t)) << ',' << fmt12(c.limit) << '\n';
    };
    for (std::size_t i = 0; i < sims.size(); ++i) emit("realization", static_cast<int>(i), sims[i]);
    emit("truth", -1, truth);
}

inline void write_observations_csv(const std::filesystem::path& p, const hm::ObservationSet& o, const RateSeries& truth) {
    auto os = open_out(p);
    os << "stream,time_days,d_true,d_obs,sd\n";
    for (std::size_t i = 0; i < o.size(); ++i)
        os << truth.stream_name(o.stream[i]) << ',' << fmt12(truth.times[o.time_row[i]]) << ',' << fmt12(o.d_true[i])
           << ',' << fmt12(o.d_obs[i]) << ',' << fmt12(o.sd[i]) << '\n';
}

inline std::vector<double> constraint_limits(const std::vector<robustopt::ConstraintSpec>& cs) {
    std::vector<double> v;
    for (const auto& c : cs) v.push_back(c.limit);
    return v;
}

}  // namespace detail

inline nlohmann::json summary_json(const RunConfig& c, const ClrmResult& res, const std::string& status,
                                   const std::string& error = {}) {
    nlohmann::json j;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    j["profile"] = c.profile;
    j["seed"] = c.seed;
    j["latent_dim"] = res.latent_dim;
    j["energy_fraction"] = res.energy_fraction;
    j["cycles"] = nlohmann::json::array();
    for (const auto& r : res.cycles) j["cycles"].push_back(detail::cycle_json(r));
    if (status == "ok") {
        j["truth_npv_u1"] = res.truth_npv_u1;
        j["truth_npv_final"] = res.truth_npv_final;
        j["final_ensemble"] = {{"u1_expected_sim_npv", res.final_u1_expected_sim_npv},
                               {"final_expected_sim_npv", res.final_expected_sim_npv}};
    }
    j["ledger"] = detail::ledger_counts(res.ledger);
    return j;
}

// Runs the whole loop for one true model. Cycle directories are written as
// they complete; on failure summary.json records the completed cycles and the
// error before the exception propagates.
inline ClrmResult run_clrm(const RunConfig& c, const Options& opt = {}) {
    c.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        char b[32];
        std::snprintf(b, sizeof b, "(%.1f s)", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        return std::string(b);
    };
    const bool files = !opt.out.empty();
    if (files) std::filesystem::create_directories(opt.out);
    ClrmResult res;
    try {
        const auto g = generate_models(c);
        const auto basis = build_basis(c, g.priors);
        res.latent_dim = basis.l;
        res.energy_fraction = basis.energy_fraction;
        const Geomodel& truth = g.truths[c.clrm.truth];
        std::vector<Geomodel> ensemble(g.priors.begin(), g.priors.begin() + c.clrm.n_r);
        detail::log(opt, "models ready (l = " + std::to_string(basis.l) + ") " + elapsed());

        const auto wells = c.wells;
        const auto bounds = c.well_bounds();
        std::vector<int> ids(c.clrm.n_r);
        std::iota(ids.begin(), ids.end(), 0);
        auto pm = proxy::build_proxy(c.proxy_config(), c.grid, stream_seed(c.seed, {tag("proxy-init")}));
        BhpSchedule operated = c.base_schedule();
        BhpSchedule u1;
        const auto limits = detail::constraint_limits(c.constraints);

        for (int cyc = 1; cyc <= c.clrm.n_cyc; ++cyc) {
            CycleRecord rec;
            rec.cycle = cyc;
            rec.fixed_steps = cyc - 1;
            const auto cdir = opt.out / ("cycle_" + std::to_string(cyc));
            if (files) std::filesystem::create_directories(cdir);
            try {
                // Assimilation of everything observed up to the current day.
                if (cyc >= 2) {
                    const auto observed = truncate(operated, cyc - 1);
                    const auto truth_rates = resim::simulate(truth, c.fluid, wells, observed, c.numerics);
                    ++rec.ledger.truth_sims;
                    const double window = observed.horizon();
                    const auto obs = hm::observe(truth_rates, window, c.hm.obs, stream_seed(c.seed, {tag("observations")}));
                    const auto fwd = hm::simulator_forward(basis, c.fluid, wells, observed, c.numerics, obs);
                    const auto ens = hm::posterior_ensemble(fwd, std::vector<double>(basis.l, 0.0), obs, c.clrm.n_r, c.hm.lm,
                                                            c.hm.sampling, stream_seed(c.seed, {tag("rml"), static_cast<std::uint64_t>(cyc)}));
                    HmSummary hs;
                    hs.n_obs = static_cast<int>(obs.size());
                    hs.window_days = window;
                    hs.simulations = ens.simulations;
                    for (const auto& r : ens.runs) {
                        hs.initial_mismatch.push_back(r.initial_mismatch);
                        hs.final_mismatch.push_back(r.final_mismatch);
                        hs.degraded += r.degraded;
                    }
                    rec.ledger.hm_sims += ens.simulations;
                    rec.hm = hs;
                    ensemble = hm::posterior_models(basis, ens);
                    if (files) {
                        hm::write_hm_report(cdir / "hm_report.json", ens);
                        detail::write_observations_csv(cdir / "observations.csv", obs, truth_rates);
                    }
                    detail::log(opt, "cycle " + std::to_string(cyc) + ": history matched " + std::to_string(hs.n_obs) +
                                         " data, " + std::to_string(ens.simulations) + " sims, improved " +
                                         fmt12(hs.improved_fraction()) + " " + elapsed());
                }

                // Proxy training (initial) or retraining with the operated prefix.
                const bool initial = cyc == 1;
                const auto spec = initial ? c.initial_dataset_spec() : c.retrain_dataset_spec();
                const auto ds = proxy::make_dataset(ensemble, ids, wells, c.fluid, c.numerics, spec, bounds,
                                                    initial ? nullptr : &operated, cyc - 1,
                                                    stream_seed(c.seed, {tag("dataset"), static_cast<std::uint64_t>(cyc)}));
                rec.ledger.training_sims += static_cast<long long>(ds.train.size());
                rec.ledger.test_sims += static_cast<long long>(ds.test.size());
                const auto tr = initial ? proxy::train(pm, ds, ensemble, c.error, c.training)
                                        : proxy::retrain(pm, ds, ensemble, c.error, c.retraining);
                rec.training = {tr.epochs, tr.converged, tr.e_train, tr.e_test};
                if (files) proxy::write_history_csv(cdir / "training_history.csv", tr.history);
                detail::log(opt, "cycle " + std::to_string(cyc) + ": proxy " + (initial ? "trained" : "retrained") +
                                     " in " + std::to_string(tr.epochs) + " epochs, E_train " + fmt12(tr.e_train) +
                                     ", E_test " + fmt12(tr.e_test) + " " + elapsed());

                // Robust optimization of the remaining steps with the proxy.
                const auto eval = opt.simulator_optimization
                                      ? robustopt::simulator_evaluator(ensemble, c.fluid, wells, c.numerics)
                                      : robustopt::proxy_evaluator(pm, ensemble);
                const auto ro = robustopt::robust_optimize(eval, c.economics, c.constraints, operated, cyc - 1, c.robust,
                                                           stream_seed(c.seed, {tag("pso"), static_cast<std::uint64_t>(cyc)}));
                const long long ro_runs = (ro.pso.evaluations + 1) * c.clrm.n_r;
                if (opt.simulator_optimization) rec.ledger.validation_sims += ro_runs;
                else rec.ledger.proxy_evaluations += ro_runs;
                rec.schedule = ro.best;
                rec.J = ro.J;
                rec.h = ro.h;
                rec.proxy_eval = ro.at_best;
                if (initial) u1 = ro.best;

                // Simulator check of the optimum, and of u^1, on this ensemble.
                const double from_day = (cyc - 1) * c.clrm.control_days;
                const auto sim = robustopt::simulator_evaluator(ensemble, c.fluid, wells, c.numerics)(
                    initial ? std::vector<BhpSchedule>{ro.best} : std::vector<BhpSchedule>{ro.best, u1});
                rec.ledger.validation_sims += static_cast<long long>(sim.size() * ensemble.size());
                rec.sim_eval = robustopt::evaluate_ensemble(sim[0], c.economics, c.constraints, c.robust.trim_fraction, from_day);
                for (std::size_t k = 0; k < c.constraints.size(); ++k) {
                    double m = -std::numeric_limits<double>::infinity();
                    for (const auto& r : sim[0]) m = std::max(m, robustopt::constraint_peak(r, c.constraints[k], from_day));
                    rec.sim_peaks_all.push_back(m);
                    if (rec.sim_eval.peaks[k] > limits[k]) rec.sim_feasible = false;
                }
                const auto u1_eval = initial ? rec.sim_eval
                                             : robustopt::evaluate_ensemble(sim[1], c.economics, c.constraints,
                                                                            c.robust.trim_fraction, 0.0);
                rec.u1_sim_npvs = u1_eval.npvs;
                rec.u1_expected_sim_npv = u1_eval.expected_npv;
                rec.u1_npv_iqr = iqr(u1_eval.npvs);

                // The plan on the true model; its first free step is operated.
                const auto truth_plan = resim::simulate(truth, c.fluid, wells, ro.best, c.numerics);
                ++rec.ledger.truth_sims;
                rec.truth_npv = robustopt::npv(truth_plan, c.economics);
                for (int w = 0; w < operated.n_wells; ++w)
                    for (int s = cyc - 1; s < operated.n_cs; ++s) operated.at(w, s) = ro.best.at(w, s);

                if (files) {
                    resim::write_schedule_csv(cdir / "schedule.csv", ro.best, wells);
                    robustopt::write_trace_csv(cdir / "pso_trace.csv", ro.pso.trace);
                    detail::write_npv_csv(cdir / "npv.csv", rec);
                    detail::write_constraint_csv(cdir / "constraints.csv", c.constraints, sim[0], truth_plan);
                    resim::write_rates_csv(cdir / "rates_sim_r0.csv", sim[0][0]);
                    resim::write_rates_csv(cdir / "rates_proxy_r0.csv", eval({ro.best}).front()[0]);
                    resim::write_rates_csv(cdir / "rates_truth.csv", truth_plan);
                }
                detail::log(opt, "cycle " + std::to_string(cyc) + ": E[NPV] proxy " + fmt12(rec.proxy_eval.expected_npv) +
                                     ", simulator " + fmt12(rec.sim_eval.expected_npv) + ", h " + fmt12(rec.h) +
                                     ", truth " + fmt12(rec.truth_npv) + " " + elapsed());
            } catch (...) {
                rethrow_with_context("cycle " + std::to_string(cyc));
            }
            const auto& l = rec.ledger;
            res.ledger.training_sims += l.training_sims;
            res.ledger.test_sims += l.test_sims;
            res.ledger.hm_sims += l.hm_sims;
            res.ledger.validation_sims += l.validation_sims;
            res.ledger.truth_sims += l.truth_sims;
            res.ledger.proxy_evaluations += l.proxy_evaluations;
            res.cycles.push_back(std::move(rec));
        }
        res.truth_npv_u1 = res.cycles.front().truth_npv;
        res.truth_npv_final = res.cycles.back().truth_npv;
        res.final_u1_expected_sim_npv = res.cycles.back().u1_expected_sim_npv;
        res.final_expected_sim_npv = res.cycles.back().sim_eval.expected_npv;
    } catch (const std::exception& e) {
        if (files) {
            auto os = open_out(opt.out / "summary.json");
            os << summary_json(c, res, "failed", e.what()).dump(2) << '\n';
        }
        throw;
    }
    if (files) {
        const auto report = ledger_report(c, res.ledger.hm_sims);
        nlohmann::json lj = ledger_json(c, report);
        lj["actual"] = detail::ledger_counts(res.ledger);
        auto ls = open_out(opt.out / "ledger.json");
        ls << lj.dump(2) << '\n';
        auto ss = open_out(opt.out / "summary.json");
        ss << summary_json(c, res, "ok").dump(2) << '\n';
    }
    return res;
}

}  // namespace clrm::loop
