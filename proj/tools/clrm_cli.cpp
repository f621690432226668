// Command-line frontend: every pipeline stage as a subcommand plus the full
// closed loop. All stages share one run directory (--out).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "clrm/clrm.hpp"

namespace fs = std::filesystem;
using namespace clrm;
using config::RunConfig;

extern char** environ;

namespace {

struct Globals {
    std::string config_path;
    std::string profile;
    std::optional<std::uint64_t> seed;
    int threads = 0;
    std::string out = "run";
    bool verbose = false;
};

struct Context {
    config::Loaded loaded;
    fs::path out;
    bool verbose = false;

    const RunConfig& cfg() const { return loaded.config; }
    void log(const std::string& s) const {
        if (verbose) std::cerr << "[clrm] " << s << std::endl;
    }
};

std::string numbered(const char* stem, std::size_t i, const char* ext) {
    char b[64];
    std::snprintf(b, sizeof b, "%s_%04zu%s", stem, i, ext);
    return b;
}

void write_text(const fs::path& p, const std::string& s) {
    auto os = open_out(p);
    os << s;
}

Context make_context(const Globals& g) {
    config::LoadOptions lo;
    lo.profile = g.profile;
    lo.file = g.config_path;
    lo.envp = environ;
    lo.seed = g.seed;
    Context ctx{config::load(lo), fs::path(g.out), g.verbose};
    set_thread_limit(g.threads > 0 ? g.threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
    fs::create_directories(ctx.out);
    write_text(ctx.out / "config.toml", config::to_toml(ctx.loaded.table));
    write_text(ctx.out / "config_sources.json", config::sources_json(ctx.loaded.sources).dump(2) + "\n");
    return ctx;
}

std::vector<geostat::Geomodel> read_models(const fs::path& dir, const char* stem, int count) {
    std::vector<geostat::Geomodel> out;
    for (int i = 0; i < count; ++i) {
        const auto p = dir / numbered(stem, i, ".bin");
        CLRM_REQUIRE(fs::exists(p), IoError, "missing " << p.string() << " (run generate-models first)");
        out.push_back(geostat::read_geomodel(p));
    }
    return out;
}

std::vector<geostat::Geomodel> ensemble(const Context& c) {
    return read_models(c.out / "models", "prior", c.cfg().clrm.n_r);
}

resim::BhpSchedule schedule_or_default(const Context& c, const std::string& path) {
    auto u = c.cfg().base_schedule();
    if (!path.empty()) resim::read_schedule_csv(path, u, c.cfg().wells);
    return u;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_generate_models(const Context& c) {
    const auto g = loop::generate_models(c.cfg());
    const auto dir = c.out / "models";
    fs::create_directories(dir);
    for (std::size_t i = 0; i < g.priors.size(); ++i) geostat::write_geomodel(dir / numbered("prior", i, ".bin"), g.priors[i]);
    for (std::size_t i = 0; i < g.truths.size(); ++i) geostat::write_geomodel(dir / numbered("truth", i, ".bin"), g.truths[i]);
    auto os = open_out(dir / "hard_data.csv");
    os << "cell,logk\n";
    for (const auto& h : g.hard_data) os << h.cell << ',' << fmt12(h.value) << '\n';
    std::cout << "wrote " << g.priors.size() << " prior and " << g.truths.size() << " truth realizations to "
              << dir.string() << '\n';
}

void cmd_build_pca(const Context& c) {
    const auto priors = read_models(c.out / "models", "prior", c.cfg().geomodels.n_prior);
    const auto pb = loop::build_basis(c.cfg(), priors);
    geostat::write_pca(c.out / "pca.bin", pb);
    const nlohmann::json j = {{"l", pb.l},
                              {"energy_fraction", pb.energy_fraction},
                              {"energy_target", pb.energy_target},
                              {"n_models", pb.n_models},
                              {"singular_values", pb.singulars}};
    write_text(c.out / "pca.json", j.dump(2) + "\n");
    std::cout << "PCA: l = " << pb.l << ", energy " << fmt12(pb.energy_fraction) << '\n';
}

void cmd_simulate(const Context& c, const std::string& model, const std::string& schedule, const std::string& output) {
    const fs::path mp = model.empty() ? c.out / "models" / numbered("prior", 0, ".bin") : fs::path(model);
    const auto m = geostat::read_geomodel(mp);
    const auto u = schedule_or_default(c, schedule);
    resim::SimDiagnostics d;
    const auto r = resim::simulate(m, c.cfg().fluid, c.cfg().wells, u, c.cfg().numerics, &d);
    const fs::path op = output.empty() ? c.out / "rates.csv" : fs::path(output);
    resim::write_rates_csv(op, r);
    const auto econ_npv = robustopt::npv(r, c.cfg().economics);
    std::cout << "simulated " << mp.string() << ": NPV " << fmt12(econ_npv) << " USD, rates in " << op.string() << '\n';
}

void cmd_make_dataset(const Context& c) {
    const auto models = ensemble(c);
    std::vector<int> ids(models.size());
    std::iota(ids.begin(), ids.end(), 0);
    const auto ds = proxy::make_dataset(models, ids, c.cfg().wells, c.cfg().fluid, c.cfg().numerics,
                                        c.cfg().initial_dataset_spec(), c.cfg().well_bounds(), nullptr, 0,
                                        stream_seed(c.cfg().seed, {tag("dataset"), 1}));
    proxy::write_dataset(c.out / "dataset", ds, c.cfg().wells);
    std::cout << "dataset: " << ds.train.size() << " train, " << ds.test.size() << " test samples\n";
}

void cmd_train(const Context& c) {
    const auto models = ensemble(c);
    const auto ds = proxy::read_dataset(c.out / "dataset", c.cfg().wells);
    auto pm = proxy::build_proxy(c.cfg().proxy_config(), c.cfg().grid, stream_seed(c.cfg().seed, {tag("proxy-init")}));
    const auto r = proxy::train(pm, ds, models, c.cfg().error, c.cfg().training);
    proxy::save_proxy(c.out / "proxy", pm);
    proxy::write_history_csv(c.out / "training_history.csv", r.history);
    std::cout << "trained " << pm.parameter_count() << " parameters in " << r.epochs << " epochs: E_train "
              << fmt12(r.e_train) << ", E_test " << fmt12(r.e_test) << (r.converged ? "" : " (not converged)") << '\n';
}

void cmd_eval_proxy(const Context& c, const std::string& split) {
    CLRM_REQUIRE(split == "test" || split == "train", ConfigError, "--split must be train or test");
    const auto models = ensemble(c);
    const auto ds = proxy::read_dataset(c.out / "dataset", c.cfg().wells);
    auto pm = proxy::load_proxy(c.out / "proxy");
    const auto& samples = split == "test" ? ds.test : ds.train;
    std::vector<double> e;
    const double mean = proxy::evaluate_split(pm, samples, models, c.cfg().error, &e);
    const double p10 = percentile(e, 0.1), p50 = percentile(e, 0.5), p90 = percentile(e, 0.9);
    const auto dir = c.out / "eval";
    fs::create_directories(dir);
    {
        auto os = open_out(dir / ("errors_" + split + ".csv"));
        os << "sample,realization,error\n";
        for (std::size_t i = 0; i < e.size(); ++i) os << i << ',' << samples[i].realization << ',' << fmt12(e[i]) << '\n';
    }
    const nlohmann::json j = {{"split", split}, {"E", mean}, {"p10", p10}, {"p50", p50}, {"p90", p90}, {"samples", e.size()}};
    write_text(dir / ("summary_" + split + ".json"), j.dump(2) + "\n");
    // Rates of the median-error sample for overlay plots.
    std::vector<std::size_t> order(e.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return e[a] < e[b] || (e[a] == e[b] && a < b); });
    const auto& s = samples[order[order.size() / 2]];
    resim::write_rates_csv(dir / ("median_" + split + "_sim.csv"), s.rates);
    resim::write_rates_csv(dir / ("median_" + split + "_proxy.csv"), proxy::forward(pm, models[s.realization], s.schedule));
    std::cout << split << " split: E = " << fmt12(mean) << ", P10/P50/P90 of E^i = " << fmt12(p10) << " / " << fmt12(p50)
              << " / " << fmt12(p90) << '\n';
}

void cmd_optimize(const Context& c, bool with_simulator) {
    const auto models = ensemble(c);
    auto pm = proxy::load_proxy(c.out / "proxy");
    const auto eval = with_simulator ? robustopt::simulator_evaluator(models, c.cfg().fluid, c.cfg().wells, c.cfg().numerics)
                                     : robustopt::proxy_evaluator(pm, models);
    const auto ro = robustopt::robust_optimize(eval, c.cfg().economics, c.cfg().constraints, c.cfg().base_schedule(), 0,
                                               c.cfg().robust, stream_seed(c.cfg().seed, {tag("pso"), 1}));
    const auto dir = c.out / "optimize";
    fs::create_directories(dir);
    resim::write_schedule_csv(dir / "schedule.csv", ro.best, c.cfg().wells);
    robustopt::write_trace_csv(dir / "pso_trace.csv", ro.pso.trace);
    {
        auto os = open_out(dir / "npv.csv");
        os << "realization,npv,kept\n";
        for (std::size_t i = 0; i < ro.at_best.npvs.size(); ++i)
            os << i << ',' << fmt12(ro.at_best.npvs[i]) << ','
               << (std::find(ro.at_best.kept.begin(), ro.at_best.kept.end(), static_cast<int>(i)) != ro.at_best.kept.end())
               << '\n';
    }
    const nlohmann::json j = {{"J", ro.J},
                              {"h", ro.h},
                              {"expected_npv", ro.at_best.expected_npv},
                              {"peaks", ro.at_best.peaks},
                              {"best_iteration", ro.pso.best_iteration},
                              {"evaluations", ro.pso.evaluations},
                              {"evaluator", with_simulator ? "simulator" : "proxy"}};
    write_text(dir / "result.json", j.dump(2) + "\n");
    std::cout << "optimized: E[NPV] " << fmt12(ro.at_best.expected_npv) << " USD, h " << fmt12(ro.h) << '\n';
}

void cmd_history_match(const Context& c, const std::string& schedule, int steps) {
    const auto& cfg = c.cfg();
    CLRM_REQUIRE(steps >= 1 && steps <= cfg.clrm.n_cs, ConfigError, "--steps must be in [1, n_cs]");
    const std::string sp = schedule.empty() ? (c.out / "optimize" / "schedule.csv").string() : schedule;
    CLRM_REQUIRE(fs::exists(sp), IoError, "missing operated schedule " << sp << " (run optimize or pass --schedule)");
    const auto operated = loop::truncate(schedule_or_default(c, sp), steps);
    const auto truth = geostat::read_geomodel(c.out / "models" / numbered("truth", cfg.clrm.truth, ".bin"));
    const auto pb = geostat::read_pca(c.out / "pca.bin");
    const auto truth_rates = resim::simulate(truth, cfg.fluid, cfg.wells, operated, cfg.numerics);
    const auto obs = hm::observe(truth_rates, operated.horizon(), cfg.hm.obs, stream_seed(cfg.seed, {tag("observations")}));
    const auto fwd = hm::simulator_forward(pb, cfg.fluid, cfg.wells, operated, cfg.numerics, obs);
    const auto ens = hm::posterior_ensemble(fwd, std::vector<double>(pb.l, 0.0), obs, cfg.clrm.n_r, cfg.hm.lm, cfg.hm.sampling,
                                            stream_seed(cfg.seed, {tag("rml"), static_cast<std::uint64_t>(steps + 1)}));
    const auto dir = c.out / "hm";
    hm::write_posterior(dir, pb, ens);
    auto os = open_out(dir / "observations.csv");
    os << "stream,time_days,d_true,d_obs,sd\n";
    for (std::size_t i = 0; i < obs.size(); ++i)
        os << truth_rates.stream_name(obs.stream[i]) << ',' << fmt12(truth_rates.times[obs.time_row[i]]) << ','
           << fmt12(obs.d_true[i]) << ',' << fmt12(obs.d_obs[i]) << ',' << fmt12(obs.sd[i]) << '\n';
    int improved = 0;
    for (const auto& r : ens.runs) improved += r.final_mismatch < r.initial_mismatch;
    std::cout << "history matched " << obs.size() << " data over " << fmt12(operated.horizon()) << " days: " << improved
              << "/" << ens.runs.size() << " runs reduced the mismatch, " << ens.simulations << " simulations\n";
}

void cmd_clrm(const Context& c) {
    loop::Options o;
    o.out = c.out;
    o.verbose = c.verbose;
    const auto r = loop::run_clrm(c.cfg(), o);
    for (const auto& rec : r.cycles)
        std::cout << "cycle " << rec.cycle << ": E[NPV] proxy " << fmt12(rec.proxy_eval.expected_npv) << ", simulator "
                  << fmt12(rec.sim_eval.expected_npv) << ", truth " << fmt12(rec.truth_npv) << ", h " << fmt12(rec.h)
                  << '\n';
    for (const auto& l : loop::ledger_lines(c.cfg(), loop::ledger_report(c.cfg(), r.ledger.hm_sims))) std::cout << l << '\n';
}

void cmd_report(const Context& c, const std::string& run) {
    std::vector<std::string> lines;
    if (!run.empty()) {
        std::ifstream is(fs::path(run) / "ledger.json");
        CLRM_REQUIRE(is.good(), IoError, "no ledger.json in " << run);
        const auto j = nlohmann::json::parse(is);
        lines = j.at("lines").get<std::vector<std::string>>();
    } else {
        lines = loop::ledger_lines(c.cfg(), loop::ledger_report(c.cfg(), loop::reference_hm_sims(c.cfg())));
    }
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    write_text(c.out / "report.txt", text);
    std::cout << text;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const NumericalError*>(&e)) return 3;
    return 1;
}

std::string kind_of(const std::exception& e) {
    if (const auto* ce = dynamic_cast<const Error*>(&e)) return ce->kind();
    return "internal";
}

void print_error(const std::string& kind, const std::string& message, int code) {
    const nlohmann::json j = {{"error", {{"kind", kind}, {"message", message}}}, {"exit_code", code}};
    std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Closed-loop reservoir management with a CNN-RNN proxy"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_path, "TOML config file")->check(CLI::ExistingFile);
    app.add_option("--profile", g.profile, "base profile")->check(CLI::IsMember({"paper", "desk"}));
    app.add_option("--seed", g.seed, "global seed");
    app.add_option("--threads", g.threads, "worker thread cap (default: all cores)")->check(CLI::NonNegativeNumber);
    app.add_option("--out", g.out, "run directory")->capture_default_str();
    app.add_flag("-v,--verbose", g.verbose, "progress on stderr");

    std::string model, schedule, output, split = "test", run;
    int steps = 1;
    bool with_simulator = false;
    auto* gen = app.add_subcommand("generate-models", "sample prior and truth realizations");
    auto* pca = app.add_subcommand("build-pca", "PCA basis of the prior realizations");
    auto* sim = app.add_subcommand("simulate", "simulate one model under a schedule");
    sim->add_option("--model", model, "geomodel .bin (default: first prior)");
    sim->add_option("--schedule", schedule, "schedule CSV (default: mid-bounds)");
    sim->add_option("--output", output, "rates CSV (default: <out>/rates.csv)");
    auto* mkd = app.add_subcommand("make-dataset", "simulate the proxy training and test sets");
    auto* trn = app.add_subcommand("train", "train the proxy");
    auto* evp = app.add_subcommand("eval-proxy", "proxy error statistics on a dataset split");
    evp->add_option("--split", split, "train or test")->capture_default_str();
    auto* opt = app.add_subcommand("optimize", "robust optimization over the prior ensemble");
    opt->add_flag("--simulator", with_simulator, "evaluate with the simulator instead of the proxy");
    auto* hmc = app.add_subcommand("history-match", "RML posterior ensemble from truth observations");
    hmc->add_option("--schedule", schedule, "operated schedule CSV (default: <out>/optimize/schedule.csv)");
    hmc->add_option("--steps", steps, "operated control steps")->capture_default_str();
    auto* clp = app.add_subcommand("clrm", "full closed loop");
    auto* rep = app.add_subcommand("report", "simulation ledger and speedup");
    rep->add_option("--run", run, "run directory with ledger.json (default: formulas from the config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what(), 2);
        return 2;
    }

    try {
        const auto ctx = make_context(g);
        if (*gen) cmd_generate_models(ctx);
        else if (*pca) cmd_build_pca(ctx);
        else if (*sim) cmd_simulate(ctx, model, schedule, output);
        else if (*mkd) cmd_make_dataset(ctx);
        else if (*trn) cmd_train(ctx);
        else if (*evp) cmd_eval_proxy(ctx, split);
        else if (*opt) cmd_optimize(ctx, with_simulator);
        else if (*hmc) cmd_history_match(ctx, schedule, steps);
        else if (*clp) cmd_clrm(ctx);
        else if (*rep) cmd_report(ctx, run);
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        print_error(kind_of(e), e.what(), code);
        return code;
    }
    return 0;
}
