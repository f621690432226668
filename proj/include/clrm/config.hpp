#pragma once

// Run configuration: TOML schema, built-in `paper` and `desk` profiles,
// layering (profile < file < CLRM_ environment variables < command line) and
// per-key source tracking.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <optional>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#define TOML_ENABLE_FORMATTERS 1
#include <toml.hpp>
#include <nlohmann/json.hpp>

#include "clrm/common.hpp"
#include "clrm/geostat.hpp"
#include "clrm/hm.hpp"
#include "clrm/proxy.hpp"
#include "clrm/resim.hpp"
#include "clrm/robustopt.hpp"

namespace clrm::config {

inline constexpr int kSchemaVersion = 1;

inline constexpr const char* kPaperProfile = R"(schema_version = 1
profile = "paper"
seed = 1

[grid]
nx = 40
ny = 40
nz = 8
dx = 15.0
dy = 15.0
dz = 4.0

[variogram]
mean = 4.79
sd = 1.5
r_max = 375.0
r_mid = 120.0
r_min = 8.0
azimuth_deg = 30.0

[geomodels]
n_prior = 400
n_truth = 5
energy_target = 0.85
max_latent = 400

[[wells]]
name = "I1"
kind = "injector"
i = 18
j = 8

[[wells]]
name = "I2"
kind = "injector"
i = 8
j = 28

[[wells]]
name = "I3"
kind = "injector"
i = 30
j = 28

[[wells]]
name = "P1"
kind = "producer"
i = 4
j = 4

[[wells]]
name = "P2"
kind = "producer"
i = 35
j = 4

[[wells]]
name = "P3"
kind = "producer"
i = 4
j = 35

[[wells]]
name = "P4"
kind = "producer"
i = 35
j = 35

[bounds]
injector = [325.0, 335.0]
producer = [300.0, 315.0]

[fluid]
mu_o = 2.0
mu_w = 1.0
porosity = 0.2
sw_init = 0.1
p_init = 400.0
swc = 0.1
sor = 0.1
krw_end = 0.4
kro_end = 0.9
nw = 2.0
no = 2.0

[numerics]
report_interval_days = 30.0
pressure_step_days = 30.0
cfl = 0.5

[economics]
oil_price = 74.0
water_production_cost = 5.0
water_injection_cost = 9.0
discount_rate = 0.1

[[constraints]]
well = ""
phase = "water_injection"
limit = 1400.0

[[constraints]]
well = "I1"
phase = "water_injection"
limit = 1100.0

[[constraints]]
well = "I2"
phase = "water_injection"
limit = 1100.0

[[constraints]]
well = "I3"
phase = "water_injection"
limit = 1100.0

[[constraints]]
well = ""
phase = "water_production"
limit = 1100.0

[proxy]
n_neu = 200
channels = [4, 8, 16]
alpha_inj_water = 0.0
alpha_prod_oil = 0.0
alpha_prod_water = 20.0
time_average = true

[training]
lr = 1e-3
lr_final = 1e-4
tol = 0.05
max_epochs = 20000
log_interval = 10

[retraining]
lr = 1e-4
lr_final = 1e-4
tol = 0.05
max_epochs = 20000
log_interval = 10

[dataset]
n_train = 15
n_test = 10
retrain_n_train = 10
retrain_n_test = [3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2]

[pso]
n_s = 35
n_i = 30
inertia = 0.729
c1 = 1.494
c2 = 1.494
neighbors = 4
trim_fraction = 0.1

[hm]
interval_days = 90.0
relative_sd = 0.02
sd_floor = 0.5
noise_scale = 1.0
max_iterations = 10
fd_step = 1e-4
mu0 = 1e-4
relative_tolerance = 1e-3
sampling = "iid"
reference_sims_per_run = 110

[clrm]
n_cyc = 5
n_cs = 5
control_days = 180.0
n_r = 20
truth = 0
)";

inline constexpr const char* kDeskProfile = R"(schema_version = 1
profile = "desk"
seed = 1

[grid]
nx = 20
ny = 20
nz = 8
dx = 30.0
dy = 30.0
dz = 4.0

[variogram]
mean = 4.79
sd = 1.5
r_max = 375.0
r_mid = 120.0
r_min = 8.0
azimuth_deg = 30.0

[geomodels]
n_prior = 30
n_truth = 5
energy_target = 0.85
max_latent = 32

[[wells]]
name = "I1"
kind = "injector"
i = 9
j = 4

[[wells]]
name = "I2"
kind = "injector"
i = 4
j = 14

[[wells]]
name = "I3"
kind = "injector"
i = 15
j = 14

[[wells]]
name = "P1"
kind = "producer"
i = 2
j = 2

[[wells]]
name = "P2"
kind = "producer"
i = 17
j = 2

[[wells]]
name = "P3"
kind = "producer"
i = 2
j = 17

[[wells]]
name = "P4"
kind = "producer"
i = 17
j = 17

[bounds]
injector = [325.0, 335.0]
producer = [300.0, 315.0]

[fluid]
mu_o = 2.0
mu_w = 1.0
porosity = 0.2
sw_init = 0.1
p_init = 400.0
swc = 0.1
sor = 0.1
krw_end = 0.4
kro_end = 0.9
nw = 2.0
no = 2.0

[numerics]
report_interval_days = 30.0
pressure_step_days = 30.0
cfl = 0.5

[economics]
oil_price = 74.0
water_production_cost = 5.0
water_injection_cost = 9.0
discount_rate = 0.1

[[constraints]]
well = ""
phase = "water_injection"
limit = 1000.0

[[constraints]]
well = "I1"
phase = "water_injection"
limit = 450.0

[[constraints]]
well = "I2"
phase = "water_injection"
limit = 450.0

[[constraints]]
well = "I3"
phase = "water_injection"
limit = 450.0

[[constraints]]
well = ""
phase = "water_production"
limit = 300.0

[proxy]
n_neu = 50
channels = [4, 8, 16]
alpha_inj_water = 0.0
alpha_prod_oil = 0.0
alpha_prod_water = 20.0
time_average = true

[training]
lr = 1e-3
lr_final = 1e-4
tol = 0.05
max_epochs = 1500
log_interval = 10

[retraining]
lr = 1e-4
lr_final = 1e-4
tol = 0.05
max_epochs = 600
log_interval = 10

[dataset]
n_train = 8
n_test = 4
retrain_n_train = 6
retrain_n_test = [2]

[pso]
n_s = 35
n_i = 30
inertia = 0.729
c1 = 1.494
c2 = 1.494
neighbors = 4
trim_fraction = 0.1

[hm]
interval_days = 90.0
relative_sd = 0.02
sd_floor = 0.5
noise_scale = 1.0
max_iterations = 5
fd_step = 1e-4
mu0 = 1e-4
relative_tolerance = 1e-3
sampling = "iid"
reference_sims_per_run = 110

[clrm]
n_cyc = 3
n_cs = 3
control_days = 300.0
n_r = 10
truth = 0
)";

struct GeomodelSettings {
    int n_prior = 30;  // realizations used for PCA; the first n_r are the initial ensemble
    int n_truth = 5;   // extra realizations used only as true models
    double energy_target = 0.85;
    int max_latent = 32;
};

struct DatasetSettings {
    int n_train = 15;
    int n_test = 10;
    int retrain_n_train = 10;
    std::vector<int> retrain_n_test{3};  // one entry per realization, or one entry for all
};

struct HmSettings {
    hm::ObservationSpec obs;
    hm::LmOptions lm;
    hm::Sampling sampling = hm::Sampling::iid;
    double reference_sims_per_run = 110.0;  // used only by the paper-settings ledger report
};

struct ClrmSettings {
    int n_cyc = 5;
    int n_cs = 5;
    double control_days = 180.0;
    int n_r = 20;
    int truth = 0;  // index among the truth realizations

    double final_time() const { return n_cs * control_days; }
};

struct RunConfig {
    std::string profile = "desk";
    std::uint64_t seed = 1;
    geostat::GridSpec grid;
    geostat::VariogramSpec variogram;
    GeomodelSettings geomodels;
    std::vector<resim::WellSpec> wells;
    std::pair<double, double> injector_bounds{325, 335}, producer_bounds{300, 315};
    resim::FluidSpec fluid;
    resim::Numerics numerics;
    robustopt::EconParams economics;
    std::vector<robustopt::ConstraintSpec> constraints;
    int n_neu = 200;
    std::array<int, 3> channels{4, 8, 16};
    proxy::ErrorConfig error;
    proxy::TrainConfig training, retraining;
    DatasetSettings dataset;
    robustopt::RobustConfig robust;
    HmSettings hm;
    ClrmSettings clrm;

    std::vector<std::string> injector_names() const {
        std::vector<std::string> out;
        for (const auto& w : wells)
            if (w.kind == resim::WellKind::injector) out.push_back(w.name);
        return out;
    }
    std::vector<std::string> producer_names() const {
        std::vector<std::string> out;
        for (const auto& w : wells)
            if (w.kind == resim::WellKind::producer) out.push_back(w.name);
        return out;
    }
    std::vector<std::pair<double, double>> well_bounds() const {
        std::vector<std::pair<double, double>> b;
        for (const auto& w : wells) b.push_back(w.kind == resim::WellKind::injector ? injector_bounds : producer_bounds);
        return b;
    }
    int n_t() const { return static_cast<int>(std::floor(clrm.final_time() / numerics.report_interval_days + 1e-9)) + 1; }
    proxy::ProxyConfig proxy_config() const {
        auto c = proxy::ProxyConfig::for_grid(grid, injector_names(), producer_names(), n_neu, n_t());
        c.channels = channels;
        c.report_interval_days = numerics.report_interval_days;
        return c;
    }
    proxy::DatasetSpec initial_dataset_spec() const {
        proxy::DatasetSpec s;
        s.n_train = dataset.n_train;
        s.n_test = dataset.n_test;
        s.n_cs = clrm.n_cs;
        s.control_days = clrm.control_days;
        return s;
    }
    proxy::DatasetSpec retrain_dataset_spec() const {
        proxy::DatasetSpec s;
        s.n_train = dataset.retrain_n_train;
        s.n_cs = clrm.n_cs;
        s.control_days = clrm.control_days;
        if (dataset.retrain_n_test.size() == 1) s.n_test = dataset.retrain_n_test[0];
        else s.n_test_per_model = dataset.retrain_n_test;
        return s;
    }
    // Midpoint schedule over the full horizon.
    resim::BhpSchedule base_schedule() const {
        return resim::BhpSchedule(static_cast<int>(wells.size()), clrm.n_cs, clrm.control_days, well_bounds());
    }
    std::vector<int> hard_data_cells() const {
        std::vector<int> cells;
        for (const auto& w : wells)
            for (int c : w.cells(grid)) cells.push_back(c);
        return cells;
    }

    void validate() const {
        grid.validate();
        variogram.validate();
        fluid.validate();
        economics.validate();
        robust.pso.validate();
        hm.obs.validate();
        CLRM_REQUIRE(!wells.empty(), ConfigError, "config needs at least one well");
        std::vector<std::string> names;
        for (const auto& w : wells) {
            w.validate(grid);
            CLRM_REQUIRE(std::find(names.begin(), names.end(), w.name) == names.end(), ConfigError,
                         "duplicate well name " << w.name);
            names.push_back(w.name);
        }
        for (const auto& c : constraints) {
            c.validate();
            if (!c.well.empty()) {
                auto it = std::find_if(wells.begin(), wells.end(), [&](const auto& w) { return w.name == c.well; });
                CLRM_REQUIRE(it != wells.end(), ConfigError, "constraint names unknown well " << c.well);
                const bool inj = it->kind == resim::WellKind::injector;
                CLRM_REQUIRE(inj == (c.phase == robustopt::ConstraintPhase::water_injection), ConfigError,
                             "constraint " << c.label() << " does not match the well type");
            }
        }
        for (const auto& b : {injector_bounds, producer_bounds})
            CLRM_REQUIRE(b.first <= b.second, ConfigError, "BHP bounds need lower <= upper");
        CLRM_REQUIRE(clrm.n_cyc >= 1 && clrm.n_cyc <= clrm.n_cs, ConfigError,
                     "need 1 <= n_cyc <= n_cs (got n_cyc " << clrm.n_cyc << ", n_cs " << clrm.n_cs << ")");
        CLRM_REQUIRE(clrm.control_days > 0, ConfigError, "control step length must be > 0");
        CLRM_REQUIRE(clrm.n_r >= 1 && clrm.n_r <= geomodels.n_prior, ConfigError,
                     "need 1 <= n_r <= geomodels.n_prior (got n_r " << clrm.n_r << ")");
        const double trim = robust.trim_fraction * clrm.n_r;
        CLRM_REQUIRE(std::abs(trim - std::round(trim)) < 1e-9 && clrm.n_r - 2 * std::lround(trim) >= 1, ConfigError,
                     "trim_fraction * n_r must be an integer leaving at least one kept realization");
        CLRM_REQUIRE(geomodels.n_prior >= 2 && geomodels.n_truth >= 1, ConfigError, "need n_prior >= 2 and n_truth >= 1");
        CLRM_REQUIRE(clrm.truth >= 0 && clrm.truth < geomodels.n_truth, ConfigError,
                     "truth index " << clrm.truth << " outside [0, " << geomodels.n_truth << ")");
        CLRM_REQUIRE(geomodels.max_latent >= 1, ConfigError, "max_latent must be >= 1");
        CLRM_REQUIRE(n_neu >= 1, ConfigError, "proxy.n_neu must be >= 1");
        CLRM_REQUIRE(dataset.n_train >= 1 && dataset.n_test >= 0 && dataset.retrain_n_train >= 1, ConfigError,
                     "dataset sizes must be positive");
        CLRM_REQUIRE(dataset.retrain_n_test.size() == 1 || static_cast<int>(dataset.retrain_n_test.size()) == clrm.n_r,
                     ConfigError, "dataset.retrain_n_test needs one entry or n_r entries");
        const double marks = clrm.control_days / numerics.report_interval_days;
        CLRM_REQUIRE(std::abs(marks - std::round(marks)) < 1e-9, ConfigError,
                     "control step length must be a multiple of the report interval");
        const double obs_marks = hm.obs.interval_days / numerics.report_interval_days;
        CLRM_REQUIRE(std::abs(obs_marks - std::round(obs_marks)) < 1e-9, ConfigError,
                     "observation interval must be a multiple of the report interval");
        error.validate();
    }
};

// ---------------------------------------------------------------------------
// Layering
// ---------------------------------------------------------------------------

// Leaf key -> where its value came from ("profile:desk", "file:<path>",
// "env:CLRM_...", "cli:--seed").
using Sources = std::map<std::string, std::string>;

namespace detail {

inline void record_sources(const toml::table& t, const std::string& prefix, const std::string& source, Sources& s) {
    for (const auto& [k, v] : t) {
        const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
        if (const auto* sub = v.as_table()) record_sources(*sub, key, source, s);
        else s[key] = source;
    }
}

// Tables merge recursively; everything else (including arrays of tables)
// is replaced wholesale.
inline void merge_into(toml::table& base, const toml::table& over, const std::string& prefix, const std::string& source,
                       Sources& s) {
    for (const auto& [k, v] : over) {
        const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
        auto* existing = base.get(k);
        if (existing && existing->is_table() && v.is_table()) {
            merge_into(*existing->as_table(), *v.as_table(), key, source, s);
            continue;
        }
        if (existing && existing->is_table() != v.is_table())
            throw ConfigError("key " + key + " changes between a table and a value");
        for (auto it = s.begin(); it != s.end();)
            it = it->first.rfind(key + ".", 0) == 0 ? s.erase(it) : std::next(it);
        base.insert_or_assign(k, v);
        if (const auto* sub = v.as_table()) record_sources(*sub, key, source, s);
        else s[key] = source;
    }
}

inline toml::table parse_toml(const std::string& text, const std::string& what) {
    try {
        return toml::parse(text, what);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << what << ": " << e.description() << " at line " << e.source().begin.line;
        throw ConfigError(os.str());
    }
}

}  // namespace detail

inline const char* profile_text(const std::string& name) {
    if (name == "paper") return kPaperProfile;
    if (name == "desk") return kDeskProfile;
    throw ConfigError("unknown profile '" + name + "' (expected paper or desk)");
}

struct Layered {
    toml::table table;
    Sources sources;
};

// CLRM_<SECTION>__<KEY>=<toml value>, e.g. CLRM_PSO__N_S=10 or
// CLRM_SEED=7. Keys are lower-cased. Pairs are applied in sorted order.
inline std::vector<std::pair<std::string, std::string>> env_overrides(char** envp) {
    std::vector<std::pair<std::string, std::string>> out;
    if (!envp) return out;
    for (char** e = envp; *e; ++e) {
        const std::string kv(*e);
        if (kv.rfind("CLRM_", 0) != 0) continue;
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::string env_key_path(const std::string& var) {
    std::string path;
    const std::string body = var.substr(5);
    for (std::size_t i = 0; i < body.size(); ++i) {
        if (body.compare(i, 2, "__") == 0) {
            path += '.';
            ++i;
        } else {
            path += static_cast<char>(std::tolower(static_cast<unsigned char>(body[i])));
        }
    }
    return path;
}

inline void apply_override(Layered& l, const std::string& dotted, const std::string& value_text, const std::string& source) {
    const auto parsed = detail::parse_toml("v = " + value_text, source);
    toml::table over;
    toml::table* cur = &over;
    std::string rest = dotted;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
        auto [it, _] = cur->insert(rest.substr(0, dot), toml::table{});
        cur = it->second.as_table();
        rest = rest.substr(dot + 1);
    }
    cur->insert(rest, *parsed.get("v"));
    detail::merge_into(l.table, over, "", source, l.sources);
}

struct LoadOptions {
    std::string profile;              // empty: file's `profile` key, else desk
    std::filesystem::path file;       // optional
    char** envp = nullptr;            // optional environment
    std::optional<std::uint64_t> seed;  // --seed
};

inline Layered layer(const LoadOptions& o) {
    std::optional<toml::table> file_table;
    if (!o.file.empty()) {
        std::ifstream is(o.file);
        CLRM_REQUIRE(is.good(), IoError, "cannot open config " << o.file.string());
        std::stringstream ss;
        ss << is.rdbuf();
        file_table = detail::parse_toml(ss.str(), o.file.string());
    }
    std::string profile = o.profile;
    if (profile.empty() && file_table)
        if (auto p = (*file_table)["profile"].value<std::string>()) profile = *p;
    if (profile.empty()) profile = "desk";
    Layered l;
    l.table = detail::parse_toml(profile_text(profile), "profile:" + profile);
    detail::record_sources(l.table, "", "profile:" + profile, l.sources);
    if (file_table) detail::merge_into(l.table, *file_table, "", "file:" + o.file.string(), l.sources);
    for (const auto& [var, val] : env_overrides(o.envp)) apply_override(l, env_key_path(var), val, "env:" + var);
    if (o.seed) apply_override(l, "seed", std::to_string(*o.seed), "cli:--seed");
    if (!o.profile.empty()) {
        l.table.insert_or_assign("profile", o.profile);
        l.sources["profile"] = "cli:--profile";
    }
    return l;
}

// ---------------------------------------------------------------------------
// Typed extraction
// ---------------------------------------------------------------------------

namespace detail {

class Reader {
public:
    explicit Reader(const toml::table& root) : root_(root) {}

    const toml::table& table(const std::string& key) {
        const auto* t = root_.get_as<toml::table>(key);
        CLRM_REQUIRE(t, ConfigError, "config is missing table [" << key << "]");
        used_[key];
        return *t;
    }
    template <class T>
    T get(const toml::table& t, const std::string& section, const std::string& key) {
        const auto* node = t.get(key);
        CLRM_REQUIRE(node, ConfigError, "config is missing " << qualify(section, key));
        used_[section].push_back(key);
        if constexpr (std::is_same_v<T, double>) {
            if (auto v = node->value<double>()) return *v;
        } else if constexpr (std::is_same_v<T, bool>) {
            if (auto v = node->value<bool>()) return *v;
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (auto v = node->value<std::string>()) return *v;
        } else {
            if (node->is_integer()) {
                const auto v = node->as_integer()->get();
                if constexpr (std::is_unsigned_v<T>) {
                    CLRM_REQUIRE(v >= 0, ConfigError, qualify(section, key) << " must be >= 0");
                } else {
                    CLRM_REQUIRE(v >= std::numeric_limits<T>::min() && v <= std::numeric_limits<T>::max(), ConfigError,
                                 qualify(section, key) << " is out of range");
                }
                return static_cast<T>(v);
            }
        }
        throw ConfigError(qualify(section, key) + " has the wrong type");
    }
    template <class T>
    T get(const std::string& section, const std::string& key) {
        return get<T>(section.empty() ? root_ : table(section), section, key);
    }
    template <class T>
    std::vector<T> array(const toml::table& t, const std::string& section, const std::string& key) {
        const auto* a = t.get_as<toml::array>(key);
        CLRM_REQUIRE(a, ConfigError, qualify(section, key) << " must be an array");
        used_[section].push_back(key);
        std::vector<T> out;
        for (const auto& n : *a) {
            if constexpr (std::is_same_v<T, double>) {
                auto v = n.value<double>();
                CLRM_REQUIRE(v, ConfigError, qualify(section, key) << " must hold numbers");
                out.push_back(*v);
            } else {
                CLRM_REQUIRE(n.is_integer(), ConfigError, qualify(section, key) << " must hold integers");
                out.push_back(static_cast<T>(n.as_integer()->get()));
            }
        }
        return out;
    }
    void mark(const std::string& section, const std::string& key) { used_[section].push_back(key); }
    const toml::array& table_array(const std::string& key) {
        const auto* a = root_.get_as<toml::array>(key);
        CLRM_REQUIRE(a && a->is_array_of_tables(), ConfigError, "config needs [[" << key << "]] entries");
        used_[key];
        return *a;
    }
    // Unknown keys are schema errors.
    void check_unknown(const std::map<std::string, std::vector<std::string>>& array_keys) const {
        for (const auto& [k, v] : root_) {
            const std::string key(k.str());
            if (!v.is_table() && !v.is_array_of_tables()) {
                CLRM_REQUIRE(used_.count("") && contains(used_.at(""), key), ConfigError, "unknown config key " << key);
                continue;
            }
            CLRM_REQUIRE(used_.count(key), ConfigError, "unknown config section [" << key << "]");
            if (const auto* t = v.as_table()) {
                for (const auto& [sk, _] : *t)
                    CLRM_REQUIRE(contains(used_.at(key), std::string(sk.str())), ConfigError,
                                 "unknown config key " << key << "." << sk.str());
            } else {
                const auto& allowed = array_keys.at(key);
                for (const auto& e : *v.as_array())
                    for (const auto& [sk, _] : *e.as_table())
                        CLRM_REQUIRE(contains(allowed, std::string(sk.str())), ConfigError,
                                     "unknown config key " << key << "." << sk.str());
            }
        }
    }

private:
    static std::string qualify(const std::string& s, const std::string& k) { return s.empty() ? k : s + "." + k; }
    static bool contains(const std::vector<std::string>& v, const std::string& s) {
        return std::find(v.begin(), v.end(), s) != v.end();
    }
    const toml::table& root_;
    std::map<std::string, std::vector<std::string>> used_;
};

inline proxy::TrainConfig train_config(Reader& r, const std::string& s) {
    proxy::TrainConfig c;
    c.lr = r.get<double>(s, "lr");
    c.lr_final = r.get<double>(s, "lr_final");
    c.tol = r.get<double>(s, "tol");
    c.max_epochs = r.get<int>(s, "max_epochs");
    c.log_interval = r.get<int>(s, "log_interval");
    CLRM_REQUIRE(c.lr >= 0 && c.lr_final >= 0 && c.tol > 0 && c.max_epochs >= 1 && c.log_interval >= 1, ConfigError,
                 "[" << s << "] needs lr, lr_final >= 0, tol > 0, max_epochs >= 1, log_interval >= 1");
    return c;
}

}  // namespace detail

inline RunConfig from_table(const toml::table& t) {
    detail::Reader r(t);
    RunConfig c;
    const int version = r.get<int>("", "schema_version");
    CLRM_REQUIRE(version == kSchemaVersion, ConfigError,
                 "config schema_version " << version << " is not supported (expected " << kSchemaVersion << ")");
    c.profile = r.get<std::string>("", "profile");
    c.seed = r.get<std::uint64_t>("", "seed");

    c.grid.nx = r.get<int>("grid", "nx");
    c.grid.ny = r.get<int>("grid", "ny");
    c.grid.nz = r.get<int>("grid", "nz");
    c.grid.dx = r.get<double>("grid", "dx");
    c.grid.dy = r.get<double>("grid", "dy");
    c.grid.dz = r.get<double>("grid", "dz");

    c.variogram.mean = r.get<double>("variogram", "mean");
    const double sd = r.get<double>("variogram", "sd");
    CLRM_REQUIRE(sd > 0, ConfigError, "variogram.sd must be > 0");
    c.variogram.sill = sd * sd;
    c.variogram.r_max = r.get<double>("variogram", "r_max");
    c.variogram.r_mid = r.get<double>("variogram", "r_mid");
    c.variogram.r_min = r.get<double>("variogram", "r_min");
    c.variogram.azimuth_deg = r.get<double>("variogram", "azimuth_deg");

    c.geomodels.n_prior = r.get<int>("geomodels", "n_prior");
    c.geomodels.n_truth = r.get<int>("geomodels", "n_truth");
    c.geomodels.energy_target = r.get<double>("geomodels", "energy_target");
    c.geomodels.max_latent = r.get<int>("geomodels", "max_latent");

    for (const auto& e : r.table_array("wells")) {
        const auto& w = *e.as_table();
        resim::WellSpec s;
        s.name = r.get<std::string>(w, "wells", "name");
        const auto kind = r.get<std::string>(w, "wells", "kind");
        CLRM_REQUIRE(kind == "injector" || kind == "producer", ConfigError, "well " << s.name << " kind must be injector or producer");
        s.kind = kind == "injector" ? resim::WellKind::injector : resim::WellKind::producer;
        s.i = r.get<int>(w, "wells", "i");
        s.j = r.get<int>(w, "wells", "j");
        c.wells.push_back(s);
    }

    auto pair = [&](const std::string& key) {
        const auto v = r.array<double>(r.table("bounds"), "bounds", key);
        CLRM_REQUIRE(v.size() == 2, ConfigError, "bounds." << key << " needs [lower, upper]");
        return std::make_pair(v[0], v[1]);
    };
    c.injector_bounds = pair("injector");
    c.producer_bounds = pair("producer");

    c.fluid.mu_o = r.get<double>("fluid", "mu_o");
    c.fluid.mu_w = r.get<double>("fluid", "mu_w");
    c.fluid.porosity = r.get<double>("fluid", "porosity");
    c.fluid.sw_init = r.get<double>("fluid", "sw_init");
    c.fluid.p_init = r.get<double>("fluid", "p_init");
    c.fluid.relperm.swc = r.get<double>("fluid", "swc");
    c.fluid.relperm.sor = r.get<double>("fluid", "sor");
    c.fluid.relperm.krw_end = r.get<double>("fluid", "krw_end");
    c.fluid.relperm.kro_end = r.get<double>("fluid", "kro_end");
    c.fluid.relperm.nw = r.get<double>("fluid", "nw");
    c.fluid.relperm.no = r.get<double>("fluid", "no");

    c.numerics.report_interval_days = r.get<double>("numerics", "report_interval_days");
    c.numerics.pressure_step_days = r.get<double>("numerics", "pressure_step_days");
    c.numerics.cfl = r.get<double>("numerics", "cfl");
    CLRM_REQUIRE(c.numerics.report_interval_days > 0 && c.numerics.pressure_step_days > 0 && c.numerics.cfl > 0,
                 ConfigError, "numerics values must be > 0");

    c.economics.oil_price = r.get<double>("economics", "oil_price");
    c.economics.water_production_cost = r.get<double>("economics", "water_production_cost");
    c.economics.water_injection_cost = r.get<double>("economics", "water_injection_cost");
    c.economics.discount_rate = r.get<double>("economics", "discount_rate");

    if (const auto* a = t.get_as<toml::array>("constraints"); a && a->empty()) {
        r.mark("", "constraints");
    } else {
        for (const auto& e : r.table_array("constraints")) {
            const auto& ct = *e.as_table();
            robustopt::ConstraintSpec s;
            s.well = r.get<std::string>(ct, "constraints", "well");
            const auto phase = r.get<std::string>(ct, "constraints", "phase");
            CLRM_REQUIRE(phase == "water_injection" || phase == "water_production", ConfigError,
                         "constraint phase must be water_injection or water_production");
            s.phase = phase == "water_injection" ? robustopt::ConstraintPhase::water_injection
                                                 : robustopt::ConstraintPhase::water_production;
            s.limit = r.get<double>(ct, "constraints", "limit");
            c.constraints.push_back(s);
        }
    }

    c.n_neu = r.get<int>("proxy", "n_neu");
    const auto ch = r.array<int>(r.table("proxy"), "proxy", "channels");
    CLRM_REQUIRE(ch.size() == 3, ConfigError, "proxy.channels needs three entries");
    c.channels = {ch[0], ch[1], ch[2]};
    c.error.alpha_inj_water = r.get<double>("proxy", "alpha_inj_water");
    c.error.alpha_prod_oil = r.get<double>("proxy", "alpha_prod_oil");
    c.error.alpha_prod_water = r.get<double>("proxy", "alpha_prod_water");
    c.error.time_average = r.get<bool>("proxy", "time_average");

    c.training = detail::train_config(r, "training");
    c.retraining = detail::train_config(r, "retraining");

    c.dataset.n_train = r.get<int>("dataset", "n_train");
    c.dataset.n_test = r.get<int>("dataset", "n_test");
    c.dataset.retrain_n_train = r.get<int>("dataset", "retrain_n_train");
    c.dataset.retrain_n_test = r.array<int>(r.table("dataset"), "dataset", "retrain_n_test");

    auto& pso = c.robust.pso;
    pso.n_s = r.get<int>("pso", "n_s");
    pso.n_i = r.get<int>("pso", "n_i");
    pso.inertia = r.get<double>("pso", "inertia");
    pso.c1 = r.get<double>("pso", "c1");
    pso.c2 = r.get<double>("pso", "c2");
    pso.neighbors = r.get<int>("pso", "neighbors");
    c.robust.trim_fraction = r.get<double>("pso", "trim_fraction");

    c.hm.obs.interval_days = r.get<double>("hm", "interval_days");
    c.hm.obs.relative_sd = r.get<double>("hm", "relative_sd");
    c.hm.obs.sd_floor = r.get<double>("hm", "sd_floor");
    c.hm.obs.noise_scale = r.get<double>("hm", "noise_scale");
    c.hm.lm.max_iterations = r.get<int>("hm", "max_iterations");
    c.hm.lm.fd_step = r.get<double>("hm", "fd_step");
    c.hm.lm.mu0 = r.get<double>("hm", "mu0");
    c.hm.lm.relative_tolerance = r.get<double>("hm", "relative_tolerance");
    const auto sampling = r.get<std::string>("hm", "sampling");
    CLRM_REQUIRE(sampling == "iid" || sampling == "moment_matched", ConfigError, "hm.sampling must be iid or moment_matched");
    c.hm.sampling = sampling == "iid" ? hm::Sampling::iid : hm::Sampling::moment_matched;
    c.hm.reference_sims_per_run = r.get<double>("hm", "reference_sims_per_run");

    c.clrm.n_cyc = r.get<int>("clrm", "n_cyc");
    c.clrm.n_cs = r.get<int>("clrm", "n_cs");
    c.clrm.control_days = r.get<double>("clrm", "control_days");
    c.clrm.n_r = r.get<int>("clrm", "n_r");
    c.clrm.truth = r.get<int>("clrm", "truth");

    r.check_unknown({{"wells", {"name", "kind", "i", "j"}}, {"constraints", {"well", "phase", "limit"}}});
    c.validate();
    return c;
}

struct Loaded {
    RunConfig config;
    toml::table table;
    Sources sources;
};

inline Loaded load(const LoadOptions& o) {
    auto l = layer(o);
    Loaded out{from_table(l.table), l.table, l.sources};
    return out;
}

inline Loaded load_profile(const std::string& name) {
    LoadOptions o;
    o.profile = name;
    return load(o);
}

inline std::string to_toml(const toml::table& t) {
    std::ostringstream os;
    os << t << '\n';
    return os.str();
}

inline nlohmann::json sources_json(const Sources& s) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : s) j[k] = v;
    return j;
}

}  // namespace clrm::config
