#pragma once

// Desk-scale incompressible oil-water simulator (IMPES, two-point fluxes,
// BHP-controlled Peaceman wells). No gravity, no capillarity.
//
// Internal arithmetic uses bar for pressure, days for time, m^3/day for rates,
// md for permeability and cp for viscosity. All flow coefficients carry the
// single conversion factor kFlowUnits so that
//     q [m^3/day] = kFlowUnits * T [md*m] * (kr / mu) [1/cp] * dp [bar].

#include <Eigen/SparseCholesky>

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clrm/common.hpp"
#include "clrm/geostat.hpp"

namespace clrm::resim {

using geostat::Geomodel;
using geostat::GridSpec;

constexpr double kMdToM2 = 9.869233e-16;
constexpr double kCpToPaS = 1e-3;
constexpr double kBarToPa = 1e5;
constexpr double kSecondsPerDay = 86400.0;
constexpr double kFlowUnits = kMdToM2 / kCpToPaS * kSecondsPerDay * kBarToPa;

struct RelPerm {
    double swc = 0.1, sor = 0.1;
    double krw_end = 0.4, kro_end = 0.9;
    double nw = 2.0, no = 2.0;
};

struct FluidSpec {
    double mu_o = 2.0, mu_w = 1.0;  // cp
    double porosity = 0.2;
    RelPerm relperm;
    double sw_init = 0.1;
    double p_init = 400.0;  // bar

    void validate() const {
        const auto& r = relperm;
        CLRM_REQUIRE(mu_o > 0 && mu_w > 0, ConfigError, "viscosities must be > 0");
        CLRM_REQUIRE(porosity > 0 && porosity <= 1, ConfigError, "porosity must be in (0,1]");
        CLRM_REQUIRE(r.swc >= 0 && r.sor >= 0 && r.swc + r.sor < 1, ConfigError, "need 0 <= Swc, Sor and Swc + Sor < 1");
        CLRM_REQUIRE(r.nw >= 1 && r.no >= 1, ConfigError, "Corey exponents must be >= 1");
        CLRM_REQUIRE(r.krw_end > 0 && r.krw_end <= 1 && r.kro_end > 0 && r.kro_end <= 1, ConfigError,
                     "relative-permeability endpoints must be in (0,1]");
        CLRM_REQUIRE(sw_init >= r.swc - 1e-12 && sw_init <= 1 - r.sor + 1e-12, ConfigError,
                     "initial water saturation must lie in [Swc, 1-Sor]");
    }
};

namespace detail {
inline double corey_pow(double x, double n) {
    if (n == 2.0) return x * x;
    if (n == 1.0) return x;
    return std::pow(x, n);
}
}  // namespace detail

struct KrPair {
    double krw, kro;
};

inline KrPair relperm(double sw, const RelPerm& r) {
    const double s = std::clamp((sw - r.swc) / (1.0 - r.swc - r.sor), 0.0, 1.0);
    return {r.krw_end * detail::corey_pow(s, r.nw), r.kro_end * detail::corey_pow(1.0 - s, r.no)};
}

enum class WellKind { injector, producer };

struct WellSpec {
    std::string name;
    WellKind kind = WellKind::producer;
    int i = 0, j = 0;
    int k_top = 0, k_bottom = -1;  // inclusive; -1 means the bottom layer
    double r_w = 0.1;              // m

    int last_layer(const GridSpec& g) const { return k_bottom < 0 ? g.nz - 1 : k_bottom; }
    std::vector<int> cells(const GridSpec& g) const {
        std::vector<int> out;
        for (int k = k_top; k <= last_layer(g); ++k) out.push_back(g.index(i, j, k));
        return out;
    }
    void validate(const GridSpec& g) const {
        CLRM_REQUIRE(i >= 0 && i < g.nx && j >= 0 && j < g.ny, ConfigError, "well " << name << " outside grid");
        CLRM_REQUIRE(k_top >= 0 && k_top <= last_layer(g) && last_layer(g) < g.nz, ConfigError,
                     "well " << name << " has an invalid perforation range");
        CLRM_REQUIRE(r_w > 0, ConfigError, "well " << name << " needs r_w > 0");
    }
};

// Peaceman index for an isotropic cell, in md*m.
inline double well_index(const GridSpec& g, double k_md, double r_w) {
    CLRM_REQUIRE(k_md > 0, ConfigError, "well index needs k > 0");
    const double r_eq = 0.14 * std::sqrt(g.dx * g.dx + g.dy * g.dy);
    CLRM_REQUIRE(r_eq > r_w, ConfigError,
                 "equivalent radius " << r_eq << " m does not exceed wellbore radius " << r_w << " m");
    return 2.0 * M_PI * k_md * g.dz / std::log(r_eq / r_w);
}

// Per-well BHPs held constant over `n_cs` control steps of `control_days` each.
struct BhpSchedule {
    double control_days = 180.0;
    int n_cs = 0;
    int n_wells = 0;
    std::vector<double> bhp;                        // well-major: bhp[w * n_cs + s], bar
    std::vector<std::pair<double, double>> bounds;  // per well (lower, upper), bar

    BhpSchedule() = default;
    BhpSchedule(int wells, int steps, double days, std::vector<std::pair<double, double>> b)
        : control_days(days), n_cs(steps), n_wells(wells), bhp(static_cast<std::size_t>(wells) * steps, 0.0),
          bounds(std::move(b)) {
        for (int w = 0; w < n_wells; ++w)
            for (int s = 0; s < n_cs; ++s) at(w, s) = 0.5 * (bounds[w].first + bounds[w].second);
    }

    double& at(int w, int s) { return bhp[static_cast<std::size_t>(w) * n_cs + s]; }
    double at(int w, int s) const { return bhp[static_cast<std::size_t>(w) * n_cs + s]; }
    double horizon() const { return control_days * n_cs; }
    int step_at(double t) const {
        const int s = static_cast<int>(std::floor(t / control_days + 1e-9));
        return std::clamp(s, 0, n_cs - 1);
    }
    void validate() const {
        CLRM_REQUIRE(n_cs >= 1 && n_wells >= 1 && control_days > 0, ConfigError, "empty BHP schedule");
        CLRM_REQUIRE(bhp.size() == static_cast<std::size_t>(n_wells) * n_cs, ShapeError, "BHP schedule size mismatch");
        CLRM_REQUIRE(static_cast<int>(bounds.size()) == n_wells, ShapeError, "BHP bounds size mismatch");
        for (int w = 0; w < n_wells; ++w) {
            CLRM_REQUIRE(bounds[w].first <= bounds[w].second, ConfigError, "BHP lower bound exceeds upper bound");
            for (int s = 0; s < n_cs; ++s)
                CLRM_REQUIRE(at(w, s) >= bounds[w].first - 1e-9 && at(w, s) <= bounds[w].second + 1e-9, ConfigError,
                             "BHP " << at(w, s) << " of well " << w << " step " << s << " outside bounds");
        }
    }
};

// Well rates at report times. Streams are ordered injector water, producer
// oil, producer water (each in well declaration order); all values >= 0.
struct RateSeries {
    std::vector<double> times;  // days
    std::vector<std::string> injectors, producers;
    std::vector<double> values;  // values[stream * n_times + t], m^3/day

    RateSeries() = default;
    RateSeries(std::vector<double> t, std::vector<std::string> inj, std::vector<std::string> prod)
        : times(std::move(t)), injectors(std::move(inj)), producers(std::move(prod)),
          values(static_cast<std::size_t>(n_streams()) * times.size(), 0.0) {}

    int n_times() const { return static_cast<int>(times.size()); }
    int n_inj() const { return static_cast<int>(injectors.size()); }
    int n_prod() const { return static_cast<int>(producers.size()); }
    int n_streams() const { return n_inj() + 2 * n_prod(); }

    double& at(int stream, int t) { return values[static_cast<std::size_t>(stream) * times.size() + t]; }
    double at(int stream, int t) const { return values[static_cast<std::size_t>(stream) * times.size() + t]; }
    double& inj_water(int j, int t) { return at(j, t); }
    double inj_water(int j, int t) const { return at(j, t); }
    double& prod_oil(int j, int t) { return at(n_inj() + j, t); }
    double prod_oil(int j, int t) const { return at(n_inj() + j, t); }
    double& prod_water(int j, int t) { return at(n_inj() + n_prod() + j, t); }
    double prod_water(int j, int t) const { return at(n_inj() + n_prod() + j, t); }

    std::string stream_name(int s) const {
        if (s < n_inj()) return injectors[s] + ":water_injection";
        if (s < n_inj() + n_prod()) return producers[s - n_inj()] + ":oil_production";
        return producers[s - n_inj() - n_prod()] + ":water_production";
    }
};

struct FieldRates {
    std::vector<double> injection, water_production, oil_production;
};

inline FieldRates field_rates(const RateSeries& r) {
    FieldRates f;
    const int nt = r.n_times();
    f.injection.assign(nt, 0.0);
    f.water_production.assign(nt, 0.0);
    f.oil_production.assign(nt, 0.0);
    for (int t = 0; t < nt; ++t) {
        for (int j = 0; j < r.n_inj(); ++j) f.injection[t] += r.inj_water(j, t);
        for (int j = 0; j < r.n_prod(); ++j) {
            f.oil_production[t] += r.prod_oil(j, t);
            f.water_production[t] += r.prod_water(j, t);
        }
    }
    return f;
}

// line_cg: conjugate gradients preconditioned by exact tridiagonal solves along
// grid lines of the most strongly coupled axis (point Jacobi when that axis
// has a single cell).
enum class PressureSolver { line_cg, cholesky };

struct Numerics {
    PressureSolver pressure_solver = PressureSolver::line_cg;
    double report_interval_days = 30.0;
    double pressure_step_days = 30.0;
    double cfl = 0.5;
    double cg_tolerance = 1e-10;
    int cg_max_iterations = 20000;
    double min_substep_days = 1e-6;
    double saturation_tolerance = 1e-6;
};

struct SimDiagnostics {
    int pressure_solves = 0;
    long long cg_iterations = 0;
    long long saturation_substeps = 0;
    double max_balance_error = 0.0;   // max over pressure solves of |inj - prod| / inj
    std::vector<double> balance_errors;
    int shut_perforations = 0;
};

class Simulator {
public:
    struct Perforation {
        int cell;
        int well;
        double wi;  // md*m
    };
    struct Face {
        int a, b;
        double t;  // geometric transmissibility, md*m
    };

    Simulator(const Geomodel& m, const FluidSpec& fluid, std::vector<WellSpec> wells, Numerics num = {})
        : grid_(m.grid), fluid_(fluid), wells_(std::move(wells)), num_(num) {
        m.validate();
        fluid_.validate();
        CLRM_REQUIRE(!wells_.empty(), ConfigError, "simulation needs at least one well");
        const int n = grid_.cells();
        pore_volume_ = grid_.dx * grid_.dy * grid_.dz * fluid_.porosity;
        perm_.resize(n);
        for (int c = 0; c < n; ++c) perm_[c] = m.perm_md(c);
        build_faces();
        if (num_.pressure_solver == PressureSolver::cholesky) build_matrix_pattern();
        else build_lines();
        for (int w = 0; w < static_cast<int>(wells_.size()); ++w) {
            wells_[w].validate(grid_);
            for (int c : wells_[w].cells(grid_)) perfs_.push_back({c, w, well_index(grid_, perm_[c], wells_[w].r_w)});
            (wells_[w].kind == WellKind::injector ? injectors_ : producers_).push_back(w);
        }
        sw_.assign(n, fluid_.sw_init);
        pressure_.assign(n, fluid_.p_init);
        flux_.assign(faces_.size(), 0.0);
        perf_rate_.assign(perfs_.size(), 0.0);
        bhp_.assign(wells_.size(), fluid_.p_init);
        fprime_max_ = max_fractional_flow_slope();
    }

    const GridSpec& grid() const { return grid_; }
    const std::vector<WellSpec>& wells() const { return wells_; }
    const std::vector<double>& saturation() const { return sw_; }
    const std::vector<double>& pressure() const { return pressure_; }
    double time() const { return time_; }
    double cumulative_injection() const { return cum_injection_; }
    double total_pore_volume() const { return pore_volume_ * grid_.cells(); }
    const SimDiagnostics& diagnostics() const { return diag_; }
    const std::vector<int>& injector_ids() const { return injectors_; }
    const std::vector<int>& producer_ids() const { return producers_; }

    void set_controls(std::span<const double> bhp) {
        CLRM_REQUIRE(bhp.size() == wells_.size(), ShapeError, "control vector size mismatch");
        bhp_.assign(bhp.begin(), bhp.end());
    }

    double fractional_flow(double sw) const {
        const auto kr = relperm(sw, fluid_.relperm);
        const double lw = kr.krw / fluid_.mu_w, lo = kr.kro / fluid_.mu_o;
        return lw / (lw + lo);
    }

    double total_mobility(double sw) const {
        const auto kr = relperm(sw, fluid_.relperm);
        return kr.krw / fluid_.mu_w + kr.kro / fluid_.mu_o;
    }

    // Solves the pressure equation for the current saturations and controls,
    // storing face fluxes and perforation rates (m^3/day, positive in the
    // well's natural direction).
    void solve_pressure() {
        const int n = grid_.cells();
        std::vector<double> lam(n);
        for (int c = 0; c < n; ++c) lam[c] = total_mobility(sw_[c]);

        face_coef_.resize(faces_.size());
        for (std::size_t f = 0; f < faces_.size(); ++f) {
            const auto& fc = faces_[f];
            const double dp = pressure_[fc.a] - pressure_[fc.b];
            double l;
            if (dp > 0) l = lam[fc.a];
            else if (dp < 0) l = lam[fc.b];
            else l = 0.5 * (lam[fc.a] + lam[fc.b]);
            face_coef_[f] = kFlowUnits * fc.t * l;
        }

        std::vector<char> open(perfs_.size(), 1);
        perf_coef_.assign(perfs_.size(), 0.0);
        for (std::size_t p = 0; p < perfs_.size(); ++p) perf_coef_[p] = kFlowUnits * perfs_[p].wi * lam[perfs_[p].cell];

        for (std::size_t pass = 0; pass <= perfs_.size(); ++pass) {
            bool any_open = false;
            for (char o : open) any_open = any_open || o;
            if (!any_open) {
                std::fill(flux_.begin(), flux_.end(), 0.0);
                std::fill(perf_rate_.begin(), perf_rate_.end(), 0.0);
                break;
            }
            assemble_and_solve(open);
            bool changed = false;
            for (std::size_t p = 0; p < perfs_.size(); ++p) {
                if (!open[p]) {
                    perf_rate_[p] = 0.0;
                    continue;
                }
                const auto& pf = perfs_[p];
                const double dp = wells_[pf.well].kind == WellKind::injector ? bhp_[pf.well] - pressure_[pf.cell]
                                                                             : pressure_[pf.cell] - bhp_[pf.well];
                perf_rate_[p] = perf_coef_[p] * dp;
                if (dp < 0) {
                    open[p] = 0;
                    changed = true;
                    ++diag_.shut_perforations;
                }
            }
            if (!changed) break;
        }

        for (std::size_t f = 0; f < faces_.size(); ++f)
            flux_[f] = face_coef_[f] * (pressure_[faces_[f].a] - pressure_[faces_[f].b]);

        double inj = 0.0, prod = 0.0;
        for (std::size_t p = 0; p < perfs_.size(); ++p)
            (wells_[perfs_[p].well].kind == WellKind::injector ? inj : prod) += perf_rate_[p];
        const double err = inj > 0 ? std::abs(inj - prod) / inj : std::abs(prod);
        diag_.balance_errors.push_back(err);
        diag_.max_balance_error = std::max(diag_.max_balance_error, err);
        ++diag_.pressure_solves;
    }

    struct WellRates {
        std::vector<double> water, oil;  // per well, m^3/day (water = injected water for injectors)
    };

    WellRates well_rates() const {
        WellRates r{std::vector<double>(wells_.size(), 0.0), std::vector<double>(wells_.size(), 0.0)};
        for (std::size_t p = 0; p < perfs_.size(); ++p) {
            const auto& pf = perfs_[p];
            if (wells_[pf.well].kind == WellKind::injector) {
                r.water[pf.well] += perf_rate_[p];
            } else {
                const double fw = fractional_flow(sw_[pf.cell]);
                r.water[pf.well] += fw * perf_rate_[p];
                r.oil[pf.well] += (1.0 - fw) * perf_rate_[p];
            }
        }
        return r;
    }

    // Explicit upwind transport over `dt` days with the current total fluxes.
    void transport(double dt) {
        const int n = grid_.cells();
        std::vector<double> out(n, 0.0);
        for (std::size_t f = 0; f < faces_.size(); ++f) {
            const double q = flux_[f];
            if (q > 0) out[faces_[f].a] += q;
            else out[faces_[f].b] -= q;
        }
        for (std::size_t p = 0; p < perfs_.size(); ++p)
            if (wells_[perfs_[p].well].kind == WellKind::producer) out[perfs_[p].cell] += perf_rate_[p];
        double max_out = 0.0;
        for (double o : out) max_out = std::max(max_out, o);

        double inj = 0.0;
        for (std::size_t p = 0; p < perfs_.size(); ++p)
            if (wells_[perfs_[p].well].kind == WellKind::injector) inj += perf_rate_[p];
        cum_injection_ += inj * dt;
        time_ += dt;
        if (max_out <= 0.0) return;

        double sub = num_.cfl * pore_volume_ / (fprime_max_ * max_out);
        int nsub = std::max(1, static_cast<int>(std::ceil(dt / sub - 1e-12)));
        std::vector<double> ds(n), trial(n), fw(n);
        double done = 0.0;
        while (done < dt - 1e-12) {
            const double h = std::min(dt / nsub, dt - done);
            CLRM_REQUIRE(h >= num_.min_substep_days, NumericalError,
                         "saturation substep fell below " << num_.min_substep_days << " days");
            for (int c = 0; c < n; ++c) fw[c] = fractional_flow(sw_[c]);
            std::fill(ds.begin(), ds.end(), 0.0);
            for (std::size_t f = 0; f < faces_.size(); ++f) {
                const double q = flux_[f];
                const double w = (q > 0 ? fw[faces_[f].a] : fw[faces_[f].b]) * q;
                ds[faces_[f].a] -= w;
                ds[faces_[f].b] += w;
            }
            for (std::size_t p = 0; p < perfs_.size(); ++p) {
                const int c = perfs_[p].cell;
                if (wells_[perfs_[p].well].kind == WellKind::injector) ds[c] += perf_rate_[p];
                else ds[c] -= fw[c] * perf_rate_[p];
            }
            bool ok = true;
            const double lo = fluid_.relperm.swc, hi = 1.0 - fluid_.relperm.sor;
            const double floor_s = std::min(lo, fluid_.sw_init);
            for (int c = 0; c < n; ++c) {
                trial[c] = sw_[c] + h / pore_volume_ * ds[c];
                if (!std::isfinite(trial[c]) || trial[c] < floor_s - num_.saturation_tolerance ||
                    trial[c] > std::max(hi, fluid_.sw_init) + num_.saturation_tolerance) {
                    ok = false;
                    break;
                }
            }
            if (!ok) {
                nsub *= 2;
                CLRM_REQUIRE(dt / nsub >= num_.min_substep_days, NumericalError,
                             "saturation left its bounds even at the minimum substep (CFL violation)");
                continue;
            }
            for (int c = 0; c < n; ++c) sw_[c] = std::clamp(trial[c], floor_s, std::max(hi, fluid_.sw_init));
            done += h;
            ++diag_.saturation_substeps;
        }
    }

private:
    void build_faces() {
        const auto& g = grid_;
        auto harm = [](double a, double b) { return 2.0 * a * b / (a + b); };
        for (int k = 0; k < g.nz; ++k)
            for (int j = 0; j < g.ny; ++j)
                for (int i = 0; i < g.nx; ++i) {
                    const int c = g.index(i, j, k);
                    if (i + 1 < g.nx) {
                        const int d = g.index(i + 1, j, k);
                        faces_.push_back({c, d, g.dy * g.dz / g.dx * harm(perm_[c], perm_[d])});
                    }
                    if (j + 1 < g.ny) {
                        const int d = g.index(i, j + 1, k);
                        faces_.push_back({c, d, g.dx * g.dz / g.dy * harm(perm_[c], perm_[d])});
                    }
                    if (k + 1 < g.nz) {
                        const int d = g.index(i, j, k + 1);
                        faces_.push_back({c, d, g.dx * g.dy / g.dz * harm(perm_[c], perm_[d])});
                    }
                }
    }

    double max_fractional_flow_slope() const {
        const double lo = fluid_.relperm.swc, hi = 1.0 - fluid_.relperm.sor;
        const int samples = 2000;
        double best = 0.0;
        for (int s = 0; s < samples; ++s) {
            const double a = lo + (hi - lo) * s / samples, b = lo + (hi - lo) * (s + 1) / samples;
            best = std::max(best, (fractional_flow(b) - fractional_flow(a)) / (b - a));
        }
        return std::max(best, 1e-12) * 1.05;
    }

    // Lines run along the axis with the largest geometric transmissibility;
    // line_next_[c] is the face joining c to its successor on the line.
    void build_lines() {
        const auto& g = grid_;
        const double tx = g.nx > 1 ? g.dy * g.dz / g.dx : 0.0;
        const double ty = g.ny > 1 ? g.dx * g.dz / g.dy : 0.0;
        const double tz = g.nz > 1 ? g.dx * g.dy / g.dz : 0.0;
        const int axis = (tz >= tx && tz >= ty) ? 2 : (ty >= tx ? 1 : 0);
        const int stride = axis == 0 ? 1 : axis == 1 ? g.nx : g.nx * g.ny;
        const int len = axis == 0 ? g.nx : axis == 1 ? g.ny : g.nz;
        line_next_.assign(g.cells(), -1);
        for (std::size_t f = 0; f < faces_.size(); ++f)
            if (faces_[f].b - faces_[f].a == stride && g.ijk(faces_[f].a)[axis] + 1 == g.ijk(faces_[f].b)[axis])
                line_next_[faces_[f].a] = static_cast<int>(f);
        line_starts_.clear();
        for (int c = 0; c < g.cells(); ++c)
            if (g.ijk(c)[axis] == 0) line_starts_.push_back(c);
        line_stride_ = stride;
        line_len_ = len;
        line_pivot_.assign(g.cells(), 0.0);
    }

    // Thomas-algorithm pivots of every line's tridiagonal block.
    void factor_lines(const std::vector<double>& diag) {
        for (int c0 : line_starts_) {
            int c = c0;
            double prev_off = 0.0, prev_pivot = 1.0;
            for (int k = 0; k < line_len_; ++k, c += line_stride_) {
                line_pivot_[c] = diag[c] - (k ? prev_off * prev_off / prev_pivot : 0.0);
                prev_pivot = line_pivot_[c];
                prev_off = line_next_[c] >= 0 ? face_coef_[line_next_[c]] : 0.0;
            }
        }
    }

    void precondition(const std::vector<double>& r, std::vector<double>& z) const {
        for (int c0 : line_starts_) {
            int c = c0;
            for (int k = 0; k < line_len_; ++k, c += line_stride_) {
                const double lower = k ? face_coef_[line_next_[c - line_stride_]] : 0.0;
                z[c] = (r[c] + (k ? lower * z[c - line_stride_] : 0.0)) / line_pivot_[c];
            }
            c -= line_stride_;
            for (int k = line_len_ - 2; k >= 0; --k) {
                c -= line_stride_;
                z[c] += face_coef_[line_next_[c]] / line_pivot_[c] * z[c + line_stride_];
            }
        }
    }

    // Lower-triangle sparsity pattern of the pressure matrix; values are
    // overwritten in place before each factorization.
    void build_matrix_pattern() {
        const int n = grid_.cells();
        std::vector<Eigen::Triplet<double>> trip;
        for (int c = 0; c < n; ++c) trip.emplace_back(c, c, 1.0);
        for (const auto& f : faces_) trip.emplace_back(std::max(f.a, f.b), std::min(f.a, f.b), 1.0);
        matrix_.resize(n, n);
        matrix_.setFromTriplets(trip.begin(), trip.end());
        matrix_.makeCompressed();
        auto slot = [&](int row, int col) {
            const int* inner = matrix_.innerIndexPtr();
            for (int k = matrix_.outerIndexPtr()[col]; k < matrix_.outerIndexPtr()[col + 1]; ++k)
                if (inner[k] == row) return k;
            throw NumericalError("pressure matrix pattern is inconsistent");
        };
        diag_slot_.resize(n);
        for (int c = 0; c < n; ++c) diag_slot_[c] = slot(c, c);
        face_slot_.resize(faces_.size());
        for (std::size_t f = 0; f < faces_.size(); ++f)
            face_slot_[f] = slot(std::max(faces_[f].a, faces_[f].b), std::min(faces_[f].a, faces_[f].b));
    }

    // Solves the SPD pressure system in deviations from the mean open-well BHP,
    // either by sparse Cholesky or by line-preconditioned CG warm-started from
    // the previous pressure.
    void assemble_and_solve(const std::vector<char>& open) {
        const int n = grid_.cells();
        double pref = 0.0;
        int nopen = 0;
        for (std::size_t p = 0; p < perfs_.size(); ++p)
            if (open[p]) {
                pref += bhp_[perfs_[p].well];
                ++nopen;
            }
        pref /= nopen;

        std::vector<double> diag(n, 0.0), b(n, 0.0);
        for (std::size_t f = 0; f < faces_.size(); ++f) {
            diag[faces_[f].a] += face_coef_[f];
            diag[faces_[f].b] += face_coef_[f];
        }
        for (std::size_t p = 0; p < perfs_.size(); ++p) {
            if (!open[p]) continue;
            diag[perfs_[p].cell] += perf_coef_[p];
            b[perfs_[p].cell] += perf_coef_[p] * (bhp_[perfs_[p].well] - pref);
        }
        for (int c = 0; c < n; ++c) CLRM_REQUIRE(diag[c] > 0, NumericalError, "pressure matrix has an empty row");

        if (num_.pressure_solver == PressureSolver::cholesky) {
            double* val = matrix_.valuePtr();
            for (int c = 0; c < n; ++c) val[diag_slot_[c]] = diag[c];
            for (std::size_t f = 0; f < faces_.size(); ++f) val[face_slot_[f]] = -face_coef_[f];
            if (!cholesky_) {
                cholesky_ = std::make_unique<Cholesky>();
                cholesky_->analyzePattern(matrix_);
            }
            cholesky_->factorize(matrix_);
            CLRM_REQUIRE(cholesky_->info() == Eigen::Success, NumericalError, "pressure matrix factorization failed");
            const Eigen::Map<const Eigen::VectorXd> rhs(b.data(), n);
            const Eigen::VectorXd x = cholesky_->solve(rhs);
            CLRM_REQUIRE(x.allFinite(), NumericalError, "pressure solve produced non-finite values");
            for (int c = 0; c < n; ++c) pressure_[c] = x(c) + pref;
            return;
        }

        auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
            for (int c = 0; c < n; ++c) y[c] = diag[c] * x[c];
            for (std::size_t f = 0; f < faces_.size(); ++f) {
                const int a = faces_[f].a, bb = faces_[f].b;
                y[a] -= face_coef_[f] * x[bb];
                y[bb] -= face_coef_[f] * x[a];
            }
        };

        std::vector<double> x(n), r(n), z(n), p(n), ap(n);
        for (int c = 0; c < n; ++c) x[c] = pressure_[c] - pref;
        apply(x, ap);
        double bnorm = 0.0;
        for (int c = 0; c < n; ++c) {
            r[c] = b[c] - ap[c];
            bnorm += b[c] * b[c];
        }
        bnorm = std::sqrt(bnorm);
        if (bnorm == 0.0) bnorm = 1.0;
        factor_lines(diag);
        precondition(r, z);
        double rz = 0.0;
        for (int c = 0; c < n; ++c) {
            p[c] = z[c];
            rz += r[c] * z[c];
        }
        int it = 0;
        for (;; ++it) {
            double rn = 0.0;
            for (int c = 0; c < n; ++c) rn += r[c] * r[c];
            if (std::sqrt(rn) <= num_.cg_tolerance * bnorm) break;
            CLRM_REQUIRE(it < num_.cg_max_iterations, NumericalError,
                         "pressure solve did not converge in " << num_.cg_max_iterations << " CG iterations");
            apply(p, ap);
            double pap = 0.0;
            for (int c = 0; c < n; ++c) pap += p[c] * ap[c];
            CLRM_REQUIRE(pap > 0 && std::isfinite(pap), NumericalError, "pressure matrix is not positive definite");
            const double alpha = rz / pap;
            for (int c = 0; c < n; ++c) {
                x[c] += alpha * p[c];
                r[c] -= alpha * ap[c];
            }
            precondition(r, z);
            double rz_new = 0.0;
            for (int c = 0; c < n; ++c) rz_new += r[c] * z[c];
            const double beta = rz_new / rz;
            rz = rz_new;
            for (int c = 0; c < n; ++c) p[c] = z[c] + beta * p[c];
        }
        diag_.cg_iterations += it;
        for (int c = 0; c < n; ++c) pressure_[c] = x[c] + pref;
    }

    GridSpec grid_;
    FluidSpec fluid_;
    std::vector<WellSpec> wells_;
    Numerics num_;
    double pore_volume_ = 0.0;
    std::vector<double> perm_;
    std::vector<Face> faces_;
    std::vector<Perforation> perfs_;
    std::vector<int> injectors_, producers_;
    std::vector<double> sw_, pressure_, flux_, perf_rate_, bhp_;
    std::vector<double> face_coef_, perf_coef_;
    using Cholesky = Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::AMDOrdering<int>>;
    Eigen::SparseMatrix<double> matrix_;
    std::vector<int> diag_slot_, face_slot_;
    std::unique_ptr<Cholesky> cholesky_;
    std::vector<int> line_next_, line_starts_;
    std::vector<double> line_pivot_;
    int line_stride_ = 1, line_len_ = 1;
    double fprime_max_ = 1.0;
    double time_ = 0.0;
    double cum_injection_ = 0.0;
    SimDiagnostics diag_;
};

inline std::vector<double> report_times(double horizon_days, double interval_days) {
    const int n = static_cast<int>(std::floor(horizon_days / interval_days + 1e-9)) + 1;
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) t[i] = interval_days * i;
    return t;
}

// Runs the schedule over its full horizon; rates are sampled at every report
// boundary under the control step that contains that time (the final boundary
// belongs to the last step).
inline RateSeries simulate(const Geomodel& m, const FluidSpec& fluid, const std::vector<WellSpec>& wells,
                           const BhpSchedule& u, const Numerics& num = {}, SimDiagnostics* diag = nullptr) {
    u.validate();
    CLRM_REQUIRE(u.n_wells == static_cast<int>(wells.size()), ShapeError,
                 "schedule has " << u.n_wells << " wells, model has " << wells.size());
    Simulator sim(m, fluid, wells, num);
    std::vector<std::string> inj, prod;
    for (const auto& w : wells) (w.kind == WellKind::injector ? inj : prod).push_back(w.name);
    RateSeries out(report_times(u.horizon(), num.report_interval_days), inj, prod);

    // Event times: report boundaries and control boundaries.
    std::vector<double> events = out.times;
    for (int s = 1; s < u.n_cs; ++s) events.push_back(s * u.control_days);
    std::sort(events.begin(), events.end());
    events.erase(std::unique(events.begin(), events.end(), [](double a, double b) { return std::abs(a - b) < 1e-9; }),
                 events.end());

    std::vector<double> controls(wells.size());
    auto record = [&](int t) {
        const auto r = sim.well_rates();
        int ii = 0, pp = 0;
        for (std::size_t w = 0; w < wells.size(); ++w) {
            if (wells[w].kind == WellKind::injector) {
                out.inj_water(ii++, t) = std::max(0.0, r.water[w]);
            } else {
                out.prod_oil(pp, t) = std::max(0.0, r.oil[w]);
                out.prod_water(pp++, t) = std::max(0.0, r.water[w]);
            }
        }
    };

    std::size_t next_report = 0;
    for (std::size_t e = 0; e < events.size(); ++e) {
        const double t0 = events[e];
        const double t1 = e + 1 < events.size() ? events[e + 1] : t0;
        const int nsteps = t1 > t0 ? std::max(1, static_cast<int>(std::ceil((t1 - t0) / num.pressure_step_days - 1e-9))) : 0;
        const double dt = nsteps ? (t1 - t0) / nsteps : 0.0;
        for (int k = 0; k < std::max(nsteps, 1); ++k) {
            const double t = t0 + k * dt;
            const int s = u.step_at(t);
            for (int w = 0; w < u.n_wells; ++w) controls[w] = u.at(w, s);
            sim.set_controls(controls);
            sim.solve_pressure();
            if (k == 0 && next_report < out.times.size() && std::abs(out.times[next_report] - t0) < 1e-9)
                record(static_cast<int>(next_report++));
            if (nsteps) sim.transport(dt);
        }
    }
    CLRM_REQUIRE(next_report == out.times.size(), NumericalError, "simulation missed report times");
    if (diag) *diag = sim.diagnostics();
    return out;
}

// ---------------------------------------------------------------------------
// CSV interfaces
// ---------------------------------------------------------------------------

inline void write_rates_csv(const std::filesystem::path& p, const RateSeries& r) {
    auto os = open_out(p);
    os << "time_days";
    for (int s = 0; s < r.n_streams(); ++s) os << ',' << r.stream_name(s);
    os << '\n';
    for (int t = 0; t < r.n_times(); ++t) {
        os << fmt12(r.times[t]);
        for (int s = 0; s < r.n_streams(); ++s) os << ',' << fmt12(r.at(s, t));
        os << '\n';
    }
}

inline RateSeries read_rates_csv(const std::filesystem::path& p) {
    auto is = open_in(p);
    std::string line;
    CLRM_REQUIRE(std::getline(is, line), IoError, "empty rate file " << p.string());
    const auto header = split_csv_line(line);
    CLRM_REQUIRE(!header.empty() && header[0] == "time_days", IoError, "rate file lacks time_days column");
    std::vector<std::string> inj, prod, prod_w;
    for (std::size_t c = 1; c < header.size(); ++c) {
        const auto colon = header[c].rfind(':');
        CLRM_REQUIRE(colon != std::string::npos, IoError, "bad rate column " << header[c]);
        const auto well = header[c].substr(0, colon), phase = header[c].substr(colon + 1);
        if (phase == "water_injection") inj.push_back(well);
        else if (phase == "oil_production") prod.push_back(well);
        else if (phase == "water_production") prod_w.push_back(well);
        else throw IoError("unknown rate phase " + phase);
    }
    CLRM_REQUIRE(prod == prod_w, IoError, "producer oil/water columns disagree");
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        CLRM_REQUIRE(cells.size() == header.size(), IoError, "ragged row in " << p.string());
        std::vector<double> row;
        for (const auto& c : cells) row.push_back(parse_double(c, p.string()));
        rows.push_back(std::move(row));
    }
    std::vector<double> times;
    for (const auto& r : rows) times.push_back(r[0]);
    RateSeries out(times, inj, prod);
    for (std::size_t t = 0; t < rows.size(); ++t)
        for (int s = 0; s < out.n_streams(); ++s) out.at(s, static_cast<int>(t)) = rows[t][s + 1];
    return out;
}

inline void write_schedule_csv(const std::filesystem::path& p, const BhpSchedule& u,
                               const std::vector<WellSpec>& wells) {
    auto os = open_out(p);
    os << "well,control_step,bhp_bar\n";
    for (int w = 0; w < u.n_wells; ++w)
        for (int s = 0; s < u.n_cs; ++s) os << wells[w].name << ',' << (s + 1) << ',' << fmt12(u.at(w, s)) << '\n';
}

// Reads values into a schedule whose shape and bounds are already set.
inline void read_schedule_csv(const std::filesystem::path& p, BhpSchedule& u, const std::vector<WellSpec>& wells) {
    auto is = open_in(p);
    std::string line;
    std::getline(is, line);
    CLRM_REQUIRE(split_csv_line(line) == (std::vector<std::string>{"well", "control_step", "bhp_bar"}), IoError,
                 "bad schedule header in " << p.string());
    std::map<std::string, int> index;
    for (std::size_t w = 0; w < wells.size(); ++w) index[wells[w].name] = static_cast<int>(w);
    std::vector<char> seen(u.bhp.size(), 0);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto c = split_csv_line(line);
        CLRM_REQUIRE(c.size() == 3, IoError, "bad schedule row '" << line << "'");
        auto it = index.find(c[0]);
        CLRM_REQUIRE(it != index.end(), IoError, "unknown well " << c[0] << " in schedule");
        const int s = static_cast<int>(parse_double(c[1], p.string())) - 1;
        CLRM_REQUIRE(s >= 0 && s < u.n_cs, IoError, "control step " << c[1] << " out of range");
        u.at(it->second, s) = parse_double(c[2], p.string());
        seen[static_cast<std::size_t>(it->second) * u.n_cs + s] = 1;
    }
    for (char v : seen) CLRM_REQUIRE(v, IoError, "schedule file " << p.string() << " is incomplete");
    u.validate();
}

}  // namespace clrm::resim
