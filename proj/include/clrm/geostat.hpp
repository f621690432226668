#pragma once

// Multi-Gaussian log-permeability realizations and their PCA parameterization.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "clrm/common.hpp"

namespace clrm::geostat {

struct GridSpec {
    int nx = 1, ny = 1, nz = 1;
    double dx = 1.0, dy = 1.0, dz = 1.0;  // m

    int cells() const { return nx * ny * nz; }
    int index(int i, int j, int k) const { return i + nx * (j + ny * k); }
    std::array<int, 3> ijk(int c) const { return {c % nx, (c / nx) % ny, c / (nx * ny)}; }
    std::array<double, 3> center(int c) const {
        auto [i, j, k] = ijk(c);
        return {(i + 0.5) * dx, (j + 0.5) * dy, (k + 0.5) * dz};
    }
    void validate() const {
        CLRM_REQUIRE(nx >= 1 && ny >= 1 && nz >= 1, ConfigError, "grid counts must be >= 1");
        CLRM_REQUIRE(dx > 0 && dy > 0 && dz > 0, ConfigError, "grid cell sizes must be > 0");
    }
    bool operator==(const GridSpec&) const = default;
};

// Spherical variogram. r_max lies in the horizontal plane at `azimuth_deg`
// clockwise from the +y axis, r_mid is horizontal and perpendicular to it, and
// r_min is vertical.
struct VariogramSpec {
    double sill = 1.0;
    double r_max = 1.0, r_mid = 1.0, r_min = 1.0;  // m
    double azimuth_deg = 0.0;
    double mean = 0.0;

    void validate() const {
        CLRM_REQUIRE(sill > 0, ConfigError, "variogram sill must be > 0");
        CLRM_REQUIRE(r_max >= r_mid && r_mid >= r_min && r_min > 0, ConfigError,
                     "variogram ranges must satisfy r_max >= r_mid >= r_min > 0");
    }
};

struct HardDatum {
    int cell = 0;
    double value = 0.0;
};
using HardData = std::vector<HardDatum>;

inline void validate_hard_data(const HardData& hd, const GridSpec& grid) {
    std::vector<char> seen(grid.cells(), 0);
    for (const auto& d : hd) {
        CLRM_REQUIRE(d.cell >= 0 && d.cell < grid.cells(), ConfigError,
                     "hard-data cell " << d.cell << " outside grid");
        CLRM_REQUIRE(!seen[d.cell], ConfigError, "duplicate hard-data cell " << d.cell);
        seen[d.cell] = 1;
    }
}

struct Geomodel {
    GridSpec grid;
    std::vector<double> logk;  // ln(k[md]) per cell, x-fastest

    double perm_md(int c) const { return std::exp(logk[c]); }
    void validate() const {
        grid.validate();
        CLRM_REQUIRE(static_cast<int>(logk.size()) == grid.cells(), ShapeError,
                     "geomodel has " << logk.size() << " values for " << grid.cells() << " cells");
        for (double v : logk) CLRM_REQUIRE(std::isfinite(v), NumericalError, "non-finite log-permeability");
    }
};

// ---------------------------------------------------------------------------
// Covariance
// ---------------------------------------------------------------------------

inline double anisotropic_lag(const std::array<double, 3>& lag, const VariogramSpec& v) {
    const double az = v.azimuth_deg * M_PI / 180.0;
    const double along_max = lag[0] * std::sin(az) + lag[1] * std::cos(az);
    const double along_mid = lag[0] * std::cos(az) - lag[1] * std::sin(az);
    const double a = along_max / v.r_max, b = along_mid / v.r_mid, c = lag[2] / v.r_min;
    return std::sqrt(a * a + b * b + c * c);
}

inline double spherical_covariance(const std::array<double, 3>& lag, const VariogramSpec& v) {
    const double h = anisotropic_lag(lag, v);
    if (h >= 1.0) return 0.0;
    return v.sill * (1.0 - (1.5 * h - 0.5 * h * h * h));
}

inline Eigen::MatrixXd covariance_matrix(const GridSpec& grid, const VariogramSpec& v,
                                         std::span<const int> rows, std::span<const int> cols) {
    Eigen::MatrixXd c(rows.size(), cols.size());
    for (std::size_t b = 0; b < cols.size(); ++b) {
        const auto pb = grid.center(cols[b]);
        for (std::size_t a = 0; a < rows.size(); ++a) {
            const auto pa = grid.center(rows[a]);
            c(a, b) = spherical_covariance({pa[0] - pb[0], pa[1] - pb[1], pa[2] - pb[2]}, v);
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SamplerOptions {
    double nugget_fraction = 1e-8;  // of the sill, added to the diagonal
    int max_cells = 8000;           // dense covariance must fit in memory
};

namespace detail {

inline Eigen::LLT<Eigen::MatrixXd> factor(Eigen::MatrixXd c, double nugget) {
    c.diagonal().array() += nugget;
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    CLRM_REQUIRE(llt.info() == Eigen::Success, NumericalError,
                 "covariance factorization failed (near-singular covariance; increase the nugget)");
    return llt;
}

inline std::vector<int> iota_cells(int n) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace detail

// Jointly Gaussian draw of log-permeability at `cells` (used to fabricate the
// well-log "measurements" that every realization is conditioned to).
inline HardData draw_hard_data(const GridSpec& grid, const VariogramSpec& v, std::span<const int> cells,
                               std::uint64_t seed, const SamplerOptions& opt = {}) {
    grid.validate();
    v.validate();
    if (cells.empty()) return {};
    auto llt = detail::factor(covariance_matrix(grid, v, cells, cells), opt.nugget_fraction * v.sill);
    auto rng = make_rng(seed, {tag("hard-data")});
    Eigen::VectorXd z(cells.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = std_normal(rng);
    Eigen::VectorXd x = llt.matrixL() * z;
    HardData hd;
    for (std::size_t i = 0; i < cells.size(); ++i) hd.push_back({cells[i], v.mean + x(i)});
    validate_hard_data(hd, grid);
    return hd;
}

// Covariance-exact sampling: Cholesky of the full covariance, then simple-kriging
// conditioning with exact substitution at the hard-data cells.
inline std::vector<Geomodel> sample_realizations(const GridSpec& grid, const VariogramSpec& v,
                                                 const HardData& hd, int count, std::uint64_t seed,
                                                 const SamplerOptions& opt = {}) {
    grid.validate();
    v.validate();
    validate_hard_data(hd, grid);
    CLRM_REQUIRE(count >= 0, ConfigError, "realization count must be >= 0");
    const int n = grid.cells();
    CLRM_REQUIRE(n <= opt.max_cells, ConfigError,
                 "grid has " << n << " cells; dense covariance sampling is limited to " << opt.max_cells);

    const auto all = detail::iota_cells(n);
    const double nugget = opt.nugget_fraction * v.sill;
    auto llt = detail::factor(covariance_matrix(grid, v, all, all), nugget);
    const Eigen::MatrixXd lower = llt.matrixL();

    // Kriging weights K = C(:,h) C(h,h)^-1, stored transposed for the solve.
    std::vector<int> hcells;
    for (const auto& d : hd) hcells.push_back(d.cell);
    Eigen::MatrixXd kt;
    if (!hcells.empty()) {
        Eigen::MatrixXd chh = covariance_matrix(grid, v, hcells, hcells);
        chh.diagonal().array() += nugget;
        const Eigen::MatrixXd cgh = covariance_matrix(grid, v, hcells, all);
        kt = chh.ldlt().solve(cgh);
    }

    std::vector<Geomodel> out(count);
    parallel_for(static_cast<std::size_t>(count), [&](std::size_t r) {
        auto rng = make_rng(seed, {tag("realization"), r});
        Eigen::VectorXd z(n);
        for (int i = 0; i < n; ++i) z(i) = std_normal(rng);
        Eigen::VectorXd m = lower.triangularView<Eigen::Lower>() * z;
        m.array() += v.mean;
        if (!hcells.empty()) {
            Eigen::VectorXd resid(hcells.size());
            for (std::size_t h = 0; h < hcells.size(); ++h) resid(h) = hd[h].value - m(hcells[h]);
            m += kt.transpose() * resid;
            for (const auto& d : hd) m(d.cell) = d.value;
        }
        out[r].grid = grid;
        out[r].logk.assign(m.data(), m.data() + n);
    });
    return out;
}

// ---------------------------------------------------------------------------
// PCA parameterization: m = U_l diag(sigma_l) xi + mean
// ---------------------------------------------------------------------------

struct PcaBasis {
    GridSpec grid;
    std::vector<double> mean;
    Eigen::MatrixXd basis;         // n_g x l, orthonormal columns
    std::vector<double> singulars;  // length l, decreasing
    int l = 0;
    double energy_fraction = 0.0;
    double energy_target = 0.0;
    int n_models = 0;
};

class RankDeficientError : public NumericalError {
public:
    RankDeficientError(double achieved, double target)
        : NumericalError("PCA cannot reach energy target " + fmt12(target) + " (achieved " + fmt12(achieved) + ")"),
          achieved_(achieved) {}
    double achieved() const { return achieved_; }

private:
    double achieved_;
};

inline PcaBasis build_pca(const std::vector<Geomodel>& models, double energy_target) {
    CLRM_REQUIRE(models.size() >= 2, ShapeError, "PCA needs at least 2 models");
    CLRM_REQUIRE(energy_target > 0.0 && energy_target <= 1.0, ConfigError, "energy target must be in (0,1]");
    const GridSpec grid = models.front().grid;
    for (const auto& m : models) {
        CLRM_REQUIRE(m.grid == grid, ShapeError, "PCA models must share one grid");
        m.validate();
    }
    const int ng = grid.cells();
    const int nr = static_cast<int>(models.size());

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(ng);
    for (const auto& m : models) mean += Eigen::Map<const Eigen::VectorXd>(m.logk.data(), ng);
    mean /= nr;

    Eigen::MatrixXd y(ng, nr);
    const double scale = 1.0 / std::sqrt(static_cast<double>(nr - 1));
    for (int r = 0; r < nr; ++r)
        y.col(r) = (Eigen::Map<const Eigen::VectorXd>(models[r].logk.data(), ng) - mean) * scale;

    Eigen::BDCSVD<Eigen::MatrixXd> svd(y, Eigen::ComputeThinU);
    const Eigen::VectorXd sv = svd.singularValues();
    const double total = sv.squaredNorm();

    PcaBasis pb;
    pb.grid = grid;
    pb.mean.assign(mean.data(), mean.data() + ng);
    pb.energy_target = energy_target;
    pb.n_models = nr;

    const double tiny = 1e-12 * ((sv.size() ? sv(0) : 0.0) + mean.norm());
    const int max_l = std::min<int>(nr - 1, static_cast<int>(sv.size()));
    double cum = 0.0;
    int l = 0;
    while (l < max_l && sv(l) > tiny) {
        cum += sv(l) * sv(l);
        ++l;
        if (cum / total >= energy_target - 1e-12) break;
    }
    const double achieved = total > 0 ? cum / total : 0.0;
    if (total <= 0 || achieved < energy_target - 1e-12) throw RankDeficientError(achieved, energy_target);

    pb.l = l;
    pb.energy_fraction = std::min(1.0, achieved);
    pb.basis = svd.matrixU().leftCols(l);
    for (int i = 0; i < l; ++i) {
        // Fix the SVD sign ambiguity: largest-magnitude entry positive.
        Eigen::Index arg = 0;
        pb.basis.col(i).cwiseAbs().maxCoeff(&arg);
        if (pb.basis(arg, i) < 0) pb.basis.col(i) *= -1.0;
        pb.singulars.push_back(sv(i));
    }
    return pb;
}

inline Geomodel pca_to_model(const PcaBasis& pb, std::span<const double> xi) {
    CLRM_REQUIRE(static_cast<int>(xi.size()) == pb.l, ShapeError,
                 "latent vector has length " << xi.size() << ", basis has l = " << pb.l);
    Eigen::VectorXd scaled(pb.l);
    for (int i = 0; i < pb.l; ++i) scaled(i) = pb.singulars[i] * xi[i];
    Eigen::VectorXd m = Eigen::Map<const Eigen::VectorXd>(pb.mean.data(), pb.grid.cells());
    if (pb.l > 0) m += pb.basis * scaled;
    Geomodel g;
    g.grid = pb.grid;
    g.logk.assign(m.data(), m.data() + m.size());
    return g;
}

inline std::vector<double> pca_project(const PcaBasis& pb, const Geomodel& m) {
    CLRM_REQUIRE(m.grid == pb.grid, ShapeError, "model grid does not match PCA grid");
    const int ng = pb.grid.cells();
    const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(m.logk.data(), ng) -
                              Eigen::Map<const Eigen::VectorXd>(pb.mean.data(), ng);
    const Eigen::VectorXd proj = pb.basis.transpose() * d;
    std::vector<double> xi(pb.l);
    for (int i = 0; i < pb.l; ++i) xi[i] = proj(i) / pb.singulars[i];
    return xi;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline void write_geomodel(const std::filesystem::path& p, const Geomodel& m) {
    m.validate();
    auto os = open_out(p, true);
    write_pod<std::int32_t>(os, m.grid.nx);
    write_pod<std::int32_t>(os, m.grid.ny);
    write_pod<std::int32_t>(os, m.grid.nz);
    write_pod<double>(os, m.grid.dx);
    write_pod<double>(os, m.grid.dy);
    write_pod<double>(os, m.grid.dz);
    os.write(reinterpret_cast<const char*>(m.logk.data()), static_cast<std::streamsize>(m.logk.size() * sizeof(double)));
}

inline Geomodel read_geomodel(const std::filesystem::path& p) {
    auto is = open_in(p, true);
    Geomodel m;
    m.grid.nx = read_pod<std::int32_t>(is);
    m.grid.ny = read_pod<std::int32_t>(is);
    m.grid.nz = read_pod<std::int32_t>(is);
    m.grid.dx = read_pod<double>(is);
    m.grid.dy = read_pod<double>(is);
    m.grid.dz = read_pod<double>(is);
    m.grid.validate();
    m.logk.resize(m.grid.cells());
    is.read(reinterpret_cast<char*>(m.logk.data()), static_cast<std::streamsize>(m.logk.size() * sizeof(double)));
    CLRM_REQUIRE(is.gcount() == static_cast<std::streamsize>(m.logk.size() * sizeof(double)), IoError,
                 "truncated geomodel file " << p.string());
    m.validate();
    return m;
}

inline void write_geomodel_csv(const std::filesystem::path& p, const Geomodel& m) {
    auto os = open_out(p);
    os << "cell,i,j,k,logk\n";
    for (int c = 0; c < m.grid.cells(); ++c) {
        auto [i, j, k] = m.grid.ijk(c);
        os << c << ',' << i << ',' << j << ',' << k << ',' << fmt12(m.logk[c]) << '\n';
    }
}

inline void write_pca(const std::filesystem::path& p, const PcaBasis& pb) {
    auto os = open_out(p, true);
    os.write("CLRMPCA1", 8);
    write_pod<std::int32_t>(os, pb.grid.nx);
    write_pod<std::int32_t>(os, pb.grid.ny);
    write_pod<std::int32_t>(os, pb.grid.nz);
    write_pod<double>(os, pb.grid.dx);
    write_pod<double>(os, pb.grid.dy);
    write_pod<double>(os, pb.grid.dz);
    write_pod<std::int32_t>(os, pb.l);
    write_pod<std::int32_t>(os, pb.n_models);
    write_pod<double>(os, pb.energy_fraction);
    write_pod<double>(os, pb.energy_target);
    for (double v : pb.mean) write_pod(os, v);
    for (double v : pb.singulars) write_pod(os, v);
    for (Eigen::Index c = 0; c < pb.basis.cols(); ++c)
        for (Eigen::Index r = 0; r < pb.basis.rows(); ++r) write_pod(os, pb.basis(r, c));
}

inline PcaBasis read_pca(const std::filesystem::path& p) {
    auto is = open_in(p, true);
    char magic[8];
    is.read(magic, 8);
    CLRM_REQUIRE(is.good() && std::string(magic, 8) == "CLRMPCA1", IoError, "not a PCA basis file: " << p.string());
    PcaBasis pb;
    pb.grid.nx = read_pod<std::int32_t>(is);
    pb.grid.ny = read_pod<std::int32_t>(is);
    pb.grid.nz = read_pod<std::int32_t>(is);
    pb.grid.dx = read_pod<double>(is);
    pb.grid.dy = read_pod<double>(is);
    pb.grid.dz = read_pod<double>(is);
    pb.l = read_pod<std::int32_t>(is);
    pb.n_models = read_pod<std::int32_t>(is);
    pb.energy_fraction = read_pod<double>(is);
    pb.energy_target = read_pod<double>(is);
    const int ng = pb.grid.cells();
    pb.mean.resize(ng);
    for (auto& v : pb.mean) v = read_pod<double>(is);
    pb.singulars.resize(pb.l);
    for (auto& v : pb.singulars) v = read_pod<double>(is);
    pb.basis.resize(ng, pb.l);
    for (int c = 0; c < pb.l; ++c)
        for (int r = 0; r < ng; ++r) pb.basis(r, c) = read_pod<double>(is);
    return pb;
}

}  // namespace clrm::geostat
