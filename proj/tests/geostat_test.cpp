#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "clrm/geostat.hpp"

using namespace clrm;
using namespace clrm::geostat;

namespace {

VariogramSpec unit_variogram() {
    VariogramSpec v;
    v.sill = 1.0;
    v.r_max = 60.0;
    v.r_mid = 30.0;
    v.r_min = 8.0;
    v.azimuth_deg = 30.0;
    v.mean = 4.79;
    return v;
}

GridSpec small_grid() { return GridSpec{10, 10, 2, 10.0, 10.0, 4.0}; }

}  // namespace

TEST(SphericalCovariance, ZeroLagIsSill) {
    auto v = unit_variogram();
    v.sill = 2.25;
    EXPECT_DOUBLE_EQ(spherical_covariance({0, 0, 0}, v), 2.25);
}

TEST(SphericalCovariance, VanishesBeyondRange) {
    auto v = unit_variogram();
    EXPECT_EQ(spherical_covariance({0, 0, v.r_min}, v), 0.0);
    EXPECT_EQ(spherical_covariance({500.0, 500.0, 0}, v), 0.0);
}

TEST(SphericalCovariance, HalfRangeAlongMajorAxis) {
    auto v = unit_variogram();
    v.azimuth_deg = 0.0;
    v.sill = 3.0;
    // 1 - (1.5*0.5 - 0.5*0.125) = 0.3125
    EXPECT_NEAR(spherical_covariance({0, v.r_max / 2, 0}, v), 0.3125 * 3.0, 1e-14);
}

TEST(SphericalCovariance, AzimuthRotatesMajorAxis) {
    auto v = unit_variogram();
    v.azimuth_deg = 90.0;  // r_max now along +x
    EXPECT_NEAR(spherical_covariance({v.r_max / 2, 0, 0}, v), 0.3125, 1e-12);
    EXPECT_NEAR(spherical_covariance({0, v.r_mid / 2, 0}, v), 0.3125, 1e-12);
}

TEST(SphericalCovariance, SymmetricPsdOnRandomSubsets) {
    const auto grid = small_grid();
    const auto v = unit_variogram();
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<int> cells;
        for (int c = 0; c < grid.cells(); ++c)
            if (uniform01(rng) < 0.3) cells.push_back(c);
        Eigen::MatrixXd c = covariance_matrix(grid, v, cells, cells);
        EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-15);
        c.diagonal().array() += 1e-8 * v.sill;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
        EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
    }
}

TEST(Sampling, HonorsHardDataExactly) {
    const auto grid = small_grid();
    const auto v = unit_variogram();
    std::vector<int> cells = {grid.index(2, 3, 0), grid.index(2, 3, 1), grid.index(7, 7, 0), grid.index(7, 7, 1)};
    const auto hd = draw_hard_data(grid, v, cells, 5);
    const auto reals = sample_realizations(grid, v, hd, 6, 99);
    ASSERT_EQ(reals.size(), 6u);
    for (const auto& r : reals)
        for (const auto& d : hd) EXPECT_EQ(r.logk[d.cell], d.value);
}

TEST(Sampling, DeterministicForFixedSeed) {
    const auto grid = small_grid();
    const auto v = unit_variogram();
    const auto a = sample_realizations(grid, v, {}, 3, 42);
    const auto b = sample_realizations(grid, v, {}, 3, 42);
    const auto c = sample_realizations(grid, v, {}, 3, 43);
    for (int r = 0; r < 3; ++r) EXPECT_EQ(a[r].logk, b[r].logk);
    EXPECT_NE(a[0].logk, c[0].logk);
}

TEST(Sampling, IndependentOfThreadCount) {
    const auto grid = small_grid();
    const auto v = unit_variogram();
    set_thread_limit(1);
    const auto a = sample_realizations(grid, v, {}, 4, 8);
    set_thread_limit(3);
    const auto b = sample_realizations(grid, v, {}, 4, 8);
    set_thread_limit(1);
    for (int r = 0; r < 4; ++r) EXPECT_EQ(a[r].logk, b[r].logk);
}

TEST(Sampling, EnsembleMomentsMatchTarget) {
    const auto grid = small_grid();
    const auto v = unit_variogram();
    const auto reals = sample_realizations(grid, v, {}, 2000, 2024);
    for (int c = 0; c < grid.cells(); ++c) {
        double s = 0, s2 = 0;
        for (const auto& r : reals) {
            s += r.logk[c];
            s2 += r.logk[c] * r.logk[c];
        }
        const double mean = s / reals.size();
        const double var = s2 / reals.size() - mean * mean;
        EXPECT_NEAR(mean, v.mean, 0.1) << "cell " << c;
        EXPECT_NEAR(var, v.sill, 0.15 * v.sill) << "cell " << c;
    }
}

TEST(Sampling, RejectsOversizedGrid) {
    SamplerOptions opt;
    opt.max_cells = 10;
    EXPECT_THROW(sample_realizations(small_grid(), unit_variogram(), {}, 1, 1, opt), ConfigError);
}

TEST(Sampling, RejectsDuplicateHardData) {
    HardData hd = {{3, 1.0}, {3, 2.0}};
    EXPECT_THROW(sample_realizations(small_grid(), unit_variogram(), hd, 1, 1), ConfigError);
}

class PcaFixture : public ::testing::Test {
protected:
    void SetUp() override {
        grid = small_grid();
        auto v = unit_variogram();
        std::vector<int> cells = {grid.index(1, 1, 0), grid.index(1, 1, 1), grid.index(8, 8, 0), grid.index(8, 8, 1)};
        hd = draw_hard_data(grid, v, cells, 3);
        models = sample_realizations(grid, v, hd, 40, 77);
        basis = build_pca(models, 0.85);
    }
    GridSpec grid;
    HardData hd;
    std::vector<Geomodel> models;
    PcaBasis basis;
};

TEST_F(PcaFixture, ZeroLatentGivesMeanExactly) {
    std::vector<double> xi(basis.l, 0.0);
    EXPECT_EQ(pca_to_model(basis, xi).logk, basis.mean);
}

TEST_F(PcaFixture, BasisIsOrthonormal) {
    const Eigen::MatrixXd g = basis.basis.transpose() * basis.basis;
    EXPECT_LT((g - Eigen::MatrixXd::Identity(basis.l, basis.l)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST_F(PcaFixture, InvariantsHold) {
    EXPECT_GE(basis.energy_fraction, 0.85);
    EXPECT_LE(basis.l, static_cast<int>(models.size()) - 1);
    for (int i = 1; i < basis.l; ++i) EXPECT_LT(basis.singulars[i], basis.singulars[i - 1]);
    for (double s : basis.singulars) EXPECT_GT(s, 0.0);
}

TEST_F(PcaFixture, SmallestDimensionReachingTarget) {
    // l-1 components must fall short of the target.
    Eigen::MatrixXd y(grid.cells(), models.size());
    for (std::size_t r = 0; r < models.size(); ++r)
        for (int c = 0; c < grid.cells(); ++c) y(c, r) = models[r].logk[c] - basis.mean[c];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(y);
    const auto sv = svd.singularValues();
    double total = sv.squaredNorm(), cum = 0;
    for (int i = 0; i < basis.l - 1; ++i) cum += sv(i) * sv(i);
    EXPECT_LT(cum / total, 0.85);
}

TEST_F(PcaFixture, UnitLatentAddsScaledColumn) {
    std::vector<double> xi(basis.l, 0.0);
    xi[1] = 1.0;
    const auto m = pca_to_model(basis, xi);
    for (int c = 0; c < grid.cells(); ++c)
        EXPECT_NEAR(m.logk[c], basis.mean[c] + basis.singulars[1] * basis.basis(c, 1), 1e-12);
}

TEST_F(PcaFixture, ProjectionRoundTrip) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> xi(basis.l);
        for (auto& x : xi) x = std_normal(rng);
        const auto back = pca_project(basis, pca_to_model(basis, xi));
        for (int i = 0; i < basis.l; ++i) EXPECT_NEAR(back[i], xi[i], 1e-8);
    }
}

TEST_F(PcaFixture, ReconstructionErrorBoundedByDiscardedEnergy) {
    double err2 = 0, tot2 = 0;
    for (const auto& m : models) {
        const auto rec = pca_to_model(basis, pca_project(basis, m));
        for (int c = 0; c < grid.cells(); ++c) {
            err2 += std::pow(rec.logk[c] - m.logk[c], 2);
            tot2 += std::pow(m.logk[c] - basis.mean[c], 2);
        }
    }
    EXPECT_LE(err2 / tot2, 1.0 - basis.energy_target + 0.05);
}

TEST_F(PcaFixture, ModelsFromLatentHonorHardData) {
    Rng rng(9);
    std::vector<double> xi(basis.l);
    for (auto& x : xi) x = std_normal(rng);
    const auto m = pca_to_model(basis, xi);
    for (const auto& d : hd) EXPECT_NEAR(m.logk[d.cell], d.value, 1e-10);
}

TEST(Pca, TwoModelsFullEnergyIsRankOne) {
    const auto grid = small_grid();
    auto models = sample_realizations(grid, unit_variogram(), {}, 2, 3);
    const auto pb = build_pca(models, 1.0);
    EXPECT_EQ(pb.l, 1);
    for (const auto& m : models) {
        const auto rec = pca_to_model(pb, pca_project(pb, m));
        for (int c = 0; c < grid.cells(); ++c) EXPECT_NEAR(rec.logk[c], m.logk[c], 1e-10);
    }
}

TEST(Pca, IdenticalModelsAreRankDeficient) {
    const auto grid = small_grid();
    auto one = sample_realizations(grid, unit_variogram(), {}, 1, 3);
    std::vector<Geomodel> models = {one[0], one[0], one[0]};
    try {
        build_pca(models, 0.85);
        FAIL() << "expected RankDeficientError";
    } catch (const RankDeficientError& e) {
        EXPECT_EQ(e.achieved(), 0.0);
    }
}

TEST(Pca, LatentLengthMismatchThrows) {
    const auto grid = small_grid();
    const auto pb = build_pca(sample_realizations(grid, unit_variogram(), {}, 5, 3), 0.85);
    std::vector<double> xi(pb.l + 1, 0.0);
    EXPECT_THROW(pca_to_model(pb, xi), ShapeError);
}

TEST(GeomodelFile, BinaryLayoutIsExact) {
    Geomodel m;
    m.grid = GridSpec{2, 1, 1, 15.0, 15.0, 4.0};
    m.logk = {1.5, -2.25};
    const auto path = std::filesystem::temp_directory_path() / "clrm_geomodel_test.bin";
    write_geomodel(path, m);
    EXPECT_EQ(std::filesystem::file_size(path), 3u * 4 + 3u * 8 + 2u * 8);
    auto is = open_in(path, true);
    EXPECT_EQ(read_pod<std::int32_t>(is), 2);
    EXPECT_EQ(read_pod<std::int32_t>(is), 1);
    EXPECT_EQ(read_pod<std::int32_t>(is), 1);
    EXPECT_EQ(read_pod<double>(is), 15.0);
    const auto back = read_geomodel(path);
    EXPECT_EQ(back.logk, m.logk);
    EXPECT_EQ(back.grid, m.grid);
}

TEST(PcaFile, RoundTrip) {
    const auto grid = small_grid();
    const auto pb = build_pca(sample_realizations(grid, unit_variogram(), {}, 6, 3), 0.9);
    const auto path = std::filesystem::temp_directory_path() / "clrm_pca_test.bin";
    write_pca(path, pb);
    const auto back = read_pca(path);
    EXPECT_EQ(back.l, pb.l);
    EXPECT_EQ(back.mean, pb.mean);
    EXPECT_EQ(back.singulars, pb.singulars);
    EXPECT_EQ((back.basis - pb.basis).cwiseAbs().maxCoeff(), 0.0);
}
