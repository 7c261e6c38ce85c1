#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flmm/fpca.hpp"
#include "flmm/rng.hpp"
#include "flmm/sim.hpp"

using namespace flmm;

namespace {

FunctionalSample curve_on_grid(int n_pts, const std::function<double(double)>& f,
                               const std::string& sid = "s1", const std::string& vid = "v1") {
    FunctionalSample s;
    s.subject_id = sid;
    s.visit_id = vid;
    s.t = Eigen::VectorXd::LinSpaced(n_pts, 0.0, 1.0);
    s.x.resize(n_pts);
    for (int i = 0; i < n_pts; ++i) s.x[i] = f(s.t[i]);
    return s;
}

// generator-style basis: sqrt(2) {sin 2pi t, cos 2pi t, sin 4pi t, cos 4pi t}
double psi(int k, double t) {
    switch (k) {
        case 0: return std::sin(2.0 * M_PI * t);
        case 1: return std::cos(2.0 * M_PI * t);
        case 2: return std::sin(4.0 * M_PI * t);
        default: return std::cos(4.0 * M_PI * t);
    }
}

std::vector<FunctionalSample> flatten(const Dataset& d) {
    std::vector<FunctionalSample> out;
    for (const auto& s : d.subjects)
        for (const auto& v : s.visits) out.push_back(v.curve);
    return out;
}

double ise(const Eigen::VectorXd& grid, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return trapezoid_weights(grid).dot((a - b).cwiseAbs2());
}

}  // namespace

TEST_CASE("mean of constant curves is exactly that constant") {
    std::vector<FunctionalSample> obs;
    for (int i = 0; i < 5; ++i)
        obs.push_back(curve_on_grid(31, [](double) { return 2.5; }, "s" + std::to_string(i)));
    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(101, 0.0, 1.0);
    const Eigen::VectorXd mu = estimate_mean(obs, grid, 0.05);
    CHECK((mu.array() - 2.5).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("mean of identical noiseless curves tracks the curve on the interior") {
    std::vector<FunctionalSample> obs;
    for (int i = 0; i < 4; ++i)
        obs.push_back(
            curve_on_grid(201, [](double t) { return std::sin(M_PI * t); }, "s" + std::to_string(i)));
    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(101, 0.0, 1.0);
    const Eigen::VectorXd mu = estimate_mean(obs, grid, 0.015);
    for (Eigen::Index k = 0; k < grid.size(); ++k) {
        if (grid[k] < 0.1 || grid[k] > 0.9) continue;
        CHECK(mu[k] == Catch::Approx(std::sin(M_PI * grid[k])).margin(1e-3));
    }
}

TEST_CASE("pooled mean recovers sin(pi t) from 200 noisy curves") {
    Rng rng(77);
    std::vector<FunctionalSample> obs;
    for (int i = 0; i < 200; ++i) {
        Eigen::Vector4d xi;
        for (int k = 0; k < 4; ++k) xi[k] = rng.normal(0.0, std::sqrt(0.25 / (1 << (k + 1))));
        std::vector<double> noise(51);
        FunctionalSample s = curve_on_grid(
            51,
            [&](double t) {
                double v = std::sin(M_PI * t);
                for (int k = 0; k < 4; ++k) v += std::sqrt(2.0) * xi[k] * psi(k, t);
                return v;
            },
            "s" + std::to_string(i));
        for (Eigen::Index k = 0; k < s.x.size(); ++k) s.x[k] += rng.normal(0.0, 0.3);
        obs.push_back(std::move(s));
    }
    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(101, 0.0, 1.0);
    const Eigen::VectorXd mu = estimate_mean(obs, grid, 0.05);
    double sup = 0.0;
    for (Eigen::Index k = 0; k < grid.size(); ++k)
        sup = std::max(sup, std::abs(mu[k] - std::sin(M_PI * grid[k])));
    CHECK(sup <= 0.1);
}

TEST_CASE("covariance surface is symmetric and the nugget vanishes without noise") {
    Scenario scn;
    scn.n = 20;
    scn.m = 5;
    scn.sigma_e = 0.0;
    scn.seed = 3;
    Rng rng = Rng::substream(scn.seed, 0);
    const GeneratedData g = generate(scn, rng);
    const std::vector<FunctionalSample> obs = flatten(g.data);

    FpcaModel model = fit_fpca(obs, g.data.domain);
    const auto [surface, noise_var] = smooth_covariance(obs, model, 0.05);
    CHECK((surface - surface.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(noise_var <= 1e-3 * surface.diagonal().maxCoeff());
    CHECK(model.noise_var <= 1e-3 * surface.diagonal().maxCoeff());
}

TEST_CASE("nugget estimate recovers the generating measurement-error variance") {
    Scenario scn;
    scn.n = 40;  // 200 curves
    scn.m = 5;
    scn.sigma_e = 0.5;
    scn.seed = 11;
    Rng rng = Rng::substream(scn.seed, 0);
    const GeneratedData g = generate(scn, rng);
    FpcaModel model = fit_fpca(flatten(g.data), g.data.domain);
    CHECK(model.noise_var > 0.7 * 0.25);
    CHECK(model.noise_var < 1.3 * 0.25);
}

TEST_CASE("eigen_decompose on analytic surfaces") {
    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(101, 0.0, 1.0);

    SECTION("rank-1 surface returns its eigenpair") {
        Eigen::VectorXd phi(grid.size());
        for (Eigen::Index k = 0; k < grid.size(); ++k)
            phi[k] = std::sqrt(2.0) * std::sin(2.0 * M_PI * grid[k]);
        const double lambda = 0.7;
        const Eigen::MatrixXd surface = lambda * phi * phi.transpose();
        Eigen::VectorXd ev;
        Eigen::MatrixXd ef;
        eigen_decompose(surface, grid, 10, ev, ef);
        REQUIRE(ev.size() == 1);
        CHECK(ev[0] == Catch::Approx(lambda).margin(1e-6));
        const Eigen::VectorXd w = trapezoid_weights(grid);
        const double align = std::abs(w.dot(ef.col(0).cwiseProduct(phi)));
        CHECK(align == Catch::Approx(1.0).margin(1e-6));
    }

    SECTION("zero surface yields no components") {
        Eigen::VectorXd ev;
        Eigen::MatrixXd ef;
        eigen_decompose(Eigen::MatrixXd::Zero(grid.size(), grid.size()), grid, 10, ev, ef);
        CHECK(ev.size() == 0);
    }
}

TEST_CASE("fitted eigenstructure matches the generator") {
    Scenario scn;
    scn.n = 60;  // 300 curves, no measurement error
    scn.m = 5;
    scn.sigma_e = 0.0;
    scn.seed = 21;
    Rng rng = Rng::substream(scn.seed, 0);
    const GeneratedData g = generate(scn, rng);
    FpcaModel model = fit_fpca(flatten(g.data), g.data.domain);
    REQUIRE(model.n_components() >= 4);

    // the per-subject mean absorbs a (1 - 1/m) factor uniformly, so the
    // eigenvalue *ratios* still follow (1, 1/2, 1/4, 1/8)
    for (int k = 1; k < 4; ++k) {
        const double ratio = model.eigenvalues[k] / model.eigenvalues[0];
        CHECK(ratio == Catch::Approx(1.0 / (1 << k)).epsilon(0.15));
    }

    const Eigen::VectorXd w = trapezoid_weights(model.grid);
    for (int k = 0; k < 4; ++k) {
        Eigen::VectorXd truth(model.grid.size());
        for (Eigen::Index i = 0; i < model.grid.size(); ++i)
            truth[i] = std::sqrt(2.0) * psi(k, model.grid[i]);
        const double align = std::abs(w.dot(model.eigenfunctions.col(k).cwiseProduct(truth)));
        CHECK(align >= 0.95);
    }

    // quadrature orthonormality of the fitted eigenfunctions
    const Eigen::MatrixXd gram = model.eigenfunctions.transpose() * w.asDiagonal() *
                                 model.eigenfunctions;
    CHECK((gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() <=
          1e-6);

    // pve is nondecreasing and ends at 1
    for (Eigen::Index k = 1; k < model.pve.size(); ++k) CHECK(model.pve[k] >= model.pve[k - 1]);
    CHECK(model.pve[model.pve.size() - 1] == Catch::Approx(1.0));
}

TEST_CASE("choose_num_fpcs_pve arithmetic") {
    FpcaModel model;
    model.eigenvalues.resize(4);
    model.eigenvalues << 1.0, 0.5, 0.25, 0.125;
    model.pve.resize(4);
    double cum = 0.0;
    for (int k = 0; k < 4; ++k) {
        cum += model.eigenvalues[k];
        model.pve[k] = cum / 1.875;
    }
    CHECK(choose_num_fpcs_pve(model, 0.9) == 3);   // 0.533, 0.8, 0.933, 1
    CHECK(choose_num_fpcs_pve(model, 1.0) == 4);
    CHECK(choose_num_fpcs_pve(model, 0.5) == 1);
    CHECK_THROWS_AS(choose_num_fpcs_pve(model, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(choose_num_fpcs_pve(model, 1.5), std::invalid_argument);
}

TEST_CASE("pace scores on dense noiseless curves") {
    // hand-built model: zero mean, two exact eigenfunctions, no nugget
    FpcaModel model;
    model.grid = Eigen::VectorXd::LinSpaced(201, 0.0, 1.0);
    model.mean = Eigen::VectorXd::Zero(201);
    model.eigenvalues.resize(2);
    model.eigenvalues << 1.0, 0.5;
    model.eigenfunctions.resize(201, 2);
    for (Eigen::Index i = 0; i < 201; ++i) {
        model.eigenfunctions(i, 0) = std::sqrt(2.0) * std::sin(2.0 * M_PI * model.grid[i]);
        model.eigenfunctions(i, 1) = std::sqrt(2.0) * std::cos(2.0 * M_PI * model.grid[i]);
    }
    model.noise_var = 0.0;

    FunctionalSample s;
    s.subject_id = "s1";
    s.t = model.grid;
    const double c1 = 0.8, c2 = -0.4;
    s.x = c1 * model.eigenfunctions.col(0) + c2 * model.eigenfunctions.col(1);

    SECTION("scores recover the expansion coefficients") {
        const Eigen::VectorXd sc = pace_scores(s, model, 2);
        REQUIRE(sc.size() == 2);
        CHECK(sc[0] == Catch::Approx(c1).margin(1e-4));
        CHECK(sc[1] == Catch::Approx(c2).margin(1e-4));
    }

    SECTION("curve equal to the mean has zero scores") {
        FunctionalSample flat = s;
        flat.x.setZero();
        const Eigen::VectorXd sc = pace_scores(flat, model, 2);
        CHECK(sc.cwiseAbs().maxCoeff() <= 1e-12);
    }

    SECTION("scores agree with direct quadrature projection") {
        const Eigen::VectorXd w = trapezoid_weights(model.grid);
        const Eigen::VectorXd sc = pace_scores(s, model, 2);
        for (int k = 0; k < 2; ++k) {
            const double proj = w.dot(s.x.cwiseProduct(model.eigenfunctions.col(k)));
            CHECK(sc[k] == Catch::Approx(proj).margin(1e-3));
        }
    }

    SECTION("requesting too many components throws") {
        CHECK_THROWS_AS(pace_scores(s, model, 3), std::invalid_argument);
    }

    SECTION("reconstruction error is nested in M") {
        double prev = std::numeric_limits<double>::infinity();
        for (int M = 0; M <= 2; ++M) {
            const FunctionalSample rec = reconstruct(s, model, M);
            const double err = ise(model.grid, rec.x, s.x);
            CHECK(err <= prev + 1e-10);
            prev = err;
        }
    }

    SECTION("M = 0 reconstruction is the mean curve") {
        const FunctionalSample rec = reconstruct(s, model, 0);
        CHECK((rec.x - model.mean).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("reconstruction denoises the generator's contaminated curves") {
    Scenario scn;
    scn.n = 40;
    scn.m = 5;
    scn.sigma_e = 0.5;
    scn.seed = 5;
    Rng rng = Rng::substream(scn.seed, 0);
    const GeneratedData g = generate(scn, rng);
    const std::vector<FunctionalSample> obs = flatten(g.data);

    FpcaModel model = fit_fpca(obs, g.data.domain);
    const int M = choose_num_fpcs_pve(model, 0.95);
    const std::vector<FunctionalSample> rec = reconstruct_all(obs, model, M);

    // working grid coincides with the generator's observation grid
    REQUIRE(rec[0].t.size() == g.true_curves[0].t.size());
    double ise_rec = 0.0, ise_raw = 0.0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        ise_rec += ise(rec[i].t, rec[i].x, g.true_curves[i].x);
        ise_raw += ise(obs[i].t, obs[i].x, g.true_curves[i].x);
    }
    CHECK(ise_rec < ise_raw);
}

TEST_CASE("input validation") {
    CHECK_THROWS_AS(fit_fpca({}, {0.0, 1.0}), std::invalid_argument);
    std::vector<FunctionalSample> one{curve_on_grid(2, [](double t) { return t; })};
    CHECK_NOTHROW(fit_fpca(one, {0.0, 1.0}));
}
