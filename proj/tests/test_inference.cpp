#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flmm/inference.hpp"
#include "flmm/rng.hpp"
#include "flmm/selection.hpp"
#include "flmm/sim.hpp"

using namespace flmm;

namespace {

struct TinyInstance {
    DesignBlocks db;
    Penalties pen;
    BasisSystem basis = make_bspline_basis({0.0, 1.0}, 4, 0);  // J = K = 4
};

TinyInstance random_instance(Rng& rng, int n, int m) {
    TinyInstance inst;
    inst.pen.G_beta = penalty_matrix(inst.basis, RoughnessOperator::derivative(2));
    inst.pen.G_b = inst.pen.G_beta;
    Dataset d;
    d.domain = {0.0, 1.0};
    for (int i = 0; i < n; ++i) {
        Subject s;
        s.subject_id = "s" + std::to_string(i);
        for (int j = 0; j < m; ++j) {
            Visit v;
            v.y = rng.normal(0.0, 2.0);
            v.curve.subject_id = s.subject_id;
            v.curve.visit_id = "v" + std::to_string(j);
            v.curve.t = Eigen::VectorXd::LinSpaced(25, 0.0, 1.0);
            v.curve.x.resize(25);
            const double a = rng.normal(), b = rng.normal(), c = rng.normal(),
                         e = rng.normal();
            for (int k = 0; k < 25; ++k) {
                const double t = v.curve.t[k];
                v.curve.x[k] = a + b * t + c * t * t + e * t * t * t;
            }
            s.visits.push_back(v);
        }
        d.subjects.push_back(s);
    }
    inst.db = build_design(d, inst.basis, inst.basis);
    return inst;
}

}  // namespace

TEST_CASE("normal quantile and the conventional z multiplier") {
    CHECK(z_multiplier(0.95) == 1.96);
    CHECK(normal_quantile(0.975) == Catch::Approx(1.959964).margin(1e-5));
    CHECK(normal_quantile(0.995) == Catch::Approx(2.575829).margin(1e-5));
    CHECK(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-12));
    CHECK_THROWS_AS(normal_quantile(0.0), std::invalid_argument);
    CHECK_THROWS_AS(normal_quantile(1.0), std::invalid_argument);
}

TEST_CASE("cov_theta reduces to the OLS form when random effects vanish") {
    Rng rng(17);
    TinyInstance inst = random_instance(rng, 1, 12);
    FitResult fit;
    fit.lambdas = {0.0, 1.0};
    fit.vc = VarianceComponents::identity(4);
    fit.vc.sigma2_eps = 2.0;
    fit.vc.sigma2_a = 1e-14;
    fit.vc.D *= 1e-14;  // Dtilde -> 0, so V -> sigma2_eps * I
    const Eigen::MatrixXd cov = cov_theta(inst.db, inst.pen, fit);
    const Eigen::MatrixXd& W = inst.db.W[0];
    const Eigen::MatrixXd ols = fit.vc.sigma2_eps * (W.transpose() * W).inverse();
    CHECK((cov - ols).cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + ols.cwiseAbs().maxCoeff()));
}

TEST_CASE("cov_theta is symmetric and PSD; sandwich agrees when unpenalized") {
    Rng rng(29);
    TinyInstance inst = random_instance(rng, 4, 5);
    FitResult fit = run_em(inst.db, inst.pen, Lambdas{3.0, 0.7});
    const Eigen::MatrixXd cov = cov_theta(inst.db, inst.pen, fit);
    CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10 * cov.trace());

    // with lambda_beta = 0, A = sum W'V^-1 W and the sandwich collapses
    FitResult fit0 = run_em(inst.db, inst.pen, Lambdas{0.0, 0.7});
    const Eigen::MatrixXd simple = cov_theta(inst.db, inst.pen, fit0, false);
    const Eigen::MatrixXd sand = cov_theta(inst.db, inst.pen, fit0, true);
    CHECK((simple - sand).cwiseAbs().maxCoeff() <=
          1e-8 * (1.0 + simple.cwiseAbs().maxCoeff()));

    // penalized: sandwich is no larger than the simplified form (A >= mid)
    const Eigen::MatrixXd sand1 = cov_theta(inst.db, inst.pen, fit, true);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> gap(cov - sand1);
    CHECK(gap.eigenvalues().minCoeff() >= -1e-10 * cov.trace());
}

TEST_CASE("intercept CI reproduces the published examples") {
    FitResult fit;
    fit.theta = Eigen::VectorXd::Zero(2);

    SECTION("air-pollution study numbers") {
        fit.theta[0] = 3.8262;
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(2, 2);
        cov(0, 0) = 0.0094 * 0.0094;
        const IntervalEstimate ci = intercept_ci(fit, cov);
        CHECK(ci.lower == Catch::Approx(3.8078).margin(5e-4));
        CHECK(ci.upper == Catch::Approx(3.8446).margin(5e-4));
    }

    SECTION("weather study numbers") {
        fit.theta[0] = 2.994;
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(2, 2);
        cov(0, 0) = 0.055 * 0.055;
        const IntervalEstimate ci = intercept_ci(fit, cov);
        // the published interval carries the rounding of the reported SE
        CHECK(ci.lower == Catch::Approx(2.886).margin(1e-3));
        CHECK(ci.upper == Catch::Approx(3.101).margin(1e-3));
    }

    SECTION("zero variance collapses the interval") {
        fit.theta[0] = 1.5;
        const IntervalEstimate ci = intercept_ci(fit, Eigen::MatrixXd::Zero(2, 2));
        CHECK(ci.lower == 1.5);
        CHECK(ci.upper == 1.5);
    }
}

TEST_CASE("pointwise band geometry") {
    Rng rng(41);
    TinyInstance inst = random_instance(rng, 4, 5);
    FitResult fit = run_em(inst.db, inst.pen, Lambdas{1.0, 1.0});
    const Eigen::MatrixXd cov = cov_theta(inst.db, inst.pen, fit);
    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(41, 0.0, 1.0);

    const PointwiseBand b95 = beta_band(fit, inst.basis, cov, grid, 0.95);
    const PointwiseBand b99 = beta_band(fit, inst.basis, cov, grid, 0.99);
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        CHECK(b95.lower[i] <= b95.center[i]);
        CHECK(b95.center[i] <= b95.upper[i]);
        // symmetric about the center
        CHECK(b95.upper[i] - b95.center[i] ==
              Catch::Approx(b95.center[i] - b95.lower[i]).margin(1e-12));
        // wider level contains the narrower one
        CHECK(b99.lower[i] <= b95.lower[i] + 1e-12);
        CHECK(b99.upper[i] >= b95.upper[i] - 1e-12);
    }

    SECTION("zero covariance collapses the band onto the center") {
        const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(cov.rows(), cov.cols());
        const PointwiseBand flat = beta_band(fit, inst.basis, zero, grid);
        CHECK((flat.upper - flat.lower).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("half-width jumps vanish under grid refinement") {
        auto max_jump = [&](int npts) {
            const Eigen::VectorXd g = Eigen::VectorXd::LinSpaced(npts, 0.0, 1.0);
            const PointwiseBand b = beta_band(fit, inst.basis, cov, g);
            double mj = 0.0;
            for (Eigen::Index i = 0; i + 1 < g.size(); ++i)
                mj = std::max(mj, std::abs((b.upper[i + 1] - b.center[i + 1]) -
                                           (b.upper[i] - b.center[i])));
            return mj;
        };
        CHECK(max_jump(1281) < 0.5 * max_jump(41));
    }
}

TEST_CASE("gamma surface: symmetry, PSD diagonal, zero case") {
    Rng rng(59);
    TinyInstance inst = random_instance(rng, 5, 4);
    FitResult fit = run_em(inst.db, inst.pen, Lambdas{1.0, 1.0});
    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(31, 0.0, 1.0);

    const Eigen::MatrixXd Db = penalized_Db(inst.db, inst.pen, fit);
    CHECK((Db - Db.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + Db.norm()));
    const CovSurface g = gamma_surface(Db, inst.basis, grid);
    CHECK((g.values - g.values.transpose()).cwiseAbs().maxCoeff() <=
          1e-12 * (1.0 + g.values.cwiseAbs().maxCoeff()));
    CHECK(g.values.diagonal().minCoeff() >= -1e-10 * g.values.cwiseAbs().maxCoeff());

    const CovSurface zero =
        gamma_surface(Eigen::MatrixXd::Zero(4, 4), inst.basis, grid);
    CHECK(zero.values.cwiseAbs().maxCoeff() == 0.0);

    // with lambda_b = 0 the penalized block is exactly the fitted D
    FitResult fit0 = fit;
    fit0.lambdas.b = 0.0;
    const Eigen::MatrixXd Db0 = penalized_Db(inst.db, inst.pen, fit0);
    CHECK((Db0 - fit0.vc.D).cwiseAbs().maxCoeff() <=
          1e-8 * (1.0 + fit0.vc.D.cwiseAbs().maxCoeff()));
}

TEST_CASE("gamma surface tracks the generating covariance on one replicate") {
    Scenario scn;
    scn.slope_case = Scenario::Case::Fourier;
    scn.n = 50;
    scn.m = 5;
    scn.sigma_e = 0.0;
    scn.sigma_eps = 0.5;
    scn.seed = 7;
    Rng rng = Rng::substream(scn.seed, 0);
    const GeneratedData g = generate(scn, rng);
    const BasisSystem basis = scenario_basis(scn.slope_case);
    Penalties pen;
    pen.G_beta = penalty_matrix(basis, RoughnessOperator::derivative(2));
    pen.G_b = pen.G_beta;
    const DesignBlocks db = build_design(g.data, basis, basis);
    FitResult fit = run_em(db, pen, Lambdas{1.0, 1.0});

    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(51, 0.0, 1.0);
    const CovSurface est = gamma_surface(penalized_Db(db, pen, fit), basis, grid);

    // generating slope covariance: 0.04 + 0.16 sin(2pi s)sin(2pi t)
    //                                   + 0.04 cos(2pi s)cos(2pi t)
    Eigen::VectorXd truth_diag(grid.size());
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        const double s = std::sin(2.0 * M_PI * grid[i]);
        const double c = std::cos(2.0 * M_PI * grid[i]);
        truth_diag[i] = 0.04 + 0.16 * s * s + 0.04 * c * c;
    }
    // order-of-magnitude agreement at the grid median of the diagonal
    std::vector<double> ratios;
    for (Eigen::Index i = 0; i < grid.size(); ++i)
        ratios.push_back(est.values(i, i) / truth_diag[i]);
    std::sort(ratios.begin(), ratios.end());
    const double med = ratios[ratios.size() / 2];
    CHECK(med > 0.3);
    CHECK(med < 3.0);
}
