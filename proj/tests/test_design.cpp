#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flmm/design.hpp"
#include "flmm/rng.hpp"

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

}  // namespace

TEST_CASE("inner product of the zero curve is zero") {
    auto b = make_bspline_basis({0.0, 1.0}, 4, 6);
    auto s = curve_on_grid(51, [](double) { return 0.0; });
    CHECK(inner_product(b, s).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("inner product of the unit curve sums to the domain length") {
    auto b = make_bspline_basis({0.0, 1.0}, 4, 6);
    auto s = curve_on_grid(401, [](double) { return 1.0; });
    // partition of unity: sum_j int phi_j X dt = int 1 dt = 1
    CHECK(inner_product(b, s).sum() == Catch::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("inner product against Fourier basis matches orthogonality integrals") {
    auto b = make_fourier_basis({0.0, 1.0}, 7, 1.0);
    auto s = curve_on_grid(500, [](double t) { return std::sin(2.0 * M_PI * t); });
    const Eigen::VectorXd v = inner_product(b, s);
    // sin(2 pi t) = (1/sqrt(2)) * phi_1, so <phi_1, X> = 1/sqrt(2); others 0.
    for (int j = 0; j < b.size(); ++j) {
        const double expected = j == 1 ? 1.0 / std::sqrt(2.0) : 0.0;
        CHECK(v[j] == Catch::Approx(expected).margin(1e-4));
    }
}

TEST_CASE("inner product is linear in the curve") {
    auto b = make_bspline_basis({0.0, 1.0}, 4, 6);
    auto s1 = curve_on_grid(101, [](double t) { return std::sin(3.0 * t); });
    auto s2 = curve_on_grid(101, [](double t) { return t * t - 0.3; });
    const double a = 2.75;
    FunctionalSample comb = s1;
    comb.x = a * s1.x + s2.x;
    const Eigen::VectorXd lhs = inner_product(b, comb);
    const Eigen::VectorXd rhs = a * inner_product(b, s1) + inner_product(b, s2);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + rhs.cwiseAbs().maxCoeff()));
}

TEST_CASE("trapezoid error shrinks like h^2 under grid doubling") {
    auto b = make_bspline_basis({0.0, 1.0}, 4, 4);
    auto f = [](double t) { return std::exp(t) * std::sin(2.0 * t); };
    const Eigen::VectorXd fine = inner_product(b, curve_on_grid(8193, f));
    const Eigen::VectorXd c1 = inner_product(b, curve_on_grid(65, f));
    const Eigen::VectorXd c2 = inner_product(b, curve_on_grid(129, f));
    const double e1 = (c1 - fine).norm();
    const double e2 = (c2 - fine).norm();
    CHECK(e1 / e2 > 3.5);
    CHECK(e1 / e2 < 4.5);
}

TEST_CASE("build_design shapes and leading ones") {
    auto bb = make_bspline_basis({0.0, 1.0}, 4, 31);  // 35 functions

    SECTION("single subject, single visit") {
        Dataset d;
        d.domain = {0.0, 1.0};
        Subject s;
        s.subject_id = "s1";
        Visit v;
        v.y = 1.2;
        v.curve = curve_on_grid(21, [](double t) { return t; });
        s.visits.push_back(v);
        d.subjects.push_back(s);
        const DesignBlocks db = build_design(d, bb, bb);
        REQUIRE(db.W.size() == 1);
        CHECK(db.W[0].rows() == 1);
        CHECK(db.W[0].cols() == 36);
        CHECK(db.W[0](0, 0) == 1.0);
        CHECK(db.Z[0](0, 0) == 1.0);
    }

    SECTION("simulation-scale blocks") {
        Rng rng(7);
        Dataset d;
        d.domain = {0.0, 1.0};
        for (int i = 0; i < 50; ++i) {
            Subject s;
            s.subject_id = "s" + std::to_string(i);
            for (int j = 0; j < 5; ++j) {
                Visit v;
                const double a = rng.normal(), bcoef = rng.normal();
                v.y = rng.normal();
                v.curve = curve_on_grid(
                    41, [&](double t) { return a + bcoef * std::sin(2.0 * M_PI * t); },
                    s.subject_id, "v" + std::to_string(j));
                s.visits.push_back(v);
            }
            d.subjects.push_back(s);
        }
        const DesignBlocks db = build_design(d, bb, bb);
        CHECK(db.n_total() == 250);
        CHECK(db.stacked_W().rows() == 250);
        CHECK(db.stacked_W().cols() == 36);
        for (int i = 0; i < 50; ++i) {
            CHECK(db.Z[static_cast<std::size_t>(i)].rows() == 5);
            CHECK(db.Z[static_cast<std::size_t>(i)].cols() == 36);
            CHECK((db.W[static_cast<std::size_t>(i)].col(0).array() == 1.0).all());
            CHECK((db.Z[static_cast<std::size_t>(i)].col(0).array() == 1.0).all());
        }
    }

    SECTION("duplicated visits produce identical design rows") {
        Dataset d;
        d.domain = {0.0, 1.0};
        Subject s;
        s.subject_id = "s1";
        Visit v;
        v.y = 0.4;
        v.curve = curve_on_grid(31, [](double t) { return std::cos(t); });
        s.visits.push_back(v);
        s.visits.push_back(v);
        d.subjects.push_back(s);
        const DesignBlocks db = build_design(d, bb, bb);
        CHECK((db.W[0].row(0) - db.W[0].row(1)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("validation failures") {
    auto b = make_bspline_basis({0.0, 1.0}, 4, 4);
    FunctionalSample s = curve_on_grid(11, [](double t) { return t; });
    s.t[5] = s.t[4];  // non-monotone
    CHECK_THROWS_AS(inner_product(b, s), std::invalid_argument);

    FunctionalSample outside = curve_on_grid(11, [](double t) { return t; });
    outside.t[10] = 1.8;
    CHECK_THROWS_AS(inner_product(b, outside), std::invalid_argument);

    FunctionalSample tiny;
    tiny.t.resize(1);
    tiny.x.resize(1);
    tiny.t[0] = 0.5;
    tiny.x[0] = 1.0;
    CHECK_THROWS_AS(inner_product(b, tiny), std::invalid_argument);
}

TEST_CASE("gauss quadrature option approximates smooth integrals") {
    auto b = make_bspline_basis({0.0, 1.0}, 4, 4);
    auto s = curve_on_grid(2001, [](double t) { return std::sin(2.0 * t); });
    const Eigen::VectorXd tr = inner_product(b, s, QuadratureRule::trapezoid());
    const Eigen::VectorXd ga = inner_product(b, s, QuadratureRule::gauss(70));
    CHECK((tr - ga).cwiseAbs().maxCoeff() <= 1e-6);
}
