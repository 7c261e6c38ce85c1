#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "flmm/design.hpp"
#include "flmm/em.hpp"
#include "flmm/fpca.hpp"
#include "flmm/inference.hpp"
#include "flmm/rng.hpp"
#include "flmm/selection.hpp"

namespace flmm {

/// One Monte Carlo scenario of the factorial design.
struct Scenario {
    enum class Case { Poly, Fourier };
    Case slope_case = Case::Poly;
    int n = 50;             // subjects
    int m = 5;              // visits per subject
    double sigma_e = 0.0;   // covariate measurement-error SD
    double sigma_eps = 0.5; // response noise SD
    int n_grid = 101;       // observation points per curve
    int oracle_grid = 2001; // dense grid for exact response integrals
    std::uint64_t seed = 1;
};

inline double true_slope(Scenario::Case c, double e0, double e1, double e2, double t) {
    return c == Scenario::Case::Poly ? e0 + e1 * t * t + e2 * std::exp(-3.0 * t)
                                     : e0 + e1 * std::sin(2.0 * M_PI * t) +
                                           e2 * std::cos(2.0 * M_PI * t);
}

/// Population slope: the individual slope at the mean coefficients (1,2,1).
inline double true_population_slope(Scenario::Case c, double t) {
    return true_slope(c, 1.0, 2.0, 1.0, t);
}

/// Dataset plus everything the generator knows that the estimator must
/// recover.
struct GeneratedData {
    Dataset data;                               // observed curves W and responses Y
    std::vector<FunctionalSample> true_curves;  // noise-free X on the observation grid
    Eigen::MatrixXd eta;                        // n x 3 individual slope coefficients
    Eigen::VectorXd alpha;                      // n individual intercepts
};

/// Draw one replicate: X_ij = mu_i + sqrt(2) sum_k xi_ijk psi_k, responses by
/// dense-grid quadrature of the individual slope against the true curve,
/// observations contaminated with N(0, sigma_e^2) pointwise errors.
inline GeneratedData generate(const Scenario& scn, Rng& rng) {
    if (scn.n < 1 || scn.m < 1 || scn.n_grid < 2) throw std::invalid_argument("bad scenario");
    GeneratedData g;
    g.data.domain = {0.0, 1.0};
    g.eta.resize(scn.n, 3);
    g.alpha.resize(scn.n);

    Eigen::VectorXd dense = Eigen::VectorXd::LinSpaced(scn.oracle_grid, 0.0, 1.0);
    Eigen::VectorXd obs_t = Eigen::VectorXd::LinSpaced(scn.n_grid, 0.0, 1.0);
    const Eigen::VectorXd wq = trapezoid_weights(dense);

    // psi_k evaluated once per grid: sin 2pi, cos 2pi, sin 4pi, cos 4pi.
    auto psi_at = [](const Eigen::VectorXd& t) {
        Eigen::MatrixXd P(t.size(), 4);
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            P(i, 0) = std::sin(2.0 * M_PI * t[i]);
            P(i, 1) = std::cos(2.0 * M_PI * t[i]);
            P(i, 2) = std::sin(4.0 * M_PI * t[i]);
            P(i, 3) = std::cos(4.0 * M_PI * t[i]);
        }
        return P;
    };
    const Eigen::MatrixXd psi_dense = psi_at(dense);
    const Eigen::MatrixXd psi_obs = psi_at(obs_t);
    const double sqrt2 = std::sqrt(2.0);

    g.data.subjects.resize(static_cast<std::size_t>(scn.n));
    for (int i = 0; i < scn.n; ++i) {
        Subject& subj = g.data.subjects[static_cast<std::size_t>(i)];
        subj.subject_id = "s" + std::to_string(i + 1);
        const double d0 = rng.uniform(-2.0, 2.0);
        const double d1 = rng.normal(0.0, 2.0);
        const double e0 = rng.normal(1.0, 0.2);
        const double e1 = rng.normal(2.0, 0.4);
        const double e2 = rng.normal(1.0, 0.2);
        g.eta.row(i) << e0, e1, e2;
        g.alpha[i] = rng.normal(3.0, 0.5);  // variance 0.25

        Eigen::VectorXd beta_i(dense.size());
        for (Eigen::Index k = 0; k < dense.size(); ++k)
            beta_i[k] = true_slope(scn.slope_case, e0, e1, e2, dense[k]);

        subj.visits.resize(static_cast<std::size_t>(scn.m));
        for (int j = 0; j < scn.m; ++j) {
            Eigen::Vector4d xi;
            for (int k = 0; k < 4; ++k) xi[k] = rng.normal(0.0, std::sqrt(2.0 / (1 << (k + 1))));
            const double eps = rng.normal(0.0, scn.sigma_eps);

            Eigen::VectorXd X_dense = sqrt2 * (psi_dense * xi);
            for (Eigen::Index k = 0; k < dense.size(); ++k)
                X_dense[k] += d0 + d1 * std::sin(M_PI * dense[k]);
            Eigen::VectorXd X_obs = sqrt2 * (psi_obs * xi);
            for (Eigen::Index k = 0; k < obs_t.size(); ++k)
                X_obs[k] += d0 + d1 * std::sin(M_PI * obs_t[k]);

            Visit& v = subj.visits[static_cast<std::size_t>(j)];
            v.y = g.alpha[i] + wq.dot(beta_i.cwiseProduct(X_dense)) + eps;
            v.curve.subject_id = subj.subject_id;
            v.curve.visit_id = "v" + std::to_string(j + 1);
            v.curve.t = obs_t;
            v.curve.x = X_obs;
            if (scn.sigma_e > 0.0)
                for (Eigen::Index k = 0; k < v.curve.x.size(); ++k)
                    v.curve.x[k] += rng.normal(0.0, scn.sigma_e);

            FunctionalSample truth;
            truth.subject_id = subj.subject_id;
            truth.visit_id = v.curve.visit_id;
            truth.t = obs_t;
            truth.x = X_obs;
            g.true_curves.push_back(std::move(truth));
        }
    }
    return g;
}

/// Relative mean integrated squared error of one curve against truth on a
/// common grid, by trapezoid.
inline double rmise_population(const Eigen::VectorXd& grid, const Eigen::VectorXd& beta_hat,
                               const Eigen::VectorXd& beta_true) {
    if (grid.size() != beta_hat.size() || grid.size() != beta_true.size())
        throw std::invalid_argument("rmise grids must align");
    const Eigen::VectorXd w = trapezoid_weights(grid);
    const double denom = w.dot(beta_true.cwiseProduct(beta_true));
    if (!(denom > 0.0)) throw std::invalid_argument("true slope has zero energy");
    return w.dot((beta_hat - beta_true).cwiseAbs2()) / denom;
}

/// Ratio of summed individual ISEs over summed individual slope energies.
inline double rmise_individual(const Eigen::VectorXd& grid,
                               const std::vector<Eigen::VectorXd>& beta_hat_i,
                               const std::vector<Eigen::VectorXd>& beta_true_i) {
    if (beta_hat_i.size() != beta_true_i.size() || beta_hat_i.empty())
        throw std::invalid_argument("subject lists must align");
    const Eigen::VectorXd w = trapezoid_weights(grid);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < beta_hat_i.size(); ++i) {
        num += w.dot((beta_hat_i[i] - beta_true_i[i]).cwiseAbs2());
        den += w.dot(beta_true_i[i].cwiseAbs2());
    }
    if (!(den > 0.0)) throw std::invalid_argument("true slopes have zero energy");
    return num / den;
}

/// How each replicate is fitted inside a study.
struct StudyFitConfig {
    bool use_gcv = false;
    Lambdas lambdas{1.0, 1.0};  // used when use_gcv is false
    GcvGrid gcv_grid = GcvGrid::default_grid();
    EmOptions em{};
    bool denoise = true;        // FPCA reconstruction when sigma_e > 0
    FpcaOptions fpca{};
    double pve_threshold = 0.95;
    bool inference = false;     // record CI / band coverage per replicate
    double level = 0.95;
    int threads = 1;
};

struct ReplicateOutcome {
    bool ok = false;
    std::string error;
    double alpha0_hat = 0.0;
    double rmise_beta = 0.0;
    double rmise_beta_i = 0.0;
    Eigen::VectorXd beta_on_grid;
    bool converged = false;
    bool ci_covers = false;
    std::array<bool, 3> band_covers{false, false, false};
    Lambdas lambdas_used;
};

/// Aggregates matching the report tables plus pointwise summary curves.
struct StudyReport {
    Scenario scenario;
    int replicates = 0;
    int failures = 0;
    std::string rng_algorithm;
    double intercept_bias = 0.0, intercept_std = 0.0, intercept_rmse = 0.0;
    double rmise_beta_mean = 0.0, rmise_beta_median = 0.0;
    double rmise_beta_i_mean = 0.0, rmise_beta_i_median = 0.0;
    double ci_coverage = 0.0;                 // when inference enabled
    std::array<double, 3> band_coverage{0.0, 0.0, 0.0};
    Eigen::VectorXd curve_grid;
    Eigen::VectorXd pointwise_mean, pointwise_bias, pointwise_std, pointwise_rmse;
    std::vector<ReplicateOutcome> outcomes;   // replicate-ordered
};

namespace detail {

inline double kahan_mean(const std::vector<double>& xs) {
    double sum = 0.0, comp = 0.0;
    for (double x : xs) {
        const double y = x - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    return xs.empty() ? 0.0 : sum / static_cast<double>(xs.size());
}

inline double median(std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace detail

/// Default basis for each simulation case.
inline BasisSystem scenario_basis(Scenario::Case c) {
    return c == Scenario::Case::Poly ? make_bspline_basis({0.0, 1.0}, 4, 31)
                                     : make_fourier_basis({0.0, 1.0}, 35, 1.0);
}

/// Fit one generated replicate and score it against the generator's truth.
inline ReplicateOutcome fit_replicate(const Scenario& scn, const GeneratedData& g,
                                      const StudyFitConfig& cfg, const BasisSystem& basis,
                                      const Penalties& pen, const Eigen::VectorXd& metric_grid,
                                      const Eigen::VectorXd& curve_grid) {
    ReplicateOutcome out;
    try {
        Dataset fit_data = g.data;
        if (scn.sigma_e > 0.0 && cfg.denoise) {
            std::vector<FunctionalSample> curves;
            for (const auto& s : g.data.subjects)
                for (const auto& v : s.visits) curves.push_back(v.curve);
            FpcaModel model = fit_fpca(curves, g.data.domain, cfg.fpca);
            const int M = choose_num_fpcs_pve(model, cfg.pve_threshold);
            std::size_t at = 0;
            for (auto& s : fit_data.subjects)
                for (auto& v : s.visits) v.curve = reconstruct(curves[at++], model, M);
        }

        DesignBlocks db = build_design(fit_data, basis, basis);
        FitResult fit;
        if (cfg.use_gcv) {
            GcvSurface surf = gcv_search(db, pen, cfg.gcv_grid, cfg.em);
            fit = fit_at_best(db, pen, surf, cfg.em);
        } else {
            fit = run_em(db, pen, cfg.lambdas, cfg.em);
            finalize_fit(db, pen, fit);
        }
        out.lambdas_used = fit.lambdas;
        out.converged = fit.convergence.converged;
        out.alpha0_hat = fit.theta[0];

        const Eigen::MatrixXd Phi = basis.eval(metric_grid, 0);
        const Eigen::VectorXd beta_hat = Phi * fit.theta.tail(basis.size());
        Eigen::VectorXd beta_true(metric_grid.size());
        for (Eigen::Index k = 0; k < metric_grid.size(); ++k)
            beta_true[k] = true_population_slope(scn.slope_case, metric_grid[k]);
        out.rmise_beta = rmise_population(metric_grid, beta_hat, beta_true);

        std::vector<Eigen::VectorXd> hat_i, true_i;
        hat_i.reserve(static_cast<std::size_t>(scn.n));
        true_i.reserve(static_cast<std::size_t>(scn.n));
        for (int i = 0; i < scn.n; ++i) {
            hat_i.push_back(beta_hat + Phi * fit.xi[static_cast<std::size_t>(i)].tail(basis.size()));
            Eigen::VectorXd bt(metric_grid.size());
            for (Eigen::Index k = 0; k < metric_grid.size(); ++k)
                bt[k] = true_slope(scn.slope_case, g.eta(i, 0), g.eta(i, 1), g.eta(i, 2),
                                   metric_grid[k]);
            true_i.push_back(std::move(bt));
        }
        out.rmise_beta_i = rmise_individual(metric_grid, hat_i, true_i);

        out.beta_on_grid = basis.eval(curve_grid, 0) * fit.theta.tail(basis.size());

        if (cfg.inference) {
            const Eigen::MatrixXd cov = cov_theta(db, pen, fit);
            const IntervalEstimate ci = intercept_ci(fit, cov, cfg.level);
            out.ci_covers = ci.lower <= 3.0 && 3.0 <= ci.upper;
            Eigen::VectorXd pts(3);
            pts << 0.25, 0.5, 0.75;
            const PointwiseBand band = beta_band(fit, basis, cov, pts, cfg.level);
            for (int k = 0; k < 3; ++k) {
                const double truth = true_population_slope(scn.slope_case, pts[k]);
                out.band_covers[static_cast<std::size_t>(k)] =
                    band.lower[k] <= truth && truth <= band.upper[k];
            }
        }
        out.ok = true;
    } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
    }
    return out;
}

/// Replicated study: generate -> (optional FPCA) -> fit -> metrics, with
/// per-replicate RNG substreams so results are independent of thread count.
inline StudyReport run_study(const Scenario& scn, int replicates, const StudyFitConfig& cfg) {
    if (replicates < 1) throw std::invalid_argument("need >= 1 replicate");
    StudyReport rep;
    rep.scenario = scn;
    rep.replicates = replicates;
    rep.rng_algorithm = Rng::algorithm();
    rep.curve_grid = Eigen::VectorXd::LinSpaced(101, 0.0, 1.0);
    const Eigen::VectorXd metric_grid = Eigen::VectorXd::LinSpaced(2001, 0.0, 1.0);

    const BasisSystem basis = scenario_basis(scn.slope_case);
    Penalties pen;
    pen.G_beta = penalty_matrix(basis, RoughnessOperator::derivative(2));
    pen.G_b = pen.G_beta;

    rep.outcomes.assign(static_cast<std::size_t>(replicates), ReplicateOutcome{});
    auto work = [&](int r) {
        Rng rng = Rng::substream(scn.seed, static_cast<std::uint64_t>(r));
        const GeneratedData g = generate(scn, rng);
        rep.outcomes[static_cast<std::size_t>(r)] =
            fit_replicate(scn, g, cfg, basis, pen, metric_grid, rep.curve_grid);
    };

    if (cfg.threads <= 1) {
        for (int r = 0; r < replicates; ++r) work(r);
    } else {
        std::vector<std::thread> pool;
        const int nw = std::min(cfg.threads, replicates);
        for (int w = 0; w < nw; ++w)
            pool.emplace_back([&, w] {
                for (int r = w; r < replicates; r += nw) work(r);
            });
        for (auto& th : pool) th.join();
    }

    // Deterministic, replicate-ordered aggregation.
    std::vector<double> a0, rb, rbi;
    int n_ci = 0;
    std::array<int, 3> n_band{0, 0, 0};
    Eigen::MatrixXd betas(rep.curve_grid.size(), 0);
    for (const auto& o : rep.outcomes) {
        if (!o.ok) {
            ++rep.failures;
            continue;
        }
        a0.push_back(o.alpha0_hat);
        rb.push_back(o.rmise_beta);
        rbi.push_back(o.rmise_beta_i);
        betas.conservativeResize(Eigen::NoChange, betas.cols() + 1);
        betas.col(betas.cols() - 1) = o.beta_on_grid;
        if (cfg.inference) {
            n_ci += o.ci_covers ? 1 : 0;
            for (int k = 0; k < 3; ++k)
                n_band[static_cast<std::size_t>(k)] += o.band_covers[static_cast<std::size_t>(k)] ? 1 : 0;
        }
    }
    const int ok = static_cast<int>(a0.size());
    if (ok == 0) throw std::runtime_error("every replicate failed");

    const double mean_a0 = detail::kahan_mean(a0);
    rep.intercept_bias = mean_a0 - 3.0;
    double var = 0.0;
    for (double v : a0) var += (v - mean_a0) * (v - mean_a0);
    rep.intercept_std = ok > 1 ? std::sqrt(var / (ok - 1)) : 0.0;
    rep.intercept_rmse =
        std::sqrt(rep.intercept_bias * rep.intercept_bias + rep.intercept_std * rep.intercept_std);
    rep.rmise_beta_mean = detail::kahan_mean(rb);
    rep.rmise_beta_median = detail::median(rb);
    rep.rmise_beta_i_mean = detail::kahan_mean(rbi);
    rep.rmise_beta_i_median = detail::median(rbi);
    if (cfg.inference) {
        rep.ci_coverage = static_cast<double>(n_ci) / ok;
        for (int k = 0; k < 3; ++k)
            rep.band_coverage[static_cast<std::size_t>(k)] =
                static_cast<double>(n_band[static_cast<std::size_t>(k)]) / ok;
    }

    Eigen::VectorXd truth(rep.curve_grid.size());
    for (Eigen::Index k = 0; k < rep.curve_grid.size(); ++k)
        truth[k] = true_population_slope(scn.slope_case, rep.curve_grid[k]);
    rep.pointwise_mean = betas.rowwise().mean();
    rep.pointwise_bias = rep.pointwise_mean - truth;
    rep.pointwise_std.resize(rep.curve_grid.size());
    rep.pointwise_rmse.resize(rep.curve_grid.size());
    for (Eigen::Index k = 0; k < rep.curve_grid.size(); ++k) {
        double v = 0.0;
        for (Eigen::Index c = 0; c < betas.cols(); ++c) {
            const double d = betas(k, c) - rep.pointwise_mean[k];
            v += d * d;
        }
        rep.pointwise_std[k] = betas.cols() > 1 ? std::sqrt(v / (betas.cols() - 1)) : 0.0;
        rep.pointwise_rmse[k] = std::sqrt(rep.pointwise_bias[k] * rep.pointwise_bias[k] +
                                          rep.pointwise_std[k] * rep.pointwise_std[k]);
    }
    return rep;
}

}  // namespace flmm
