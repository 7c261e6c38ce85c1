#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>
#include <vector>

#include "flmm/em.hpp"

namespace flmm {

/// Effective degrees of freedom: trace of the linear smoother mapping Y to
/// Yhat, accumulated subject by subject from the own-column block
/// Q_ii = S_ii + Z_i D_xi_tilde Z_i' V_i^{-1} (I - S_ii). Never forms an
/// N x N matrix.
inline double effective_df(const DesignBlocks& db, const PenalizedSystem& sys) {
    double df = 0.0;
    for (int i = 0; i < db.n_subjects(); ++i) {
        const Eigen::Index m = db.Y[i].size();
        const Eigen::MatrixXd Vinv = sys.V_llt(i).solve(Eigen::MatrixXd::Identity(m, m));
        const Eigen::MatrixXd S = db.W[i] * sys.A_ldlt().solve(sys.ViW(i).transpose());
        const Eigen::MatrixXd P = db.Z[i] * sys.Dxi_tilde() * db.Z[i].transpose();
        df += S.trace() + (P * Vinv * (Eigen::MatrixXd::Identity(m, m) - S)).trace();
    }
    return df;
}

inline double effective_df(const DesignBlocks& db, const Penalties& pen,
                           const VarianceComponents& vc, const Lambdas& lam) {
    return effective_df(db, PenalizedSystem(db, pen, vc, lam));
}

/// GCV = SSE / (N - df)^2; +inf when df exhausts the sample size.
inline double gcv_score(double sse, int N, double df) {
    if (!(df < static_cast<double>(N))) return std::numeric_limits<double>::infinity();
    const double denom = static_cast<double>(N) - df;
    return sse / (denom * denom);
}

/// Fill df and gcv on a converged fit using the same factorizations as
/// estimation.
inline void finalize_fit(const DesignBlocks& db, const Penalties& pen, FitResult& fit) {
    PenalizedSystem sys(db, pen, fit.vc, fit.lambdas);
    fit.df = effective_df(db, sys);
    fit.gcv = gcv_score(fit.sse, db.n_total(), fit.df);
}

struct GcvPoint {
    Lambdas lambdas;
    double gcv = std::numeric_limits<double>::infinity();
    double df = std::numeric_limits<double>::quiet_NaN();
    bool converged = false;
};

struct GcvSurface {
    std::vector<GcvPoint> points;  // lambda_beta-major, lambda_b-minor
    int best = -1;                 // argmin of finite scores
};

struct GcvGrid {
    std::vector<double> lambda_beta;
    std::vector<double> lambda_b;

    /// Default search grid: log10-spaced 9 x 7.
    static GcvGrid default_grid() {
        GcvGrid g;
        for (int e = -2; e <= 6; ++e) g.lambda_beta.push_back(std::pow(10.0, e));
        for (int e = -2; e <= 4; ++e) g.lambda_b.push_back(std::pow(10.0, e));
        return g;
    }
};

/// Full EM run per grid point; variance components warm-started along each
/// lambda_beta row. Ties in the argmin break toward the larger
/// (lambda_beta, lambda_b) pair, lexicographically.
inline GcvSurface gcv_search(const DesignBlocks& db, const Penalties& pen,
                             const GcvGrid& grid, const EmOptions& opt = EmOptions{},
                             int threads = 1, bool warm_start = true) {
    if (grid.lambda_beta.empty() || grid.lambda_b.empty())
        throw std::invalid_argument("empty GCV grid");
    const int nb = static_cast<int>(grid.lambda_beta.size());
    const int nl = static_cast<int>(grid.lambda_b.size());
    GcvSurface surf;
    surf.points.assign(static_cast<std::size_t>(nb) * nl, GcvPoint{});

    auto scan_row = [&](int ib) {
        const VarianceComponents* init = nullptr;
        VarianceComponents warm;
        for (int il = 0; il < nl; ++il) {
            GcvPoint& pt = surf.points[static_cast<std::size_t>(ib) * nl + il];
            pt.lambdas = {grid.lambda_beta[ib], grid.lambda_b[il]};
            try {
                FitResult fit = run_em(db, pen, pt.lambdas, opt, init);
                finalize_fit(db, pen, fit);
                pt.gcv = fit.gcv;
                pt.df = fit.df;
                pt.converged = fit.convergence.converged;
                if (warm_start) {
                    warm = fit.vc;
                    init = &warm;
                }
            } catch (const std::exception&) {
                // unusable grid point; stays +inf and excluded from argmin
                init = nullptr;
            }
        }
    };

    if (threads <= 1 || nb == 1) {
        for (int ib = 0; ib < nb; ++ib) scan_row(ib);
    } else {
        std::vector<std::thread> pool;
        const int nw = std::min(threads, nb);
        std::vector<int> assignment(nb);
        for (int ib = 0; ib < nb; ++ib) assignment[ib] = ib % nw;
        for (int w = 0; w < nw; ++w)
            pool.emplace_back([&, w] {
                for (int ib = 0; ib < nb; ++ib)
                    if (assignment[ib] == w) scan_row(ib);
            });
        for (auto& th : pool) th.join();
    }

    for (std::size_t k = 0; k < surf.points.size(); ++k) {
        if (!std::isfinite(surf.points[k].gcv)) continue;
        if (surf.best < 0) {
            surf.best = static_cast<int>(k);
            continue;
        }
        const GcvPoint& cur = surf.points[k];
        const GcvPoint& best = surf.points[static_cast<std::size_t>(surf.best)];
        if (cur.gcv < best.gcv ||
            (cur.gcv == best.gcv &&
             (cur.lambdas.beta > best.lambdas.beta ||
              (cur.lambdas.beta == best.lambdas.beta && cur.lambdas.b > best.lambdas.b))))
            surf.best = static_cast<int>(k);
    }
    if (surf.best < 0) throw std::runtime_error("no finite GCV score on the grid");
    return surf;
}

/// Convenience: scan then refit (cold start) at the best grid point.
inline FitResult fit_at_best(const DesignBlocks& db, const Penalties& pen,
                             const GcvSurface& surf, const EmOptions& opt = EmOptions{}) {
    FitResult fit = run_em(db, pen, surf.points[static_cast<std::size_t>(surf.best)].lambdas, opt);
    finalize_fit(db, pen, fit);
    return fit;
}

}  // namespace flmm
