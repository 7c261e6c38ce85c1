#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "flmm/em.hpp"

namespace flmm {

/// Standard-normal quantile (Acklam's rational approximation, |err| < 1e-9).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile needs p in (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1.0 - plow;
    double q, r;
    if (p < plow) {
        q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > phigh) {
        q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    q = p - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

/// Two-sided z multiplier for a confidence level; 1.96 at 0.95 (matching
/// the closed-form interval expressions).
inline double z_multiplier(double level) {
    if (std::abs(level - 0.95) < 1e-12) return 1.96;
    return normal_quantile(0.5 + 0.5 * level);
}

/// Covariance of the fixed-effect estimate. Default is the simplified form
/// (sum W_i' V_i^{-1} W_i + lambda_beta * Gtilde)^{-1}; the sandwich variant
/// replaces Cov(Y_i) with V_i inside the usual three-factor expression.
inline Eigen::MatrixXd cov_theta(const DesignBlocks& db, const Penalties& pen,
                                 const FitResult& fit, bool sandwich = false) {
    PenalizedSystem sys(db, pen, fit.vc, fit.lambdas);
    const Eigen::Index q = sys.A().rows();
    const Eigen::MatrixXd Ainv = sys.A_ldlt().solve(Eigen::MatrixXd::Identity(q, q));
    Eigen::MatrixXd cov;
    if (!sandwich) {
        cov = Ainv;
    } else {
        Eigen::MatrixXd mid = Eigen::MatrixXd::Zero(q, q);
        for (int i = 0; i < db.n_subjects(); ++i)
            mid += db.W[i].transpose() * sys.ViW(i);  // W' V^{-1} V V^{-1} W = W' V^{-1} W
        cov = Ainv * mid * Ainv;
    }
    return (0.5 * (cov + cov.transpose())).eval();
}

struct IntervalEstimate {
    double lower = 0.0;
    double upper = 0.0;
};

/// CI for the population intercept: alpha0_hat +/- z * sqrt(cov_theta(0,0)).
inline IntervalEstimate intercept_ci(const FitResult& fit, const Eigen::MatrixXd& cov,
                                     double level = 0.95) {
    const double sd = std::sqrt(std::max(cov(0, 0), 0.0));
    const double z = z_multiplier(level);
    return {fit.theta[0] - z * sd, fit.theta[0] + z * sd};
}

struct PointwiseBand {
    Eigen::VectorXd grid;
    Eigen::VectorXd center;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
    double level = 0.95;
};

/// Pointwise band for beta(t): half-width z * sqrt(phi'(t) Sigma22 phi(t)).
inline PointwiseBand beta_band(const FitResult& fit, const BasisSystem& beta_basis,
                               const Eigen::MatrixXd& cov, const Eigen::VectorXd& grid,
                               double level = 0.95) {
    const int J = beta_basis.size();
    const Eigen::MatrixXd Sigma22 = cov.bottomRightCorner(J, J);
    const Eigen::MatrixXd Phi = beta_basis.eval(grid, 0);
    PointwiseBand band;
    band.grid = grid;
    band.level = level;
    band.center = Phi * fit.theta.tail(J);
    band.lower.resize(grid.size());
    band.upper.resize(grid.size());
    const double z = z_multiplier(level);
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        const double var =
            std::max((Phi.row(i) * Sigma22 * Phi.row(i).transpose()).value(), 0.0);
        const double half = z * std::sqrt(var);
        band.lower[i] = band.center[i] - half;
        band.upper[i] = band.center[i] + half;
    }
    return band;
}

struct CovSurface {
    Eigen::VectorXd grid;
    Eigen::MatrixXd values;  // gamma_hat(s_a, t_b)
};

/// Penalized random-slope coefficient covariance: the lower K x K block of
/// (D_xi_hat^{-1} + lambda_b * G_xi)^{-1}.
inline Eigen::MatrixXd penalized_Db(const DesignBlocks& db, const Penalties& pen,
                                    const FitResult& fit) {
    PenalizedSystem sys(db, pen, fit.vc, fit.lambdas);
    const int K = static_cast<int>(pen.G_b.rows());
    return sys.Dxi_tilde().bottomRightCorner(K, K);
}

/// gamma_hat(s,t) = psi'(s) Db_hat psi(t) on a common grid.
inline CovSurface gamma_surface(const Eigen::MatrixXd& Db, const BasisSystem& b_basis,
                                const Eigen::VectorXd& grid) {
    const Eigen::MatrixXd Psi = b_basis.eval(grid, 0);
    CovSurface out;
    out.grid = grid;
    Eigen::MatrixXd V = Psi * Db * Psi.transpose();
    out.values = 0.5 * (V + V.transpose());
    return out;
}

}  // namespace flmm
