#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "flmm/basis.hpp"
#include "flmm/design.hpp"

namespace flmm {

/// Variance parameters of the mixed model: random-intercept variance,
/// noise variance, and the random-slope coefficient covariance D (K x K).
struct VarianceComponents {
    double sigma2_a = 1.0;
    double sigma2_eps = 1.0;
    Eigen::MatrixXd D;

    static VarianceComponents identity(int K) {
        VarianceComponents vc;
        vc.D = Eigen::MatrixXd::Identity(K, K);
        return vc;
    }

    void validate() const {
        if (!(sigma2_a >= 0.0)) throw std::invalid_argument("sigma2_a must be >= 0");
        if (!(sigma2_eps > 0.0)) throw std::invalid_argument("sigma2_eps must be > 0");
        if (D.rows() != D.cols()) throw std::invalid_argument("D must be square");
        if ((D - D.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + D.cwiseAbs().maxCoeff()))
            throw std::invalid_argument("D must be symmetric");
    }
};

/// Smoothing parameters for the population and subject-level slopes.
struct Lambdas {
    double beta = 0.0;
    double b = 0.0;
};

/// Roughness penalty matrices for the two bases.
struct Penalties {
    Eigen::MatrixXd G_beta;  // J x J
    Eigen::MatrixXd G_b;     // K x K
};

struct EmOptions {
    int max_iter = 500;
    double tol = 1e-6;
    double sigma2_eps_floor = 1e-12;
    double d_eig_floor_rel = 1e-10;  // times trace(D)
};

struct Convergence {
    int iterations = 0;
    double final_delta = std::numeric_limits<double>::infinity();
    bool converged = false;
};

/// Converged fit: coefficients, per-subject effects, variance components,
/// diagnostics. df/gcv/cov_theta are filled by the selection and inference
/// layers sharing the same factorizations.
struct FitResult {
    Eigen::VectorXd theta;               // (alpha0, c)
    std::vector<Eigen::VectorXd> xi;     // (a_i, b_i) per subject
    VarianceComponents vc;
    Lambdas lambdas;
    double df = std::numeric_limits<double>::quiet_NaN();
    double gcv = std::numeric_limits<double>::quiet_NaN();
    double sse = std::numeric_limits<double>::quiet_NaN();
    Eigen::MatrixXd cov_theta;
    Convergence convergence;
    std::vector<double> objective_trace;  // penalized profile objective per iteration
};

namespace detail {

/// Symmetrize and clip eigenvalues from below.
inline Eigen::MatrixXd psd_floor(const Eigen::MatrixXd& M, double floor) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Shared factorizations for one (vc, lambda) configuration: the penalized
/// random-effect covariance, per-subject marginal covariances, and the
/// fixed-effect normal matrix. Everything downstream (effect estimates,
/// EM updates, df, GCV, cov_theta) reads from here so traces and solves are
/// consistent by construction.
class PenalizedSystem {
public:
    PenalizedSystem(const DesignBlocks& db, const Penalties& pen,
                    const VarianceComponents& vc, const Lambdas& lam,
                    const EmOptions& opt = EmOptions{}) {
        const int n = db.n_subjects();
        const int p = static_cast<int>(db.Z[0].cols());  // 1+K
        const int q = static_cast<int>(db.W[0].cols());  // 1+J
        const int K = p - 1;

        sigma2_eps_ = std::max(vc.sigma2_eps, opt.sigma2_eps_floor);

        // D_xi = diag(sigma2_a, D), with D floored to stay invertible.
        const double trD = vc.D.trace();
        const double floorD = std::max(opt.d_eig_floor_rel * std::abs(trD), 1e-14);
        Eigen::MatrixXd Dflr = detail::psd_floor(vc.D, floorD);
        D_xi_ = Eigen::MatrixXd::Zero(p, p);
        D_xi_(0, 0) = std::max(vc.sigma2_a, 1e-14);
        D_xi_.bottomRightCorner(K, K) = Dflr;

        // D_xi_tilde = (D_xi^{-1} + lambda_b * diag(0, G_b))^{-1}
        Eigen::MatrixXd Dxi_inv = Eigen::MatrixXd::Zero(p, p);
        Dxi_inv(0, 0) = 1.0 / D_xi_(0, 0);
        Dxi_inv.bottomRightCorner(K, K) =
            Eigen::LDLT<Eigen::MatrixXd>(Dflr).solve(Eigen::MatrixXd::Identity(K, K));
        Eigen::MatrixXd M = Dxi_inv;
        M.bottomRightCorner(K, K) += lam.b * pen.G_b;
        Dxi_tilde_ = Eigen::LDLT<Eigen::MatrixXd>(0.5 * (M + M.transpose()))
                         .solve(Eigen::MatrixXd::Identity(p, p));
        Dxi_tilde_ = (0.5 * (Dxi_tilde_ + Dxi_tilde_.transpose())).eval();

        Gtilde_ = Eigen::MatrixXd::Zero(q, q);
        Gtilde_.bottomRightCorner(q - 1, q - 1) = pen.G_beta;

        V_llt_.resize(n);
        ViW_.resize(n);
        ViY_.resize(n);
        A_ = lam.beta * Gtilde_;
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(q);
        for (int i = 0; i < n; ++i) {
            Eigen::MatrixXd Vi = db.Z[i] * Dxi_tilde_ * db.Z[i].transpose();
            Vi.diagonal().array() += sigma2_eps_;
            V_llt_[i].compute(Vi);
            if (V_llt_[i].info() != Eigen::Success)
                throw std::runtime_error("marginal covariance not positive definite (subject " +
                                         std::to_string(i) + ")");
            ViW_[i] = V_llt_[i].solve(db.W[i]);
            ViY_[i] = V_llt_[i].solve(db.Y[i]);
            A_ += db.W[i].transpose() * ViW_[i];
            rhs += db.W[i].transpose() * ViY_[i];
        }
        A_ = (0.5 * (A_ + A_.transpose())).eval();
        A_ldlt_.compute(A_);
        const double max_pivot = A_ldlt_.vectorD().cwiseAbs().maxCoeff();
        if (A_ldlt_.info() != Eigen::Success ||
            A_ldlt_.vectorD().minCoeff() < -1e-10 * max_pivot)
            throw std::runtime_error(
                "singular fixed-effect system; smallest pivot " +
                std::to_string(A_ldlt_.vectorD().minCoeff()) +
                " (lambda too small for a rank-deficient design?)");
        theta_ = A_ldlt_.solve(rhs);
    }

    double sigma2_eps() const { return sigma2_eps_; }
    const Eigen::MatrixXd& D_xi() const { return D_xi_; }
    const Eigen::MatrixXd& Dxi_tilde() const { return Dxi_tilde_; }
    const Eigen::MatrixXd& Gtilde() const { return Gtilde_; }
    const Eigen::MatrixXd& A() const { return A_; }
    const Eigen::LDLT<Eigen::MatrixXd>& A_ldlt() const { return A_ldlt_; }
    const Eigen::VectorXd& theta() const { return theta_; }
    const Eigen::LLT<Eigen::MatrixXd>& V_llt(int i) const { return V_llt_[i]; }
    const Eigen::MatrixXd& ViW(int i) const { return ViW_[i]; }
    const Eigen::VectorXd& ViY(int i) const { return ViY_[i]; }

    Eigen::VectorXd xi(const DesignBlocks& db, int i) const {
        return Dxi_tilde_ * db.Z[i].transpose() *
               V_llt_[i].solve(db.Y[i] - db.W[i] * theta_);
    }

    std::vector<Eigen::VectorXd> all_xi(const DesignBlocks& db) const {
        std::vector<Eigen::VectorXd> out(db.n_subjects());
        for (int i = 0; i < db.n_subjects(); ++i) out[i] = xi(db, i);
        return out;
    }

    /// Dense hat-type matrix H_i = V_i^{-1} - V_i^{-1} W_i A^{-1} W_i' V_i^{-1}.
    Eigen::MatrixXd H(const DesignBlocks& db, int i) const {
        const Eigen::Index m = db.Y[i].size();
        Eigen::MatrixXd Vinv = V_llt_[i].solve(Eigen::MatrixXd::Identity(m, m));
        return Vinv - ViW_[i] * A_ldlt_.solve(ViW_[i].transpose());
    }

private:
    double sigma2_eps_ = 1.0;
    Eigen::MatrixXd D_xi_, Dxi_tilde_, Gtilde_, A_;
    Eigen::LDLT<Eigen::MatrixXd> A_ldlt_;
    Eigen::VectorXd theta_;
    std::vector<Eigen::LLT<Eigen::MatrixXd>> V_llt_;
    std::vector<Eigen::MatrixXd> ViW_;
    std::vector<Eigen::VectorXd> ViY_;
};

struct EffectEstimates {
    Eigen::VectorXd theta;
    std::vector<Eigen::VectorXd> xi;
};

/// Penalized BLUP-type estimates for fixed variance components: the closed
/// form minimizer of the penalized least-squares objective.
inline EffectEstimates estimate_effects(const DesignBlocks& db, const Penalties& pen,
                                        const VarianceComponents& vc, const Lambdas& lam) {
    PenalizedSystem sys(db, pen, vc, lam);
    return {sys.theta(), sys.all_xi(db)};
}

/// The penalized objective the closed form minimizes; exposed for
/// diagnostics and optimality checks.
inline double penalized_objective(const DesignBlocks& db, const Penalties& pen,
                                  const VarianceComponents& vc, const Lambdas& lam,
                                  const Eigen::VectorXd& theta,
                                  const std::vector<Eigen::VectorXd>& xi) {
    const int K = static_cast<int>(pen.G_b.rows());
    const double floorD = std::max(1e-10 * std::abs(vc.D.trace()), 1e-14);
    Eigen::LDLT<Eigen::MatrixXd> D_ldlt(detail::psd_floor(vc.D, floorD));
    const double s2a = std::max(vc.sigma2_a, 1e-14);
    double H = 0.0;
    for (int i = 0; i < db.n_subjects(); ++i) {
        const Eigen::VectorXd r = db.Y[i] - db.W[i] * theta - db.Z[i] * xi[i];
        H += 0.5 / vc.sigma2_eps * r.squaredNorm();
        const Eigen::VectorXd bi = xi[i].tail(K);
        H += 0.5 * bi.dot(D_ldlt.solve(bi));
        H += 0.5 * lam.b * bi.dot(pen.G_b * bi);
        H += 0.5 / s2a * xi[i][0] * xi[i][0];
    }
    const Eigen::VectorXd c = theta.tail(theta.size() - 1);
    H += 0.5 * lam.beta * c.dot(pen.G_beta * c);
    return H;
}

struct EmIterateResult {
    VarianceComponents vc;
    Eigen::VectorXd theta;
    std::vector<Eigen::VectorXd> xi;
};

/// One REML-EM sweep: refresh the penalized system at the current variance
/// components, re-estimate effects, then update sigma2_eps and
/// D_xi = diag(sigma2_a, D) from residuals and hat-matrix traces. The raw
/// D_xi update is generally full; it is projected back onto the model's
/// block structure (sigma2_a from the corner, D symmetrized, cross block
/// zeroed).
inline EmIterateResult em_iterate(const DesignBlocks& db, const Penalties& pen,
                                  const VarianceComponents& vc, const Lambdas& lam,
                                  const EmOptions& opt = EmOptions{}) {
    const int n = db.n_subjects();
    const int N = db.n_total();
    const int p = static_cast<int>(db.Z[0].cols());
    const int K = p - 1;

    PenalizedSystem sys(db, pen, vc, lam, opt);
    EmIterateResult out;
    out.theta = sys.theta();
    out.xi.resize(n);

    double s2e_acc = 0.0;
    Eigen::MatrixXd Dxi_new = Eigen::MatrixXd::Zero(p, p);
    const Eigen::MatrixXd& Dxi = sys.D_xi();
    const double s2e_old = sys.sigma2_eps();
    for (int i = 0; i < n; ++i) {
        out.xi[i] = sys.xi(db, i);
        const Eigen::VectorXd eps = db.Y[i] - db.W[i] * out.theta - db.Z[i] * out.xi[i];
        const Eigen::MatrixXd Hi = sys.H(db, i);
        const double m_i = static_cast<double>(db.Y[i].size());
        s2e_acc += eps.squaredNorm() + s2e_old * (m_i - s2e_old * Hi.trace());
        const Eigen::MatrixXd ZHZ = db.Z[i].transpose() * Hi * db.Z[i];
        Dxi_new += out.xi[i] * out.xi[i].transpose() + (Dxi - Dxi * ZHZ * Dxi);
    }
    Dxi_new /= static_cast<double>(n);

    out.vc.sigma2_eps = std::max(s2e_acc / N, opt.sigma2_eps_floor);
    out.vc.sigma2_a = std::max(Dxi_new(0, 0), 0.0);
    Eigen::MatrixXd Dn = Dxi_new.bottomRightCorner(K, K);
    out.vc.D = 0.5 * (Dn + Dn.transpose());

    if (!std::isfinite(out.vc.sigma2_eps) || !std::isfinite(out.vc.sigma2_a) ||
        !out.vc.D.allFinite() || !out.theta.allFinite())
        throw std::runtime_error("EM update produced non-finite values");
    return out;
}

namespace detail {

// Scaled change: relative for O(1)-or-larger parameters, absolute near zero,
// so variance components collapsing to a boundary still register as settled.
inline double rel_change(double a, double b) {
    return std::abs(a - b) / (1.0 + std::abs(b));
}

inline double rel_change(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / (1.0 + b.cwiseAbs().maxCoeff());
}

}  // namespace detail

/// Iterate the REML-EM sweeps until the maximum relative change of
/// (sigma2_a, sigma2_eps, vec D, theta) drops below tol. Non-convergence is
/// reported in the result, not thrown, so smoothing-parameter scans can
/// proceed through hard grid points.
inline FitResult run_em(const DesignBlocks& db, const Penalties& pen, const Lambdas& lam,
                        const EmOptions& opt = EmOptions{},
                        const VarianceComponents* init = nullptr) {
    const int K = static_cast<int>(pen.G_b.rows());
    VarianceComponents vc = init ? *init : VarianceComponents::identity(K);
    vc.validate();
    if (vc.D.rows() != K) throw std::invalid_argument("initial D has wrong dimension");

    FitResult fit;
    fit.lambdas = lam;
    double delta = std::numeric_limits<double>::infinity();
    int it = 0;
    Eigen::VectorXd theta_prev;
    for (; it < opt.max_iter; ++it) {
        EmIterateResult step = em_iterate(db, pen, vc, lam, opt);
        fit.objective_trace.push_back(
            penalized_objective(db, pen, step.vc, lam, step.theta, step.xi));
        delta = std::max(detail::rel_change(step.vc.sigma2_a, vc.sigma2_a),
                         detail::rel_change(step.vc.sigma2_eps, vc.sigma2_eps));
        delta = std::max(delta, detail::rel_change(step.vc.D, vc.D));
        if (theta_prev.size() > 0)
            delta = std::max(delta, detail::rel_change(step.theta, theta_prev));
        theta_prev = step.theta;
        vc = step.vc;
        fit.theta = std::move(step.theta);
        fit.xi = std::move(step.xi);
        if (delta < opt.tol) {
            ++it;
            break;
        }
    }
    fit.vc = vc;
    fit.convergence = {it, delta, delta < opt.tol};

    double sse = 0.0;
    for (int i = 0; i < db.n_subjects(); ++i)
        sse += (db.Y[i] - db.W[i] * fit.theta - db.Z[i] * fit.xi[i]).squaredNorm();
    fit.sse = sse;
    return fit;
}

struct SlopeCurves {
    Eigen::VectorXd grid;
    Eigen::VectorXd beta_hat;             // population slope on grid
    std::vector<Eigen::VectorXd> b_hat;   // per-subject deviation
    std::vector<Eigen::VectorXd> beta_i;  // beta_hat + b_hat_i
    Eigen::VectorXd intercepts;           // alpha0 + a_i per subject
};

/// Reconstruct slope functions from basis coefficients on a grid.
inline SlopeCurves coefficients_to_functions(const FitResult& fit,
                                             const BasisSystem& beta_basis,
                                             const BasisSystem& b_basis,
                                             const Eigen::VectorXd& grid) {
    SlopeCurves out;
    out.grid = grid;
    const Eigen::MatrixXd Phi = beta_basis.eval(grid, 0);
    const Eigen::MatrixXd Psi = b_basis.eval(grid, 0);
    out.beta_hat = Phi * fit.theta.tail(beta_basis.size());
    out.b_hat.reserve(fit.xi.size());
    out.beta_i.reserve(fit.xi.size());
    out.intercepts.resize(static_cast<Eigen::Index>(fit.xi.size()));
    for (std::size_t i = 0; i < fit.xi.size(); ++i) {
        Eigen::VectorXd bi = Psi * fit.xi[i].tail(b_basis.size());
        out.beta_i.push_back(out.beta_hat + bi);
        out.b_hat.push_back(std::move(bi));
        out.intercepts[static_cast<Eigen::Index>(i)] = fit.theta[0] + fit.xi[i][0];
    }
    return out;
}

}  // namespace flmm
