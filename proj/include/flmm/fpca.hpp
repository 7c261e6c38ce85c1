#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "flmm/design.hpp"

namespace flmm {

namespace detail {

inline double epanechnikov(double u) {
    const double a = std::abs(u);
    return a < 1.0 ? 0.75 * (1.0 - a * a) : 0.0;
}

/// Local-linear smooth of scattered (x, y) points onto `targets`.
/// Weights are optional per-point multiplicities. The window widens
/// automatically where fewer than two distinct points fall inside.
inline Eigen::VectorXd local_linear_1d(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& w,
                                       const Eigen::VectorXd& targets, double bandwidth) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("local_linear_1d needs >= 2 points");
    Eigen::VectorXd out(targets.size());
    for (Eigen::Index t = 0; t < targets.size(); ++t) {
        const double t0 = targets[t];
        double h = bandwidth;
        for (int attempt = 0;; ++attempt) {
            double s0 = 0, s1 = 0, s2 = 0, r0 = 0, r1 = 0;
            int inside = 0;
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                const double d = x[i] - t0;
                const double k = epanechnikov(d / h) * (w.size() ? w[i] : 1.0);
                if (k <= 0.0) continue;
                ++inside;
                s0 += k;
                s1 += k * d;
                s2 += k * d * d;
                r0 += k * y[i];
                r1 += k * d * y[i];
            }
            const double det = s0 * s2 - s1 * s1;
            if (inside >= 2 && det > 1e-14 * (s0 * s2 + 1e-300)) {
                out[t] = (s2 * r0 - s1 * r1) / det;
                break;
            }
            if (inside >= 1 && attempt >= 6) {  // collapsed design: local constant
                out[t] = r0 / s0;
                break;
            }
            h *= 2.0;
            if (attempt > 60) throw std::runtime_error("empty smoothing window");
        }
    }
    return out;
}

}  // namespace detail

struct FpcaOptions {
    int grid_size = 101;
    double mean_bandwidth = -1.0;  // <0: 5% of domain length
    double cov_bandwidth = -1.0;   // <0: 5% of domain length
    enum class MeanMode { Auto, Pooled, PerSubject };
    MeanMode mean_mode = MeanMode::Auto;  // Auto: per-subject when m_i >= 5
    int min_visits_for_subject_mean = 5;
    int max_components = 20;
    double eigenvalue_tol_rel = 1e-10;  // relative to leading eigenvalue
};

/// Fitted FPCA decomposition on a uniform working grid.
struct FpcaModel {
    Eigen::VectorXd grid;
    Eigen::VectorXd mean;  // pooled mean curve
    std::map<std::string, Eigen::VectorXd> subject_means;
    Eigen::VectorXd eigenvalues;     // nonincreasing, positive
    Eigen::MatrixXd eigenfunctions;  // grid x M, quadrature-orthonormal
    double noise_var = 0.0;
    Eigen::VectorXd pve;  // cumulative proportion of variance

    int n_components() const { return static_cast<int>(eigenvalues.size()); }

    const Eigen::VectorXd& mean_for(const std::string& subject_id) const {
        auto it = subject_means.find(subject_id);
        return it == subject_means.end() ? mean : it->second;
    }

    /// Linear interpolation of a working-grid curve at arbitrary points.
    Eigen::VectorXd interp(const Eigen::VectorXd& values, const Eigen::VectorXd& at) const {
        Eigen::VectorXd out(at.size());
        for (Eigen::Index i = 0; i < at.size(); ++i) {
            const double t = std::clamp(at[i], grid[0], grid[grid.size() - 1]);
            Eigen::Index k = 0;
            while (k + 2 < grid.size() && grid[k + 1] < t) ++k;
            const double a = (t - grid[k]) / (grid[k + 1] - grid[k]);
            out[i] = (1.0 - a) * values[k] + a * values[k + 1];
        }
        return out;
    }
};

/// Local-linear estimate of the mean curve from pooled observations.
inline Eigen::VectorXd estimate_mean(const std::vector<FunctionalSample>& obs,
                                     const Eigen::VectorXd& grid, double bandwidth) {
    Eigen::Index total = 0;
    for (const auto& s : obs) total += s.t.size();
    if (total == 0) throw std::invalid_argument("no observations to estimate a mean from");
    Eigen::VectorXd x(total), y(total);
    Eigen::Index at = 0;
    for (const auto& s : obs) {
        x.segment(at, s.t.size()) = s.t;
        y.segment(at, s.t.size()) = s.x;
        at += s.t.size();
    }
    return detail::local_linear_1d(x, y, Eigen::VectorXd(), grid, bandwidth);
}

namespace detail {

/// Raw covariance cross-products binned onto working-grid cells
/// (same-point products excluded off the diagonal track), then smoothed
/// with a 2-D local-linear fit. Returns the smoothed surface and the nugget
/// estimate from the raw-vs-smoothed diagonal gap.
inline void smooth_covariance_impl(const std::vector<FunctionalSample>& obs,
                                   const FpcaModel& model, double bandwidth,
                                   Eigen::MatrixXd& surface, double& noise_var) {
    const Eigen::Index p = model.grid.size();
    const double lo = model.grid[0];
    const double h_cell = model.grid[1] - model.grid[0];
    Eigen::MatrixXd sum_off = Eigen::MatrixXd::Zero(p, p);
    Eigen::MatrixXd cnt_off = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd sum_diag = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd cnt_diag = Eigen::VectorXd::Zero(p);

    int usable = 0;
    for (const auto& s : obs) {
        if (s.t.size() < 2) continue;
        ++usable;
        const Eigen::VectorXd mu = model.interp(model.mean_for(s.subject_id), s.t);
        const Eigen::VectorXd r = s.x - mu;
        std::vector<Eigen::Index> bin(static_cast<std::size_t>(s.t.size()));
        for (Eigen::Index k = 0; k < s.t.size(); ++k)
            bin[static_cast<std::size_t>(k)] = std::clamp<Eigen::Index>(
                static_cast<Eigen::Index>(std::lround((s.t[k] - lo) / h_cell)), 0, p - 1);
        for (Eigen::Index a = 0; a < s.t.size(); ++a) {
            sum_diag[bin[static_cast<std::size_t>(a)]] += r[a] * r[a];
            cnt_diag[bin[static_cast<std::size_t>(a)]] += 1.0;
            for (Eigen::Index b = 0; b < s.t.size(); ++b) {
                if (a == b) continue;
                sum_off(bin[static_cast<std::size_t>(a)], bin[static_cast<std::size_t>(b)]) +=
                    r[a] * r[b];
                cnt_off(bin[static_cast<std::size_t>(a)], bin[static_cast<std::size_t>(b)]) += 1.0;
            }
        }
    }
    if (usable < 1) throw std::invalid_argument("covariance needs curves with >= 2 points");

    // 2-D local-linear smooth of the nonempty off-diagonal cells.
    const int half = std::max(1, static_cast<int>(std::ceil(bandwidth / h_cell)));
    surface.resize(p, p);
    for (Eigen::Index a = 0; a < p; ++a) {
        for (Eigen::Index b = a; b < p; ++b) {
            double hw = bandwidth;
            for (int attempt = 0;; ++attempt) {
                const int reach = half * (1 << attempt);
                Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
                Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
                int inside = 0;
                for (Eigen::Index ia = std::max<Eigen::Index>(0, a - reach);
                     ia <= std::min(p - 1, a + reach); ++ia) {
                    const double ds = model.grid[ia] - model.grid[a];
                    const double ks = epanechnikov(ds / hw);
                    if (ks <= 0.0) continue;
                    for (Eigen::Index ib = std::max<Eigen::Index>(0, b - reach);
                         ib <= std::min(p - 1, b + reach); ++ib) {
                        if (cnt_off(ia, ib) <= 0.0) continue;
                        const double dt = model.grid[ib] - model.grid[b];
                        const double kt = epanechnikov(dt / hw);
                        if (kt <= 0.0) continue;
                        const double wgt = ks * kt * cnt_off(ia, ib);
                        const double val = sum_off(ia, ib) / cnt_off(ia, ib);
                        ++inside;
                        Eigen::Vector3d u(1.0, ds, dt);
                        A += wgt * u * u.transpose();
                        rhs += wgt * val * u;
                    }
                }
                if (inside >= 3) {
                    Eigen::LDLT<Eigen::Matrix3d> ldlt(A);
                    const Eigen::Vector3d beta = ldlt.solve(rhs);
                    if ((A * beta - rhs).norm() <= 1e-8 * (rhs.norm() + 1.0)) {
                        surface(a, b) = beta[0];
                        break;
                    }
                }
                if (inside >= 1 && attempt >= 6) {
                    surface(a, b) = rhs[0] / A(0, 0);  // local constant fallback
                    break;
                }
                hw *= 2.0;
                if (attempt > 40) throw std::runtime_error("empty covariance window");
            }
            surface(b, a) = surface(a, b);
        }
    }

    // Nugget: mean gap between the raw variance track and a refined diagonal
    // estimate of the noiseless surface. The plain local-linear surface is
    // biased low on the diagonal ridge (the covariance has a kink-like peak
    // there), so refit each diagonal value with a term quadratic in the
    // direction perpendicular to the diagonal, which absorbs that curvature.
    double gap = 0.0;
    int n_cells = 0;
    for (Eigen::Index a = 0; a < p; ++a) {
        if (cnt_diag[a] <= 0.0) continue;
        double diag_hat = surface(a, a);
        const int reach = std::max(1, static_cast<int>(std::ceil(bandwidth / h_cell)));
        Eigen::Matrix4d A = Eigen::Matrix4d::Zero();
        Eigen::Vector4d rhs = Eigen::Vector4d::Zero();
        int inside = 0;
        for (Eigen::Index ia = std::max<Eigen::Index>(0, a - reach);
             ia <= std::min(p - 1, a + reach); ++ia) {
            const double ds = model.grid[ia] - model.grid[a];
            const double ks = epanechnikov(ds / bandwidth);
            if (ks <= 0.0) continue;
            for (Eigen::Index ib = std::max<Eigen::Index>(0, a - reach);
                 ib <= std::min(p - 1, a + reach); ++ib) {
                if (cnt_off(ia, ib) <= 0.0) continue;
                const double dt = model.grid[ib] - model.grid[a];
                const double kt = epanechnikov(dt / bandwidth);
                if (kt <= 0.0) continue;
                const double wgt = ks * kt * cnt_off(ia, ib);
                const double val = sum_off(ia, ib) / cnt_off(ia, ib);
                ++inside;
                const double mid = 0.5 * (ds + dt);
                const Eigen::Vector4d u(1.0, mid, mid * mid, (ds - dt) * (ds - dt));
                A += wgt * u * u.transpose();
                rhs += wgt * val * u;
            }
        }
        if (inside >= 5) {
            const Eigen::Vector4d beta = A.ldlt().solve(rhs);
            if ((A * beta - rhs).norm() <= 1e-8 * (rhs.norm() + 1.0)) diag_hat = beta[0];
        }
        gap += sum_diag[a] / cnt_diag[a] - diag_hat;
        ++n_cells;
    }
    noise_var = n_cells > 0 ? std::max(gap / n_cells, 0.0) : 0.0;
}

}  // namespace detail

/// Method-of-moments covariance with the nugget removed by smoothing the
/// off-diagonal cells; returns (surface on the model grid, noise variance).
inline std::pair<Eigen::MatrixXd, double> smooth_covariance(
    const std::vector<FunctionalSample>& obs, const FpcaModel& model, double bandwidth) {
    Eigen::MatrixXd surface;
    double noise_var = 0.0;
    detail::smooth_covariance_impl(obs, model, bandwidth, surface, noise_var);
    return {surface, noise_var};
}

/// Weighted eigenproblem of a covariance surface on a uniform grid:
/// quadrature-orthonormal eigenfunctions, negative eigenvalues dropped.
inline void eigen_decompose(const Eigen::MatrixXd& surface, const Eigen::VectorXd& grid,
                            int max_components, Eigen::VectorXd& eigenvalues,
                            Eigen::MatrixXd& eigenfunctions, double tol_rel = 1e-10) {
    const Eigen::Index p = grid.size();
    const Eigen::VectorXd w = trapezoid_weights(grid);
    const Eigen::VectorXd sqw = w.cwiseSqrt();
    Eigen::MatrixXd B = sqw.asDiagonal() * surface * sqw.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (B + B.transpose()));
    const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
    std::vector<std::pair<double, Eigen::Index>> keep;
    for (Eigen::Index k = 0; k < p; ++k) {
        const double ev = es.eigenvalues()[k];
        if (ev > tol_rel * top && ev > 0.0) keep.emplace_back(ev, k);
    }
    std::sort(keep.begin(), keep.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    const int M = std::min<int>(max_components, static_cast<int>(keep.size()));
    eigenvalues.resize(M);
    eigenfunctions.resize(p, M);
    for (int k = 0; k < M; ++k) {
        eigenvalues[k] = keep[static_cast<std::size_t>(k)].first;
        eigenfunctions.col(k) =
            es.eigenvectors().col(keep[static_cast<std::size_t>(k)].second).cwiseQuotient(sqw);
    }
}

/// Fit the full FPCA model: mean(s), smoothed covariance, eigenstructure.
inline FpcaModel fit_fpca(const std::vector<FunctionalSample>& obs, Interval domain,
                          const FpcaOptions& opt = FpcaOptions{}) {
    if (obs.empty()) throw std::invalid_argument("no curves");
    FpcaModel model;
    model.grid.setLinSpaced(opt.grid_size, domain.lo, domain.hi);
    const double L = domain.length();
    const double h_mean = opt.mean_bandwidth > 0 ? opt.mean_bandwidth : 0.05 * L;
    const double h_cov = opt.cov_bandwidth > 0 ? opt.cov_bandwidth : 0.05 * L;

    model.mean = estimate_mean(obs, model.grid, h_mean);

    if (opt.mean_mode != FpcaOptions::MeanMode::Pooled) {
        std::map<std::string, std::vector<FunctionalSample>> by_subject;
        for (const auto& s : obs) by_subject[s.subject_id].push_back(s);
        for (const auto& [sid, curves] : by_subject) {
            const bool enough =
                static_cast<int>(curves.size()) >= opt.min_visits_for_subject_mean;
            if (opt.mean_mode == FpcaOptions::MeanMode::PerSubject || enough)
                model.subject_means[sid] = estimate_mean(curves, model.grid, h_mean);
        }
    }

    auto [surface, noise_var] = smooth_covariance(obs, model, h_cov);
    model.noise_var = noise_var;
    eigen_decompose(surface, model.grid, opt.max_components, model.eigenvalues,
                    model.eigenfunctions, opt.eigenvalue_tol_rel);

    model.pve.resize(model.eigenvalues.size());
    const double total = model.eigenvalues.sum();
    double cum = 0.0;
    for (Eigen::Index k = 0; k < model.eigenvalues.size(); ++k) {
        cum += model.eigenvalues[k];
        model.pve[k] = total > 0 ? cum / total : 1.0;
    }
    return model;
}

/// Smallest M whose cumulative explained variance reaches the threshold.
inline int choose_num_fpcs_pve(const FpcaModel& model, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw std::invalid_argument("PVE threshold must be in (0,1]");
    for (Eigen::Index k = 0; k < model.pve.size(); ++k)
        if (model.pve[k] >= threshold - 1e-12) return static_cast<int>(k) + 1;
    return model.n_components();
}

/// PACE conditional-expectation scores for one curve on its own grid:
/// xi = Lambda Phi' Sigma_W^{-1} (w - mu), Sigma_W = Phi Lambda Phi' + s2 I.
inline Eigen::VectorXd pace_scores(const FunctionalSample& s, const FpcaModel& model, int M) {
    if (M < 0 || M > model.n_components())
        throw std::invalid_argument("requested more components than available");
    if (M == 0) return Eigen::VectorXd();
    const Eigen::Index m = s.t.size();
    Eigen::MatrixXd Phi(m, M);
    for (int k = 0; k < M; ++k) Phi.col(k) = model.interp(model.eigenfunctions.col(k), s.t);
    const Eigen::VectorXd lam = model.eigenvalues.head(M);
    const double ridge = std::max(model.noise_var, 1e-10 * lam[0]);
    Eigen::MatrixXd SigmaW = Phi * lam.asDiagonal() * Phi.transpose();
    SigmaW.diagonal().array() += ridge;
    const Eigen::VectorXd centered =
        s.x - model.interp(model.mean_for(s.subject_id), s.t);
    return lam.asDiagonal() * Phi.transpose() *
           Eigen::LLT<Eigen::MatrixXd>(SigmaW).solve(centered);
}

/// Denoised curve on the working grid: mean + truncated score expansion.
inline FunctionalSample reconstruct(const FunctionalSample& s, const FpcaModel& model, int M) {
    FunctionalSample out;
    out.subject_id = s.subject_id;
    out.visit_id = s.visit_id;
    out.t = model.grid;
    out.x = model.mean_for(s.subject_id);
    if (M > 0) out.x += model.eigenfunctions.leftCols(M) * pace_scores(s, model, M);
    return out;
}

inline std::vector<FunctionalSample> reconstruct_all(const std::vector<FunctionalSample>& obs,
                                                     const FpcaModel& model, int M) {
    std::vector<FunctionalSample> out;
    out.reserve(obs.size());
    for (const auto& s : obs) out.push_back(reconstruct(s, model, M));
    return out;
}

}  // namespace flmm
