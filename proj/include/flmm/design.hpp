#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

#include "flmm/basis.hpp"
#include "flmm/quadrature.hpp"

namespace flmm {

/// One discretely observed functional covariate curve.
struct FunctionalSample {
    std::string subject_id;
    std::string visit_id;
    Eigen::VectorXd t;  // strictly increasing, inside the model domain
    Eigen::VectorXd x;  // values at t

    void validate() const {
        if (t.size() != x.size()) throw std::invalid_argument("curve t/x length mismatch");
        for (Eigen::Index i = 1; i < t.size(); ++i)
            if (!(t[i] > t[i - 1]))
                throw std::invalid_argument("curve grid must be strictly increasing (subject " +
                                            subject_id + ", visit " + visit_id + ")");
    }
};

struct Visit {
    double y = 0.0;
    FunctionalSample curve;
};

struct Subject {
    std::string subject_id;
    std::vector<Visit> visits;
};

/// Scalar responses plus functional covariates, grouped by subject.
struct Dataset {
    std::vector<Subject> subjects;
    Interval domain;

    int n_subjects() const { return static_cast<int>(subjects.size()); }
    int n_total() const {
        int N = 0;
        for (const auto& s : subjects) N += static_cast<int>(s.visits.size());
        return N;
    }

    void validate() const {
        if (subjects.empty()) throw std::invalid_argument("dataset has no subjects");
        for (const auto& s : subjects) {
            if (s.visits.empty())
                throw std::invalid_argument("subject " + s.subject_id + " has no visits");
            for (const auto& v : s.visits) {
                v.curve.validate();
                if (v.curve.t.size() > 0 &&
                    (!domain.contains(v.curve.t[0]) ||
                     !domain.contains(v.curve.t[v.curve.t.size() - 1])))
                    throw std::invalid_argument("curve grid outside model domain (subject " +
                                                s.subject_id + ")");
            }
        }
    }
};

/// Per-subject response vectors and design matrices: row j of W_i is
/// (1, ∫φ(t)X_ij(t)dt)', analogously Z_i with the random-effect basis.
struct DesignBlocks {
    std::vector<Eigen::VectorXd> Y;  // m_i each
    std::vector<Eigen::MatrixXd> W;  // m_i x (1+J)
    std::vector<Eigen::MatrixXd> Z;  // m_i x (1+K)

    int n_subjects() const { return static_cast<int>(Y.size()); }
    int n_total() const {
        int N = 0;
        for (const auto& y : Y) N += static_cast<int>(y.size());
        return N;
    }
    Eigen::VectorXd stacked_Y() const {
        Eigen::VectorXd out(n_total());
        Eigen::Index at = 0;
        for (const auto& y : Y) {
            out.segment(at, y.size()) = y;
            at += y.size();
        }
        return out;
    }
    Eigen::MatrixXd stacked_W() const {
        Eigen::MatrixXd out(n_total(), W.empty() ? 0 : W[0].cols());
        Eigen::Index at = 0;
        for (const auto& w : W) {
            out.middleRows(at, w.rows()) = w;
            at += w.rows();
        }
        return out;
    }
};

/// ∫ φ_j(t) X(t) dt for every basis function, against the discretely
/// observed curve. Trapezoid uses the sample's own grid; Gauss evaluates a
/// linear interpolant of the sample at the rule's nodes.
inline Eigen::VectorXd inner_product(const BasisSystem& b, const FunctionalSample& s,
                                     const QuadratureRule& q = QuadratureRule::trapezoid()) {
    s.validate();
    if (s.t.size() < 2) throw std::invalid_argument("sample grid needs >= 2 points");
    const double tol = 1e-10 * (1.0 + std::abs(b.domain().length()));
    if (!b.domain().contains(s.t[0], tol) || !b.domain().contains(s.t[s.t.size() - 1], tol))
        throw std::invalid_argument("sample grid outside basis domain");
    if (q.kind == QuadratureRule::Kind::TrapezoidOnGrid) {
        const Eigen::VectorXd w = trapezoid_weights(s.t);
        const Eigen::MatrixXd phi = b.eval(s.t, 0);
        return phi.transpose() * (w.asDiagonal() * s.x);
    }
    // Gauss on the curve's span, x linearly interpolated.
    Eigen::VectorXd nodes, weights;
    const int panels = std::max(1, q.gauss_nodes / 7 + (q.gauss_nodes % 7 ? 1 : 0));
    gauss_legendre_panels(s.t[0], s.t[s.t.size() - 1], panels, nodes, weights);
    Eigen::VectorXd xq(nodes.size());
    for (Eigen::Index i = 0; i < nodes.size(); ++i) {
        const double t = nodes[i];
        Eigen::Index k = 0;
        while (k + 2 < s.t.size() && s.t[k + 1] < t) ++k;
        const double h = s.t[k + 1] - s.t[k];
        const double a = (t - s.t[k]) / h;
        xq[i] = (1.0 - a) * s.x[k] + a * s.x[k + 1];
    }
    const Eigen::MatrixXd phi = b.eval(nodes, 0);
    return phi.transpose() * (weights.asDiagonal() * xq);
}

/// Assemble (Y_i, W_i, Z_i) for every subject, subject-major visit-minor.
inline DesignBlocks build_design(const Dataset& d, const BasisSystem& beta_basis,
                                 const BasisSystem& b_basis,
                                 const QuadratureRule& q = QuadratureRule::trapezoid()) {
    d.validate();
    DesignBlocks db;
    db.Y.reserve(d.subjects.size());
    db.W.reserve(d.subjects.size());
    db.Z.reserve(d.subjects.size());
    for (const auto& s : d.subjects) {
        const int m = static_cast<int>(s.visits.size());
        Eigen::VectorXd Yi(m);
        Eigen::MatrixXd Wi(m, 1 + beta_basis.size());
        Eigen::MatrixXd Zi(m, 1 + b_basis.size());
        for (int j = 0; j < m; ++j) {
            const Visit& v = s.visits[j];
            Yi[j] = v.y;
            Wi(j, 0) = 1.0;
            Wi.row(j).tail(beta_basis.size()) = inner_product(beta_basis, v.curve, q);
            Zi(j, 0) = 1.0;
            Zi.row(j).tail(b_basis.size()) = inner_product(b_basis, v.curve, q);
        }
        db.Y.push_back(std::move(Yi));
        db.W.push_back(std::move(Wi));
        db.Z.push_back(std::move(Zi));
    }
    return db;
}

}  // namespace flmm
