#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "flmm/quadrature.hpp"

namespace flmm {

/// Closed model domain [lo, hi].
struct Interval {
    double lo = 0.0;
    double hi = 1.0;

    double length() const { return hi - lo; }
    bool contains(double t, double tol = 1e-12) const {
        return t >= lo - tol && t <= hi + tol;
    }
};

/// Differential operator L defining a roughness penalty c' [∫(Lφ)(Lφ)'] c.
struct RoughnessOperator {
    enum class Kind { Derivative, Harmonic };
    Kind kind = Kind::Derivative;
    int order = 2;       // Derivative only
    double omega = 0.0;  // Harmonic only: L f = f''' + omega^2 f'

    static RoughnessOperator derivative(int order) {
        // order 0 gives the Gram matrix (a plain ridge penalty)
        if (order < 0) throw std::invalid_argument("derivative order must be >= 0");
        return {Kind::Derivative, order, 0.0};
    }
    static RoughnessOperator harmonic(double omega) {
        if (!(omega > 0.0)) throw std::invalid_argument("harmonic omega must be > 0");
        return {Kind::Harmonic, 0, omega};
    }

    /// Highest derivative the operator needs from the basis.
    int max_derivative() const { return kind == Kind::Derivative ? order : 3; }
};

/// An evaluable basis family over a closed interval: clamped B-splines or a
/// Fourier system {1, sin, cos, sin 2·, cos 2·, ...}. Immutable after
/// construction; safe to share across threads.
class BasisSystem {
public:
    enum class Kind { BSpline, Fourier };

    /// Clamped B-spline system with explicitly placed interior knots.
    static BasisSystem bspline(Interval domain, int order, std::vector<double> interior) {
        if (!(domain.hi > domain.lo)) throw std::invalid_argument("degenerate domain");
        if (order < 2) throw std::invalid_argument("B-spline order must be >= 2");
        for (std::size_t i = 0; i < interior.size(); ++i) {
            if (!(interior[i] > domain.lo && interior[i] < domain.hi))
                throw std::invalid_argument("interior knot outside open domain");
            if (i > 0 && interior[i] < interior[i - 1])
                throw std::invalid_argument("interior knots must be nondecreasing");
        }
        BasisSystem b;
        b.kind_ = Kind::BSpline;
        b.domain_ = domain;
        b.order_ = order;
        b.size_ = order + static_cast<int>(interior.size());
        // Clamped knot vector: boundary knots repeated `order` times.
        b.knots_.assign(order, domain.lo);
        b.knots_.insert(b.knots_.end(), interior.begin(), interior.end());
        b.knots_.insert(b.knots_.end(), order, domain.hi);
        b.interior_ = std::move(interior);
        return b;
    }

    /// Fourier system of odd size with ∫φ² dt = 1 over one period.
    static BasisSystem fourier(Interval domain, int n_basis, double period) {
        if (!(domain.hi > domain.lo)) throw std::invalid_argument("degenerate domain");
        if (n_basis < 1 || n_basis % 2 == 0)
            throw std::invalid_argument("Fourier basis size must be odd and positive");
        if (!(period > 0.0)) throw std::invalid_argument("period must be > 0");
        BasisSystem b;
        b.kind_ = Kind::Fourier;
        b.domain_ = domain;
        b.size_ = n_basis;
        b.period_ = period;
        return b;
    }

    Kind kind() const { return kind_; }
    const Interval& domain() const { return domain_; }
    int size() const { return size_; }
    int order() const { return order_; }
    double period() const { return period_; }
    const std::vector<double>& interior_knots() const { return interior_; }

    /// Row of all basis values (or `deriv`-th derivatives) at t.
    Eigen::RowVectorXd eval_point(double t, int deriv = 0) const {
        if (deriv < 0 || deriv > 3) throw std::invalid_argument("deriv must be in 0..3");
        if (!domain_.contains(t, 1e-10 * (1.0 + std::abs(domain_.length()))))
            throw std::invalid_argument("evaluation point outside basis domain");
        t = std::clamp(t, domain_.lo, domain_.hi);
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(size_);
        if (kind_ == Kind::BSpline) {
            eval_bspline_row(t, deriv, row);
        } else {
            eval_fourier_row(t, deriv, row);
        }
        return row;
    }

    /// |grid| × size matrix of basis (derivative) values.
    Eigen::MatrixXd eval(const Eigen::VectorXd& grid, int deriv = 0) const {
        Eigen::MatrixXd out(grid.size(), size_);
        for (Eigen::Index i = 0; i < grid.size(); ++i) out.row(i) = eval_point(grid[i], deriv);
        return out;
    }

    /// Breakpoints partitioning the domain into pieces on which composite
    /// quadrature of basis products is accurate.
    std::vector<double> quadrature_breaks() const {
        if (kind_ == Kind::BSpline) {
            std::vector<double> breaks{domain_.lo};
            for (double k : interior_)
                if (k > breaks.back()) breaks.push_back(k);
            breaks.push_back(domain_.hi);
            return breaks;
        }
        // Products of the highest harmonics oscillate at 2*k_max cycles per
        // period; 8 panels per cycle keeps GL7 well inside 1e-10.
        const int k_max = (size_ - 1) / 2;
        const double cycles = std::max(1.0, 2.0 * k_max * domain_.length() / period_);
        const int panels = std::max(16, static_cast<int>(std::ceil(8.0 * cycles)));
        std::vector<double> breaks(panels + 1);
        for (int i = 0; i <= panels; ++i)
            breaks[i] = domain_.lo + domain_.length() * i / panels;
        return breaks;
    }

private:
    Kind kind_ = Kind::BSpline;
    Interval domain_;
    int size_ = 0;
    int order_ = 0;                // BSpline
    std::vector<double> interior_; // BSpline
    std::vector<double> knots_;    // BSpline, clamped
    double period_ = 0.0;          // Fourier

    // Cox-de Boor with derivatives (de Boor's DersBasisFuns); fills the
    // `order` nonzero entries of the row for the span containing t.
    void eval_bspline_row(double t, int deriv, Eigen::RowVectorXd& row) const {
        const int k = order_;
        const int n_knots = static_cast<int>(knots_.size());
        if (deriv >= k) return;  // derivative of degree < deriv is zero
        // span index i: knots_[i] <= t < knots_[i+1], last span closed.
        int i;
        if (t >= knots_[n_knots - k]) {
            i = n_knots - k - 1;
            while (i > 0 && knots_[i] == knots_[i + 1]) --i;
        } else {
            i = static_cast<int>(std::upper_bound(knots_.begin() + (k - 1),
                                                  knots_.begin() + (n_knots - k), t) -
                                 knots_.begin()) - 1;
        }
        std::vector<double> left(k), right(k);
        std::vector<std::vector<double>> ndu(k, std::vector<double>(k, 0.0));
        ndu[0][0] = 1.0;
        for (int j = 1; j < k; ++j) {
            left[j] = t - knots_[i + 1 - j];
            right[j] = knots_[i + j] - t;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                ndu[j][r] = right[r + 1] + left[j - r];
                const double temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        std::vector<double> ders(k);
        if (deriv == 0) {
            for (int j = 0; j < k; ++j) ders[j] = ndu[j][k - 1];
        } else {
            std::vector<std::vector<double>> a(2, std::vector<double>(k, 0.0));
            for (int r = 0; r < k; ++r) {
                int s1 = 0, s2 = 1;
                a[0][0] = 1.0;
                double d = 0.0;
                for (int dd = 1; dd <= deriv; ++dd) {
                    d = 0.0;
                    const int rk = r - dd, pk = k - 1 - dd;
                    if (r >= dd) {
                        const double den = ndu[pk + 1][rk];
                        a[s2][0] = den == 0.0 ? 0.0 : a[s1][0] / den;
                        d = a[s2][0] * ndu[rk][pk];
                    }
                    const int j1 = rk >= -1 ? 1 : -rk;
                    const int j2 = r - 1 <= pk ? dd - 1 : k - 1 - r;
                    for (int j = j1; j <= j2; ++j) {
                        const double den = ndu[pk + 1][rk + j];
                        a[s2][j] = den == 0.0 ? 0.0 : (a[s1][j] - a[s1][j - 1]) / den;
                        d += a[s2][j] * ndu[rk + j][pk];
                    }
                    if (r <= pk) {
                        const double den = ndu[pk + 1][r];
                        a[s2][dd] = den == 0.0 ? 0.0 : -a[s1][dd - 1] / den;
                        d += a[s2][dd] * ndu[r][pk];
                    }
                    std::swap(s1, s2);
                }
                ders[r] = d;
            }
            double factor = static_cast<double>(k - 1);
            for (int dd = 2; dd <= deriv; ++dd) factor *= (k - dd);
            for (int r = 0; r < k; ++r) ders[r] *= factor;
        }
        const int first = i - k + 1;
        for (int j = 0; j < k; ++j) row[first + j] = ders[j];
    }

    void eval_fourier_row(double t, int deriv, Eigen::RowVectorXd& row) const {
        const double T = period_;
        const double w = 2.0 * M_PI / T;
        const double c0 = 1.0 / std::sqrt(T);
        const double c1 = std::sqrt(2.0 / T);
        row[0] = deriv == 0 ? c0 : 0.0;
        for (int k = 1; 2 * k - 1 < size_; ++k) {
            const double kw = k * w;
            const double arg = kw * t;
            const double amp = c1 * std::pow(kw, deriv);
            // d/dt cycles sin -> cos -> -sin -> -cos.
            double s, c;
            switch (deriv % 4) {
                case 0: s = std::sin(arg); c = std::cos(arg); break;
                case 1: s = std::cos(arg); c = -std::sin(arg); break;
                case 2: s = -std::sin(arg); c = -std::cos(arg); break;
                default: s = -std::cos(arg); c = std::sin(arg); break;
            }
            row[2 * k - 1] = amp * s;
            if (2 * k < size_) row[2 * k] = amp * c;
        }
    }
};

/// B-spline system with `n_interior` equispaced interior knots.
inline BasisSystem make_bspline_basis(Interval domain, int order, int n_interior) {
    if (n_interior < 0) throw std::invalid_argument("n_interior must be >= 0");
    std::vector<double> interior(static_cast<std::size_t>(n_interior));
    for (int i = 0; i < n_interior; ++i)
        interior[i] = domain.lo + domain.length() * (i + 1) / (n_interior + 1);
    return BasisSystem::bspline(domain, order, std::move(interior));
}

inline BasisSystem make_fourier_basis(Interval domain, int n_basis, double period) {
    return BasisSystem::fourier(domain, n_basis, period);
}

inline Eigen::MatrixXd eval_basis(const BasisSystem& b, const Eigen::VectorXd& grid,
                                  int deriv = 0) {
    return b.eval(grid, deriv);
}

/// Apply the operator to every basis function at the quadrature nodes.
inline Eigen::MatrixXd apply_operator(const BasisSystem& b, const RoughnessOperator& op,
                                      const Eigen::VectorXd& nodes) {
    if (op.kind == RoughnessOperator::Kind::Derivative) return b.eval(nodes, op.order);
    return b.eval(nodes, 3) + op.omega * op.omega * b.eval(nodes, 1);
}

/// Roughness penalty matrix G with G(j,k) = ∫ (Lφ_j)(Lφ_k) dt, computed by
/// composite 7-point Gauss-Legendre over the basis' natural subdivision.
inline Eigen::MatrixXd penalty_matrix(const BasisSystem& b, const RoughnessOperator& op) {
    if (b.kind() == BasisSystem::Kind::BSpline && op.max_derivative() >= b.order())
        throw std::invalid_argument("operator derivative order exceeds basis smoothness");
    Eigen::VectorXd nodes, weights;
    gauss_legendre_spans(b.quadrature_breaks(), nodes, weights);
    const Eigen::MatrixXd L = apply_operator(b, op, nodes);
    Eigen::MatrixXd G = L.transpose() * weights.asDiagonal() * L;
    G = (0.5 * (G + G.transpose())).eval();
    return G;
}

}  // namespace flmm
