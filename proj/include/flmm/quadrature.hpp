#pragma once

#include <Eigen/Dense>
#include <array>
#include <stdexcept>
#include <vector>

namespace flmm {

/// Quadrature rule used when integrating a discretely observed curve
/// against basis functions.
struct QuadratureRule {
    enum class Kind { TrapezoidOnGrid, Gauss };
    Kind kind = Kind::TrapezoidOnGrid;
    int gauss_nodes = 0;  // only for Kind::Gauss

    static QuadratureRule trapezoid() { return {Kind::TrapezoidOnGrid, 0}; }
    static QuadratureRule gauss(int n_nodes) {
        if (n_nodes < 1) throw std::invalid_argument("gauss quadrature needs >= 1 node");
        return {Kind::Gauss, n_nodes};
    }
};

/// Trapezoid weights for an arbitrary strictly increasing grid.
inline Eigen::VectorXd trapezoid_weights(const Eigen::VectorXd& grid) {
    const Eigen::Index n = grid.size();
    if (n < 2) throw std::invalid_argument("trapezoid rule needs >= 2 grid points");
    Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        const double h = grid[i + 1] - grid[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    return w;
}

namespace detail {

// 7-point Gauss-Legendre rule on [-1,1]; exact through degree 13.
inline constexpr std::array<double, 7> kGL7Nodes = {
    -0.9491079123427585245262, -0.7415311855993944398639, -0.4058451513773971669066,
    0.0,
    0.4058451513773971669066, 0.7415311855993944398639, 0.9491079123427585245262};
inline constexpr std::array<double, 7> kGL7Weights = {
    0.1294849661688696932706, 0.2797053914892766679015, 0.3818300505051189449504,
    0.4179591836734693877551,
    0.3818300505051189449504, 0.2797053914892766679015, 0.1294849661688696932706};

}  // namespace detail

/// Composite 7-point Gauss-Legendre nodes/weights over [lo,hi] split into
/// `panels` equal panels.
inline void gauss_legendre_panels(double lo, double hi, int panels,
                                  Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
    if (panels < 1) throw std::invalid_argument("need >= 1 panel");
    const int n = 7 * panels;
    nodes.resize(n);
    weights.resize(n);
    const double h = (hi - lo) / panels;
    for (int p = 0; p < panels; ++p) {
        const double a = lo + p * h;
        const double mid = a + 0.5 * h;
        for (int q = 0; q < 7; ++q) {
            nodes[7 * p + q] = mid + 0.5 * h * detail::kGL7Nodes[q];
            weights[7 * p + q] = 0.5 * h * detail::kGL7Weights[q];
        }
    }
}

/// Composite Gauss-Legendre over explicit breakpoints (e.g. knot spans).
inline void gauss_legendre_spans(const std::vector<double>& breaks,
                                 Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
    if (breaks.size() < 2) throw std::invalid_argument("need >= 2 breakpoints");
    const int n = 7 * static_cast<int>(breaks.size() - 1);
    nodes.resize(n);
    weights.resize(n);
    int k = 0;
    for (std::size_t s = 0; s + 1 < breaks.size(); ++s) {
        const double a = breaks[s], b = breaks[s + 1];
        const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
        for (int q = 0; q < 7; ++q, ++k) {
            nodes[k] = mid + half * detail::kGL7Nodes[q];
            weights[k] = half * detail::kGL7Weights[q];
        }
    }
}

}  // namespace flmm
