#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hk/linalg.hpp"
#include "hk/tensor.hpp"

namespace hk::oracles {

inline constexpr double pi = 3.14159265358979323846;

// ---- closed-form heat kernels ----

// 1-D Euclidean heat kernel: exp(-(x-x0)^2 / 4t) / sqrt(4 pi t)
inline double heat_kernel_line(double t, double x0, double x) {
    if (t <= 0.0) throw std::invalid_argument("heat_kernel_line: t > 0 required");
    double d = x - x0;
    return std::exp(-d * d / (4.0 * t)) / std::sqrt(4.0 * pi * t);
}

// peak value of the line kernel, 1/sqrt(4 pi t)
inline double a_t_line(double t) {
    if (t <= 0.0) throw std::invalid_argument("a_t_line: t > 0 required");
    return 1.0 / std::sqrt(4.0 * pi * t);
}

// log of the line kernel, exact even where the kernel value underflows
inline double log_heat_kernel_line(double t, double x0, double x) {
    if (t <= 0.0) throw std::invalid_argument("log_heat_kernel_line: t > 0 required");
    double d = x - x0;
    return -d * d / (4.0 * t) - 0.5 * std::log(4.0 * pi * t);
}

// Heat kernel on a circle of given radius, as the wrapped image sum of the
// line kernel in arc-length coordinates. Density is per unit arc length.
inline double heat_kernel_circle(double t, double theta0, double theta, double radius = 1.0,
                                 int n_terms = 32) {
    if (t <= 0.0) throw std::invalid_argument("heat_kernel_circle: t > 0 required");
    if (n_terms < 1) throw std::invalid_argument("heat_kernel_circle: n_terms >= 1");
    if (radius <= 0.0) throw std::invalid_argument("heat_kernel_circle: radius > 0");
    double s = radius * (theta - theta0);
    double circ = 2.0 * pi * radius;
    double total = 0.0;
    for (int m = -n_terms; m <= n_terms; ++m)
        total += heat_kernel_line(t, 0.0, s + circ * double(m));
    return total;
}

// picks a truncation whose dropped tail is far below double precision
inline int circle_terms_for(double t, double radius) {
    double circ = 2.0 * pi * radius;
    double needed = std::sqrt(4.0 * t * 60.0) / circ;  // exp(-60) tail
    int n = int(needed) + 2;
    return n < 4 ? 4 : n;
}

// ---- theory-derived checks ----

// Heat-kernel lower bound for positive Ricci curvature bounded by K:
// Gamma(dim/2 + 1) / (C_eps (pi t)^{dim/2}) * exp(pi^2 (1 - dim) / ((4 - eps) K t))
inline double lower_bound_thm4(double t, int dim, double K, double eps, double C_eps) {
    if (t <= 0.0) throw std::invalid_argument("lower_bound_thm4: t > 0");
    if (dim < 1) throw std::invalid_argument("lower_bound_thm4: dim >= 1");
    if (K <= 0.0) throw std::invalid_argument("lower_bound_thm4: K > 0");
    if (eps <= 0.0 || eps >= 4.0) throw std::invalid_argument("lower_bound_thm4: 0 < eps < 4");
    if (C_eps <= 0.0) throw std::invalid_argument("lower_bound_thm4: C_eps > 0");
    double half = double(dim) / 2.0;
    double pref = std::tgamma(half + 1.0) / (C_eps * std::pow(pi * t, half));
    double expo = pi * pi * (1.0 - double(dim)) / ((4.0 - eps) * K * t);
    return pref * std::exp(expo);
}

using KernelFn1d = std::function<double(double t, double x0, double x)>;
using GeodesicFn1d = std::function<double(double x0, double x)>;

// |(-4t log k(t,x0,x)) - d^2(x0,x)|, the deviation from Varadhan's asymptotic
inline double varadhan_residual(const KernelFn1d& kernel, const GeodesicFn1d& geodesic,
                                double t, double x0, double x) {
    if (t <= 0.0) throw std::invalid_argument("varadhan_residual: t > 0");
    double k = kernel(t, x0, x);
    if (k <= 0.0) throw std::invalid_argument("varadhan_residual: kernel must be positive");
    double d = geodesic(x0, x);
    return std::fabs(-4.0 * t * std::log(k) - d * d);
}

// same residual from a log-kernel, usable at times small enough that the
// kernel value itself underflows
inline double varadhan_residual_log(const KernelFn1d& log_kernel,
                                    const GeodesicFn1d& geodesic, double t, double x0,
                                    double x) {
    if (t <= 0.0) throw std::invalid_argument("varadhan_residual_log: t > 0");
    double d = geodesic(x0, x);
    return std::fabs(-4.0 * t * log_kernel(t, x0, x) - d * d);
}

// trapezoid-rule L2 distance between two functions sampled on a sorted grid
inline double l2_kernel_distance(const std::function<double(double)>& f,
                                 const std::function<double(double)>& g,
                                 const std::vector<double>& grid) {
    if (grid.size() < 2) throw std::invalid_argument("l2_kernel_distance: grid >= 2 points");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (grid[i] <= grid[i - 1])
            throw std::invalid_argument("l2_kernel_distance: grid must be sorted");
    double acc = 0.0;
    double prev = 0.0;
    {
        double d = f(grid[0]) - g(grid[0]);
        prev = d * d;
    }
    for (std::size_t i = 1; i < grid.size(); ++i) {
        double d = f(grid[i]) - g(grid[i]);
        double cur = d * d;
        acc += 0.5 * (prev + cur) * (grid[i] - grid[i - 1]);
        prev = cur;
    }
    return acc;
}

inline std::vector<double> make_grid(double lo, double hi, double step) {
    std::vector<double> g;
    for (double x = lo; x <= hi + 1e-12; x += step) g.push_back(x);
    return g;
}

// |dk/dt - d^2k/dx^2| by central differences; small when the kernel solves
// the 1-D heat equation
inline double heat_equation_residual(const KernelFn1d& kernel, double t, double x, double dt,
                                     double dx, double x0 = 0.0) {
    if (!(t > dt && dt > 0.0)) throw std::invalid_argument("heat_equation_residual: t > dt > 0");
    if (dx <= 0.0) throw std::invalid_argument("heat_equation_residual: dx > 0");
    if (dt > 0.25 * t || dx * dx > t)
        throw std::invalid_argument("heat_equation_residual: step sizes too large");
    double kt = (kernel(t + dt, x0, x) - kernel(t - dt, x0, x)) / (2.0 * dt);
    double kxx = (kernel(t, x0, x + dx) - 2.0 * kernel(t, x0, x) + kernel(t, x0, x - dx)) /
                 (dx * dx);
    return std::fabs(kt - kxx);
}

// Fits the decay exponent of the squared L2 norm of k(t, x0, .) against t.
// The line kernel has slope -1/2 (polynomial decay, Thm-3 style); the circle
// flattens to 0 once diffusion saturates at the uniform density.
struct DecayCheck {
    double slope = 0.0;
    std::vector<double> norms;
};

inline DecayCheck l2_norm_decay_check(const std::string& variant,
                                      const std::vector<double>& t_list, double radius = 1.0) {
    if (t_list.size() < 2) throw std::invalid_argument("l2_norm_decay_check: >= 2 times");
    for (std::size_t i = 0; i < t_list.size(); ++i) {
        if (t_list[i] <= 0.0) throw std::invalid_argument("l2_norm_decay_check: t > 0");
        if (i > 0 && t_list[i] <= t_list[i - 1])
            throw std::invalid_argument("l2_norm_decay_check: t_list must increase");
    }
    DecayCheck out;
    std::vector<double> logt, logn;
    for (double t : t_list) {
        double norm2 = 0.0;
        if (variant == "line-1d") {
            double span = std::sqrt(4.0 * t * 50.0) + 1.0;
            double step = std::min(0.01, std::sqrt(t) / 50.0);
            double prev = 0.0, acc = 0.0;
            bool first = true;
            for (double x = -span; x <= span; x += step) {
                double k = heat_kernel_line(t, 0.0, x);
                double cur = k * k;
                if (!first) acc += 0.5 * (prev + cur) * step;
                prev = cur;
                first = false;
            }
            norm2 = acc;
        } else if (variant == "circle") {
            int terms = circle_terms_for(t, radius);
            double circ = 2.0 * pi * radius;
            int steps = 2000;
            double h = circ / steps;
            double acc = 0.0;
            for (int i = 0; i < steps; ++i) {
                double s0 = i * h, s1 = (i + 1) * h;
                double k0 = heat_kernel_circle(t, 0.0, s0 / radius, radius, terms);
                double k1 = heat_kernel_circle(t, 0.0, s1 / radius, radius, terms);
                acc += 0.5 * (k0 * k0 + k1 * k1) * h;
            }
            norm2 = acc;
        } else {
            throw std::invalid_argument("l2_norm_decay_check: unknown variant " + variant);
        }
        out.norms.push_back(norm2);
        logt.push_back(std::log(t));
        logn.push_back(std::log(norm2));
    }
    out.slope = fit_slope(logt, logn);
    return out;
}

// quadrature mass of an analytic kernel, for normalization checks
inline double line_kernel_mass(double t, double span = 0.0, double step = 1e-3) {
    if (span <= 0.0) span = std::sqrt(4.0 * t * 50.0) + 1.0;
    double acc = 0.0, prev = heat_kernel_line(t, 0.0, -span);
    for (double x = -span + step; x <= span; x += step) {
        double cur = heat_kernel_line(t, 0.0, x);
        acc += 0.5 * (prev + cur) * step;
        prev = cur;
    }
    return acc;
}

inline double circle_kernel_mass(double t, double radius = 1.0, int steps = 4000) {
    int terms = circle_terms_for(t, radius);
    double circ = 2.0 * pi * radius;
    double h = circ / steps;
    double acc = 0.0;
    for (int i = 0; i < steps; ++i) {
        double k0 = heat_kernel_circle(t, 0.0, (i * h) / radius, radius, terms);
        double k1 = heat_kernel_circle(t, 0.0, ((i + 1) * h) / radius, radius, terms);
        acc += 0.5 * (k0 + k1) * h;
    }
    return acc;
}

}  // namespace hk::oracles
