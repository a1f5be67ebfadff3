#pragma once

// Reference multinomial logistic regression fitted with damped Newton steps on
// the full Hessian. Deliberately shares no code with the library's probe.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct LogregFit {
  Eigen::MatrixXd weight;  // [c, f]
  Eigen::VectorXd bias;    // [c]
  int iterations = 0;
};

inline double objective(const Eigen::MatrixXd& x, const std::vector<std::uint32_t>& y, const Eigen::VectorXd& theta,
                        int c, double ridge) {
  const int n = static_cast<int>(x.rows()), f = static_cast<int>(x.cols());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(c);
    for (int a = 0; a < c; ++a) z(a) = x.row(i).dot(theta.segment(a * (f + 1), f)) + theta(a * (f + 1) + f);
    const double m = z.maxCoeff();
    total += m + std::log((z.array() - m).exp().sum()) - z(static_cast<int>(y[static_cast<std::size_t>(i)]));
  }
  double reg = 0.0;
  for (int a = 0; a < c; ++a) reg += theta.segment(a * (f + 1), f).squaredNorm();
  return total / n + 0.5 * ridge * reg;
}

inline LogregFit fit_logreg(const Eigen::MatrixXd& x, const std::vector<std::uint32_t>& y, int c, double ridge = 1e-4,
                            int max_iter = 100) {
  const int n = static_cast<int>(x.rows()), f = static_cast<int>(x.cols());
  const int p = c * (f + 1);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
  int it = 0;
  for (; it < max_iter; ++it) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p, p);
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd xi(f + 1);
      xi.head(f) = x.row(i).transpose();
      xi(f) = 1.0;
      Eigen::VectorXd z(c);
      for (int a = 0; a < c; ++a) z(a) = xi.dot(theta.segment(a * (f + 1), f + 1));
      Eigen::VectorXd pr = (z.array() - z.maxCoeff()).exp();
      pr /= pr.sum();
      for (int a = 0; a < c; ++a) {
        const double r = pr(a) - (static_cast<int>(y[static_cast<std::size_t>(i)]) == a ? 1.0 : 0.0);
        g.segment(a * (f + 1), f + 1) += r * xi;
        for (int b = 0; b < c; ++b) {
          const double w = pr(a) * ((a == b ? 1.0 : 0.0) - pr(b));
          h.block(a * (f + 1), b * (f + 1), f + 1, f + 1) += w * xi * xi.transpose();
        }
      }
    }
    g /= n;
    h /= n;
    for (int a = 0; a < c; ++a) {
      g.segment(a * (f + 1), f) += ridge * theta.segment(a * (f + 1), f);
      for (int j = 0; j < f; ++j) h(a * (f + 1) + j, a * (f + 1) + j) += ridge;
    }
    // The softmax parameterisation is invariant to a common shift, so the
    // bias block of the Hessian is singular; a tiny jitter makes it solvable.
    h.diagonal().array() += 1e-10;
    const Eigen::VectorXd step = h.ldlt().solve(g);
    const double f0 = objective(x, y, theta, c, ridge);
    double t = 1.0;
    while (t > 1e-10 && objective(x, y, theta - t * step, c, ridge) > f0 - 0.25 * t * g.dot(step)) t *= 0.5;
    theta -= t * step;
    if (g.norm() < 1e-10) break;
  }
  LogregFit out;
  out.weight.resize(c, f);
  out.bias.resize(c);
  for (int a = 0; a < c; ++a) {
    out.weight.row(a) = theta.segment(a * (f + 1), f).transpose();
    out.bias(a) = theta(a * (f + 1) + f);
  }
  out.iterations = it;
  return out;
}

inline double accuracy(const LogregFit& fit, const Eigen::MatrixXd& x, const std::vector<std::uint32_t>& y) {
  int hits = 0;
  for (int i = 0; i < x.rows(); ++i) {
    Eigen::VectorXd z = fit.weight * x.row(i).transpose() + fit.bias;
    Eigen::Index best = 0;
    z.maxCoeff(&best);
    if (static_cast<std::uint32_t>(best) == y[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(x.rows());
}

}  // namespace oracle
