#pragma once

// Differentiable analytic style descriptor.
//
// Two blocks, concatenated and L2-normalized:
//   * color: 27 Gaussian bins on a 3x3x3 RGB lattice, each pixel weighted by
//     its mean intensity, averaged over pixels, then scaled to unit norm;
//   * orientation: doubled-angle gradient statistics of the luminance forward
//     differences (gx, gy) with a saturating per-pixel energy,
//       [e/(e+c), (gx^2-gy^2)/(e+c), 2 gx gy/(e+c)],  e = gx^2 + gy^2,
//     averaged over pixels and scaled by kOrientationGain.
// The saturation makes the orientation block measure how much of the canvas
// carries texture rather than how strong a few shape edges are. An image with
// an empty color histogram (all black) maps to the first basis direction.

#include "uso/autograd.hpp"

#include <array>
#include <cmath>

namespace uso::descriptor {

inline constexpr int kColorBins = 27;
inline constexpr int kOrientationBins = 3;
inline constexpr int kDim = kColorBins + kOrientationBins;
inline constexpr double kBinSigma = 0.15;
inline constexpr double kEnergyFloor = 0.0025;
inline constexpr double kOrientationGain = 3.0;

inline const Matrix& bin_centers() {
  static const Matrix centers = [] {
    Matrix c(kColorBins, 3);
    constexpr std::array<double, 3> levels{0.1, 0.5, 0.9};
    int k = 0;
    for (double r : levels)
      for (double g : levels)
        for (double b : levels) {
          c(k, 0) = r;
          c(k, 1) = g;
          c(k, 2) = b;
          ++k;
        }
    return c;
  }();
  return centers;
}

namespace detail {

struct Raw {
  RowVector color;     // unnormalized histogram, 1 x kColorBins
  RowVector orient;    // 1 x kOrientationBins, gain applied
  Matrix kernel;       // N x kColorBins
  Eigen::VectorXd gx;  // forward differences of luminance
  Eigen::VectorXd gy;
};

inline Raw raw_descriptor(const Matrix& img, int height, int width) {
  const Eigen::Index n = img.rows();
  const Matrix& mu = bin_centers();
  const double inv_two_sigma2 = 1.0 / (2.0 * kBinSigma * kBinSigma);
  Raw r;
  Eigen::VectorXd sq = img.rowwise().squaredNorm();
  Eigen::VectorXd mu_sq = mu.rowwise().squaredNorm();
  Matrix cross = img * mu.transpose();
  r.kernel.resize(n, kColorBins);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (int k = 0; k < kColorBins; ++k) {
      const double d2 = std::max(0.0, sq(p) - 2.0 * cross(p, k) + mu_sq(k));
      r.kernel(p, k) = std::exp(-d2 * inv_two_sigma2);
    }
  }
  Eigen::VectorXd w = img.rowwise().mean();
  r.color = (w.transpose() * r.kernel) / static_cast<double>(n);

  Eigen::VectorXd lum = img.rowwise().mean();
  r.gx = Eigen::VectorXd::Zero(n);
  r.gy = Eigen::VectorXd::Zero(n);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int p = y * width + x;
      if (x + 1 < width) r.gx(p) = lum(p + 1) - lum(p);
      if (y + 1 < height) r.gy(p) = lum(p + width) - lum(p);
    }
  }
  r.orient = RowVector::Zero(kOrientationBins);
  for (Eigen::Index p = 0; p < n; ++p) {
    const double gx = r.gx(p), gy = r.gy(p);
    const double e = gx * gx + gy * gy;
    const double inv = 1.0 / (e + kEnergyFloor);
    r.orient(0) += e * inv;
    r.orient(1) += (gx * gx - gy * gy) * inv;
    r.orient(2) += 2.0 * gx * gy * inv;
  }
  r.orient *= kOrientationGain / static_cast<double>(n);
  return r;
}

}  // namespace detail

/// Descriptor of an (H*W)x3 image on the tape; output is 1 x kDim.
inline ag::Var describe(ag::Var img, int height = 32, int width = 32) {
  if (img.cols() != 3 || img.rows() != static_cast<Eigen::Index>(height) * width) {
    throw std::invalid_argument("style descriptor: expects an (H*W)x3 image");
  }
  detail::Raw raw = detail::raw_descriptor(img.value(), height, width);
  const double color_norm = raw.color.norm();
  const bool degenerate = color_norm < 1e-12;
  Matrix out = Matrix::Zero(1, kDim);
  RowVector joined = RowVector::Zero(kDim);
  double norm = 1.0;
  if (degenerate) {
    out(0, 0) = 1.0;
  } else {
    joined.head(kColorBins) = raw.color / color_norm;
    joined.tail(kOrientationBins) = raw.orient;
    norm = joined.norm();
    out.row(0) = joined / norm;
  }
  Matrix unit = out;
  return img.tape->record(
      std::move(out), img.requires_grad() && !degenerate,
      [img, raw = std::move(raw), unit, norm, color_norm, height, width](ag::Tape& tp, const Matrix& g) {
        RowVector gj = (g.row(0) - g.row(0).dot(unit.row(0)) * unit.row(0)) / norm;
        RowVector hn = raw.color / color_norm;
        RowVector gc = gj.head(kColorBins);
        RowVector gh = (gc - gc.dot(hn) * hn) / color_norm;

        const Matrix& x = img.value();
        const Eigen::Index n = x.rows();
        const double inv_n = 1.0 / static_cast<double>(n);
        const Matrix& mu = bin_centers();
        const double inv_sigma2 = 1.0 / (kBinSigma * kBinSigma);

        Matrix gx_img = Matrix::Zero(n, 3);
        // h_k = (1/N) sum_p w_p K_pk with w_p the mean intensity.
        Eigen::VectorXd w = x.rowwise().mean();
        Eigen::VectorXd a = raw.kernel * gh.transpose();
        Matrix gk = raw.kernel.array().rowwise() * gh.array();
        Matrix weighted_mu = gk * mu;
        for (Eigen::Index p = 0; p < n; ++p) {
          for (int c = 0; c < 3; ++c) {
            gx_img(p, c) += inv_n * (a(p) / 3.0 - w(p) * inv_sigma2 * (a(p) * x(p, c) - weighted_mu(p, c)));
          }
        }

        const double s = kOrientationGain * inv_n;
        const double g1 = gj(kColorBins), g2 = gj(kColorBins + 1), g3 = gj(kColorBins + 2);
        Eigen::VectorXd dgx(n), dgy(n);
        for (Eigen::Index p = 0; p < n; ++p) {
          const double gx = raw.gx(p), gy = raw.gy(p);
          const double den = gx * gx + gy * gy + kEnergyFloor;
          const double inv2 = 1.0 / (den * den);
          const double c = kEnergyFloor;
          dgx(p) = s * inv2 *
                   (g1 * 2.0 * c * gx + g2 * 2.0 * gx * (2.0 * gy * gy + c) + g3 * 2.0 * gy * (gy * gy - gx * gx + c));
          dgy(p) = s * inv2 *
                   (g1 * 2.0 * c * gy - g2 * 2.0 * gy * (2.0 * gx * gx + c) + g3 * 2.0 * gx * (gx * gx - gy * gy + c));
        }
        Eigen::VectorXd dlum = Eigen::VectorXd::Zero(n);
        for (int y = 0; y < height; ++y) {
          for (int xx = 0; xx < width; ++xx) {
            const int p = y * width + xx;
            if (xx + 1 < width) {
              dlum(p + 1) += dgx(p);
              dlum(p) -= dgx(p);
            }
            if (y + 1 < height) {
              dlum(p + width) += dgy(p);
              dlum(p) -= dgy(p);
            }
          }
        }
        gx_img.colwise() += dlum / 3.0;
        tp.accumulate(img.id, gx_img);
      });
}

/// Descriptor of a concrete image.
inline RowVector style_descriptor(const Matrix& img, int height = 32, int width = 32) {
  ag::Tape tape;
  ag::NoGradGuard guard(tape);
  return describe(tape.constant(img), height, width).value().row(0);
}

inline double cosine(const RowVector& a, const RowVector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

/// Cosine between the style descriptors of two images.
inline double style_similarity(const Matrix& a, const Matrix& b) {
  return cosine(style_descriptor(a), style_descriptor(b));
}

}  // namespace uso::descriptor
