#pragma once

#include <span>

#include "twinbed/learning.hpp"

// Data-parallel reductions used by the trainer. Each kernel has an OpenMP
// version and a plain serial reference kept for testing.
//
// The OpenMP versions sum fixed-size chunks independently and then combine
// the chunk partials in chunk order, so the result does not depend on the
// number of threads or on scheduling.
namespace twinbed::kernels {

inline constexpr std::size_t kChunk = 256;

double mse_serial(const Weights& W, std::span<const FeatureVector> x, std::span<const Target> y);
double mse_omp(const Weights& W, std::span<const FeatureVector> x, std::span<const Target> y);

Weights gradient_serial(const Weights& W, std::span<const FeatureVector> x,
                        std::span<const Target> y);
Weights gradient_omp(const Weights& W, std::span<const FeatureVector> x,
                     std::span<const Target> y);

/// Accumulates the scaled Gram matrix X^T X / n and cross term X^T Y / n.
struct Moments {
  Eigen::Matrix<double, 11, 11> xx = Eigen::Matrix<double, 11, 11>::Zero();
  Eigen::Matrix<double, 11, 3> xy = Eigen::Matrix<double, 11, 3>::Zero();
};
Moments moments_serial(std::span<const FeatureVector> x, std::span<const Target> y);
Moments moments_omp(std::span<const FeatureVector> x, std::span<const Target> y);

}  // namespace twinbed::kernels
