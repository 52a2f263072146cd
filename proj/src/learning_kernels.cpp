#include "twinbed/learning_kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace twinbed::kernels {
namespace {

inline double squared_error(const Weights& W, const FeatureVector& x, const Target& y) {
  double acc = 0.0;
  for (std::size_t k = 0; k < kOutputCount; ++k) {
    double pred = 0.0;
    for (std::size_t j = 0; j < kFeatureCount; ++j) pred += W(k, j) * x[j];
    const double r = pred - y[k];
    acc += r * r;
  }
  return acc;
}

inline void add_gradient(Weights& G, const Weights& W, const FeatureVector& x, const Target& y) {
  for (std::size_t k = 0; k < kOutputCount; ++k) {
    double pred = 0.0;
    for (std::size_t j = 0; j < kFeatureCount; ++j) pred += W(k, j) * x[j];
    const double r = pred - y[k];
    for (std::size_t j = 0; j < kFeatureCount; ++j) G(k, j) += r * x[j];
  }
}

inline void add_moments(Moments& m, const FeatureVector& x, const Target& y) {
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) m.xx(i, j) += x[i] * x[j];
    for (std::size_t k = 0; k < kOutputCount; ++k) m.xy(i, k) += x[i] * y[k];
  }
}

std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

}  // namespace

double mse_serial(const Weights& W, std::span<const FeatureVector> x, std::span<const Target> y) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += squared_error(W, x[i], y[i]);
  return acc / static_cast<double>(x.size() * kOutputCount);
}

double mse_omp(const Weights& W, std::span<const FeatureVector> x, std::span<const Target> y) {
  const std::size_t n = x.size();
  if (n == 0) return 0.0;
  const auto chunks = static_cast<std::ptrdiff_t>(chunk_count(n));
  std::vector<double> partial(static_cast<std::size_t>(chunks), 0.0);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t begin = static_cast<std::size_t>(c) * kChunk;
    const std::size_t end = std::min(n, begin + kChunk);
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) acc += squared_error(W, x[i], y[i]);
    partial[static_cast<std::size_t>(c)] = acc;
  }

  double total = 0.0;
  for (double p : partial) total += p;
  return total / static_cast<double>(n * kOutputCount);
}

Weights gradient_serial(const Weights& W, std::span<const FeatureVector> x,
                        std::span<const Target> y) {
  Weights G = Weights::Zero();
  if (x.empty()) return G;
  for (std::size_t i = 0; i < x.size(); ++i) add_gradient(G, W, x[i], y[i]);
  return G * (2.0 / static_cast<double>(x.size() * kOutputCount));
}

Weights gradient_omp(const Weights& W, std::span<const FeatureVector> x,
                     std::span<const Target> y) {
  const std::size_t n = x.size();
  if (n == 0) return Weights::Zero();
  const auto chunks = static_cast<std::ptrdiff_t>(chunk_count(n));
  std::vector<Weights> partial(static_cast<std::size_t>(chunks), Weights::Zero());

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t begin = static_cast<std::size_t>(c) * kChunk;
    const std::size_t end = std::min(n, begin + kChunk);
    Weights& G = partial[static_cast<std::size_t>(c)];
    for (std::size_t i = begin; i < end; ++i) add_gradient(G, W, x[i], y[i]);
  }

  Weights total = Weights::Zero();
  for (const auto& p : partial) total += p;
  return total * (2.0 / static_cast<double>(n * kOutputCount));
}

Moments moments_serial(std::span<const FeatureVector> x, std::span<const Target> y) {
  Moments m;
  if (x.empty()) return m;
  for (std::size_t i = 0; i < x.size(); ++i) add_moments(m, x[i], y[i]);
  const double inv = 1.0 / static_cast<double>(x.size());
  m.xx *= inv;
  m.xy *= inv;
  return m;
}

Moments moments_omp(std::span<const FeatureVector> x, std::span<const Target> y) {
  const std::size_t n = x.size();
  Moments total;
  if (n == 0) return total;
  const auto chunks = static_cast<std::ptrdiff_t>(chunk_count(n));
  std::vector<Moments> partial(static_cast<std::size_t>(chunks));

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t begin = static_cast<std::size_t>(c) * kChunk;
    const std::size_t end = std::min(n, begin + kChunk);
    Moments& m = partial[static_cast<std::size_t>(c)];
    for (std::size_t i = begin; i < end; ++i) add_moments(m, x[i], y[i]);
  }

  for (const auto& p : partial) {
    total.xx += p.xx;
    total.xy += p.xy;
  }
  const double inv = 1.0 / static_cast<double>(n);
  total.xx *= inv;
  total.xy *= inv;
  return total;
}

}  // namespace twinbed::kernels
