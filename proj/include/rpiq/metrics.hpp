#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "rpiq/error.hpp"

namespace rpiq {

// 100 * (initial - final) / initial, or 0 when there was nothing to reduce.
inline double reduction_pct(double gamma_init, double gamma_final) {
  if (gamma_init < 0.0 || gamma_final < 0.0) {
    throw ArgumentError("reduction_pct: losses must be non-negative");
  }
  if (gamma_init == 0.0) return 0.0;
  return 100.0 * (gamma_init - gamma_final) / gamma_init;
}

// exp of the mean per-batch cross-entropy.
inline double perplexity(std::span<const double> batch_losses) {
  if (batch_losses.empty()) throw ArgumentError("perplexity: no batch losses");
  double sum = 0.0;
  for (double l : batch_losses) {
    if (!std::isfinite(l)) throw ArgumentError("perplexity: non-finite loss");
    sum += l;
  }
  return std::exp(sum / static_cast<double>(batch_losses.size()));
}

template <typename T>
double accuracy(std::span<const T> predictions, std::span<const T> labels) {
  if (predictions.size() != labels.size()) {
    throw ArgumentError("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ArgumentError("accuracy: empty label set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

struct RunCost {
  std::size_t peak_bytes = 0;
  double seconds = 0.0;
};

struct Overheads {
  long long delta_mem_bytes = 0;
  double delta_time = 0.0;
};

// Delta M and Delta T of a refined run relative to its stage-1-only baseline.
inline Overheads measure_overheads(const RunCost& baseline, const RunCost& refined) {
  return {static_cast<long long>(refined.peak_bytes) - static_cast<long long>(baseline.peak_bytes),
          refined.seconds - baseline.seconds};
}

}  // namespace rpiq
