#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ddpore/ndgrad/grid4.hpp"
#include "ddpore/ndgrad/tape.hpp"

namespace ddpore::ndgrad {

enum class BnMode { train, eval };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kProbabilityFloor = 1e-12;

// Per-channel running statistics. Fresh stats are mean 0 / var 1, so eval
// mode before any training step is the identity up to gamma and beta.
template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : mean(channels, T(0)), var(channels, T(1)) {}
};

// Stride-1 convolution with zero padding (k-1)/2, so the spatial size is
// preserved. weight is (c_out, c_in, k, k) with k odd; bias, when defined,
// is (1, c_out, 1, 1).
template <typename T>
Grid4<T> conv2d_same(Tape<T>& tape, const Grid4<T>& x, const Grid4<T>& weight,
                     const Grid4<T>& bias = {});

// gamma and beta are (1, c, 1, 1). Train mode normalizes with batch
// statistics over (batch, row, col) and folds them into `stats` with
// momentum 0.1 (unbiased variance); eval mode uses `stats` as is.
template <typename T>
Grid4<T> batch_norm(Tape<T>& tape, const Grid4<T>& x, const Grid4<T>& gamma,
                    const Grid4<T>& beta, BatchNormStats<T>& stats, BnMode mode);

template <typename T>
Grid4<T> relu(Tape<T>& tape, const Grid4<T>& x);

// While alive, appends the sign (input > 0) of every ReLU input evaluated on
// this thread. Probes do not nest.
class ReluSignProbe {
 public:
  ReluSignProbe();
  ~ReluSignProbe();
  ReluSignProbe(const ReluSignProbe&) = delete;
  ReluSignProbe& operator=(const ReluSignProbe&) = delete;

  std::vector<std::uint8_t> take();

 private:
  std::vector<std::uint8_t> signs_;
};

// Elementwise a + b; shapes must match exactly.
template <typename T>
Grid4<T> residual_add(Tape<T>& tape, const Grid4<T>& a, const Grid4<T>& b);

template <typename T>
Grid4<T> scale(Tape<T>& tape, const Grid4<T>& x, T factor);

// (n, c, h, w) -> (n, c*h*w, 1, 1)
template <typename T>
Grid4<T> flatten(Tape<T>& tape, const Grid4<T>& x);

// x is (n, k, 1, 1) (any trailing layout with c*h*w == k is accepted),
// weight (out, k, 1, 1), bias (1, out, 1, 1). Returns (n, out, 1, 1).
template <typename T>
Grid4<T> linear(Tape<T>& tape, const Grid4<T>& x, const Grid4<T>& weight,
                const Grid4<T>& bias);

// Softmax over the channel axis of an (n, k, 1, 1) grid.
template <typename T>
Grid4<T> softmax_rows(Tape<T>& tape, const Grid4<T>& x);

// Identity forward; backward multiplies the incoming gradient by -lambda.
template <typename T>
Grid4<T> gradient_reversal(Tape<T>& tape, const Grid4<T>& x, T lambda);

// Rows [begin, begin + count) of the batch axis.
template <typename T>
Grid4<T> slice_batch(Tape<T>& tape, const Grid4<T>& x, std::int64_t begin,
                     std::int64_t count);

// Stacks along the batch axis; every part must agree on (c, h, w).
template <typename T>
Grid4<T> concat_batch(Tape<T>& tape, std::span<const Grid4<T>> parts);

// Scalar reductions. Results have shape (1, 1, 1, 1).
template <typename T>
Grid4<T> sum(Tape<T>& tape, const Grid4<T>& x);

// Mean squared error over every element. `target` is treated as a
// constant; only `prediction` receives a gradient.
template <typename T>
Grid4<T> mse_loss(Tape<T>& tape, const Grid4<T>& prediction,
                  const Grid4<T>& target);

// Mean over rows of -log(p[row][label[row]]) with p clamped below at 1e-12.
// probs is (n, k, 1, 1) with rows that are distributions.
template <typename T>
Grid4<T> cross_entropy(Tape<T>& tape, const Grid4<T>& probs,
                       std::span<const int> labels);

// Same label for every row.
template <typename T>
Grid4<T> cross_entropy(Tape<T>& tape, const Grid4<T>& probs, int label);

}  // namespace ddpore::ndgrad
