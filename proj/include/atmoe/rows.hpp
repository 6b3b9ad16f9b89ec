#pragma once

#include "atmoe/numerics.hpp"

// Row-batched helpers: each row of the argument is one token.
namespace atmoe {

Mat softmax_rows(const Mat& logits, double tau);
Mat softmax_rows_backward(const Mat& probs, const Mat& dprobs, double tau);

/// Causal running mean: row t of the result averages rows 0..t of x.
Mat prefix_mean_rows(const Mat& x);
Mat prefix_mean_rows_backward(const Mat& dmean);

}  // namespace atmoe
