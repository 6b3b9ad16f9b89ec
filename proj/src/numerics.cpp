#include "atmoe/numerics.hpp"

#include "atmoe/rows.hpp"

namespace atmoe {

Mat softmax_rows(const Mat& logits, double tau) {
  Mat out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) out.row(r) = softmax_temp(logits.row(r).transpose(), tau).transpose();
  return out;
}

Mat softmax_rows_backward(const Mat& probs, const Mat& dprobs, double tau) {
  Mat out(probs.rows(), probs.cols());
  for (Index r = 0; r < probs.rows(); ++r) {
    const Vec p = probs.row(r).transpose();
    const Vec dp = dprobs.row(r).transpose();
    out.row(r) = softmax_temp_backward<double>(p, dp, tau).transpose();
  }
  return out;
}

Mat prefix_mean_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  Eigen::RowVectorXd running = Eigen::RowVectorXd::Zero(x.cols());
  for (Index t = 0; t < x.rows(); ++t) {
    running += x.row(t);
    out.row(t) = running / static_cast<double>(t + 1);
  }
  return out;
}

Mat prefix_mean_rows_backward(const Mat& dmean) {
  Mat out(dmean.rows(), dmean.cols());
  Eigen::RowVectorXd running = Eigen::RowVectorXd::Zero(dmean.cols());
  for (Index t = dmean.rows() - 1; t >= 0; --t) {
    running += dmean.row(t) / static_cast<double>(t + 1);
    out.row(t) = running;
  }
  return out;
}

}  // namespace atmoe
