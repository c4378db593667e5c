#pragma once

// Evaluation metrics and their CSV plumbing: top-k assignment accuracy over
// valid agents, rank-statistic ROC-AUC, and the metric row format shared by
// training logs and evaluation reports.

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "scanenc/tensor.hpp"

namespace scanenc {

// Fraction of valid agents whose labeled column ranks in the top k among
// valid columns. Null labels (-1) map to the last column. An agent counts as
// correct when strictly fewer than k valid columns score above its label.
template <class S>
double assignment_topk(const Tensor<S>& logits, const Tensor<int>& labels,
                       const Tensor<std::uint8_t>& target_valid,
                       const Tensor<std::uint8_t>& agent_valid, int k) {
  if (logits.rank() != 3) throw ShapeError("assignment_topk: logits must be [B, A, M]");
  const std::int64_t B = logits.dim(0), A = logits.dim(1), M = logits.dim(2);
  if (labels.rank() != 2 || labels.dim(0) != B || labels.dim(1) != A)
    throw ShapeError("assignment_topk: labels must be [B, A]");
  if (target_valid.rank() != 2 || target_valid.dim(0) != B || target_valid.dim(1) != M)
    throw ShapeError("assignment_topk: target_valid must be [B, M]");
  if (agent_valid.rank() != 2 || agent_valid.dim(0) != B || agent_valid.dim(1) != A)
    throw ShapeError("assignment_topk: agent_valid must be [B, A]");
  if (k < 1) throw ValueError("assignment_topk: k must be >= 1");

  std::int64_t n = 0, correct = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t a = 0; a < A; ++a) {
      if (!agent_valid[b * A + a]) continue;
      int lab = labels[b * A + a];
      if (lab == -1) lab = int(M) - 1;
      if (lab < 0 || lab >= M) throw ValueError("assignment_topk: label out of range");
      if (!target_valid[b * M + lab])
        throw ValueError("assignment_topk: label points at an invalid column");
      ++n;
      const S ref = logits[(b * A + a) * M + lab];
      int above = 0;
      for (std::int64_t m = 0; m < M; ++m)
        if (target_valid[b * M + m] && logits[(b * A + a) * M + m] > ref) ++above;
      if (above < k) ++correct;
    }
  if (n == 0) throw ValueError("assignment_topk: no valid agents");
  return double(correct) / double(n);
}

// Area under the ROC curve via the rank statistic: mean rank of positive
// scores, with ties sharing their average rank. Equals the probability that
// a random positive outscores a random negative (ties count half).
inline double roc_auc(const std::vector<double>& scores,
                      const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw ValueError("roc_auc: need equally many scores and labels");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0;
  std::int64_t n_pos = 0;
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (double(i + 1) + double(j));  // 1-based
    for (size_t t = i; t < j; ++t)
      if (labels[order[t]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::int64_t n_neg = std::int64_t(n) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ValueError("roc_auc: need at least one positive and one negative");
  return (pos_rank_sum - 0.5 * double(n_pos) * double(n_pos + 1)) /
         (double(n_pos) * double(n_neg));
}

struct MetricRow {
  std::int64_t step = 0;
  double loss = 0;
  double top1 = 0;
  double top5 = 0;
  double auc = 0;
  double mse = 0;
  double wall_s = 0;
  double peak_mb = 0;
};

inline const char* metric_csv_header() {
  return "step,loss,top1,top5,auc,mse,wall_s,peak_mb";
}

// Appends rows to a CSV file, writing the header only when the file starts
// empty. Flushes per row so partial logs survive aborts.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) {
    f_ = std::fopen(path.c_str(), "a");
    if (!f_) throw ValueError("cannot open metrics file: " + path);
    std::fseek(f_, 0, SEEK_END);
    if (std::ftell(f_) == 0) std::fprintf(f_, "%s\n", metric_csv_header());
  }
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;
  ~MetricsWriter() {
    if (f_) std::fclose(f_);
  }

  void write(const MetricRow& r) {
    std::fprintf(f_, "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.6g,%.6g\n",
                 static_cast<long long>(r.step), r.loss, r.top1, r.top5, r.auc, r.mse,
                 r.wall_s, r.peak_mb);
    std::fflush(f_);
  }

 private:
  std::FILE* f_ = nullptr;
};

}  // namespace scanenc
