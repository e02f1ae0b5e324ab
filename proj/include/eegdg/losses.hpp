#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "eegdg/tensor.hpp"

namespace eegdg {

enum class KernelKind { rbf, linear };

// k(x, z) = exp(-|x - z|² / (2σ²)) for rbf, <x, z> for linear.
// With the median heuristic σ is the median pairwise Euclidean distance of
// the pooled set (1 when that median is 0), treated as a constant.
struct KernelSpec {
  KernelKind kind = KernelKind::rbf;
  bool median_heuristic = true;
  double sigma = 1.0;

  void validate() const;
};

double median_pairwise_distance(const Tensor& x);

// Biased (V-statistic) squared MMD between the empirical mean embeddings of
// `features` [m×d] and `pooled` [M×d].
Tensor mmd_to_mean(const Tensor& features, const Tensor& pooled, const KernelSpec& kernel);

// (1/N) Σ_n mmd_to_mean(features_n, concat of all features).
Tensor margin_invariant_loss(const std::vector<Tensor>& features, const KernelSpec& kernel);

// δ_c = (1/n) Σ_ij |x_i - x_j| [y_i = y_j], over ordered pairs.
Tensor intra_class_compactness(const Tensor& x, std::span<const int> y);
// δ_s = (1/n) Σ_ij |x_i - x_j| [y_i != y_j].
Tensor inter_class_separability(const Tensor& x, std::span<const int> y);

struct ClassCenters {
  Tensor centers;             // [n_classes × d], zero rows for absent classes
  std::vector<bool> present;
};

ClassCenters class_centers(const Tensor& x, std::span<const int> y, std::size_t n_classes);

// Mean Euclidean distance between same-class centers over classes present in
// both sets; 0 (with a warning) when no class is shared.
Tensor cross_domain_center_distance(const ClassCenters& a, const ClassCenters& b);

struct ConditionTerms {
  Tensor loss;
  std::vector<double> delta_c;  // per domain
  std::vector<double> delta_s;  // per domain
  std::vector<double> pair_d;   // pairs (0,1), (0,2), ..., (1,2), ...
};

// Σ_n (δ_c^n - α δ_s^n + ½ Σ_{n'≠n} D^{n',n}). When `floor` is set the loss is
// clamped from below at that value.
ConditionTerms condition_invariant_terms(const std::vector<Tensor>& features,
                                         const std::vector<std::vector<int>>& labels, double alpha,
                                         std::size_t n_classes, std::optional<double> floor = {});
Tensor condition_invariant_loss(const std::vector<Tensor>& features,
                                const std::vector<std::vector<int>>& labels, double alpha,
                                std::size_t n_classes, std::optional<double> floor = {});

// Mean cross entropy of logits [B × K] against integer targets.
Tensor classification_loss(const Tensor& logits, std::span<const int> y);
Tensor domain_classification_loss(const Tensor& logits, std::span<const int> d);

struct LossBreakdown {
  double l_clc = 0.0;
  double l_mir = 0.0;
  double l_cir = 0.0;
  double l_dom = 0.0;
  double total = 0.0;
  std::vector<double> delta_c;
  std::vector<double> delta_s;
  std::vector<double> pair_d;
  double avg_mmd = 0.0;
};

// Invocation counts, used to confirm that disabled loss terms are never
// evaluated.
struct LossCallCounts {
  std::size_t mmd = 0;
  std::size_t margin_invariant = 0;
  std::size_t class_centers = 0;
  std::size_t condition_invariant = 0;
};

LossCallCounts loss_call_counts();
void reset_loss_call_counts();

// Evaluations on this thread are not counted while an instance is alive.
// Used for monitoring diagnostics that are not part of the objective.
class UncountedLossScope {
 public:
  UncountedLossScope();
  ~UncountedLossScope();
  UncountedLossScope(const UncountedLossScope&) = delete;
  UncountedLossScope& operator=(const UncountedLossScope&) = delete;

 private:
  bool previous_;
};

}  // namespace eegdg
