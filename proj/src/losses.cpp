#include "eegdg/losses.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "eegdg/errors.hpp"
#include "eegdg/log.hpp"

namespace eegdg {

namespace {

std::atomic<std::size_t> mmd_calls{0};
std::atomic<std::size_t> mir_calls{0};
std::atomic<std::size_t> center_calls{0};
std::atomic<std::size_t> cir_calls{0};
thread_local bool counting = true;

void count(std::atomic<std::size_t>& c) {
  if (counting) ++c;
}

void require_matrix(const Tensor& x, const char* op) {
  if (!x.defined() || x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D feature matrix, got " +
                         (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
  }
}

void require_labels(const Tensor& x, std::span<const int> y, const char* op) {
  require_matrix(x, op);
  if (y.size() != x.dim(0)) {
    throw DimensionError(std::string(op) + ": " + std::to_string(y.size()) + " labels for " +
                         std::to_string(x.dim(0)) + " samples");
  }
}

Tensor kernel_matrix(const Tensor& a, const Tensor& b, KernelKind kind, double sigma) {
  if (kind == KernelKind::linear) return matmul(a, transpose(b));
  return exp(scale(pairwise_sq_dist(a, b), -1.0 / (2.0 * sigma * sigma)));
}

double bandwidth(const KernelSpec& k, const Tensor& pooled) {
  if (k.kind == KernelKind::linear) return 1.0;
  return k.median_heuristic ? median_pairwise_distance(pooled) : k.sigma;
}

Tensor mmd_with_sigma(const Tensor& x, const Tensor& z, KernelKind kind, double sigma) {
  count(mmd_calls);
  Tensor kxx = mean(kernel_matrix(x, x, kind, sigma));
  Tensor kxz = mean(kernel_matrix(x, z, kind, sigma));
  Tensor kzz = mean(kernel_matrix(z, z, kind, sigma));
  return add(sub(kxx, scale(kxz, 2.0)), kzz);
}

Tensor pair_mask_sum(const Tensor& x, std::span<const int> y, bool same) {
  const std::size_t n = x.dim(0);
  std::vector<double> mask(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = ((y[i] == y[j]) == same) ? 1.0 : 0.0;
  Tensor dist = sqrt_zero_safe(pairwise_sq_dist(x, x));
  return scale(sum(mul(dist, Tensor::from({n, n}, std::move(mask)))), 1.0 / static_cast<double>(n));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> y, const char* op) {
  require_matrix(logits, op);
  if (y.size() != logits.dim(0)) {
    throw DimensionError(std::string(op) + ": " + std::to_string(y.size()) + " targets for " +
                         std::to_string(logits.dim(0)) + " rows");
  }
  for (int t : y) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.dim(1)) {
      throw ContractError(std::string(op) + ": target " + std::to_string(t) + " outside [0, " +
                          std::to_string(logits.dim(1)) + ")");
    }
  }
  return scale(mean(pick(log_softmax(logits, 1), y)), -1.0);
}

}  // namespace

void KernelSpec::validate() const {
  if (kind == KernelKind::rbf && !median_heuristic && !(sigma > 0.0 && std::isfinite(sigma))) {
    throw ConfigError("kernel bandwidth must be > 0, got " + std::to_string(sigma), "train.kernel_sigma");
  }
}

double median_pairwise_distance(const Tensor& x) {
  require_matrix(x, "median_pairwise_distance");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto v = x.data();
  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = v[i * d + k] - v[j * d + k];
        s += diff * diff;
      }
      dists.push_back(std::sqrt(s));
    }
  if (dists.empty()) return 1.0;
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double med = dists[mid];
  if (dists.size() % 2 == 0) {
    const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return med > 0.0 ? med : 1.0;
}

Tensor mmd_to_mean(const Tensor& features, const Tensor& pooled, const KernelSpec& kernel) {
  require_matrix(features, "mmd_to_mean");
  require_matrix(pooled, "mmd_to_mean");
  if (features.dim(1) != pooled.dim(1)) {
    throw DimensionError("mmd_to_mean: feature widths differ, " + shape_str(features.shape()) + " vs " +
                         shape_str(pooled.shape()));
  }
  kernel.validate();
  return mmd_with_sigma(features, pooled, kernel.kind, bandwidth(kernel, pooled));
}

Tensor margin_invariant_loss(const std::vector<Tensor>& features, const KernelSpec& kernel) {
  if (features.size() < 2) {
    throw ConfigError("margin_invariant_loss needs at least 2 domains, got " + std::to_string(features.size()),
                      "model.n_domains");
  }
  for (const Tensor& f : features) require_matrix(f, "margin_invariant_loss");
  kernel.validate();
  count(mir_calls);
  Tensor pooled = concat(features, 0);
  const double sigma = bandwidth(kernel, pooled);
  Tensor total;
  for (const Tensor& f : features) {
    Tensor m = mmd_with_sigma(f, pooled, kernel.kind, sigma);
    total = total.defined() ? add(total, m) : m;
  }
  return scale(total, 1.0 / static_cast<double>(features.size()));
}

Tensor intra_class_compactness(const Tensor& x, std::span<const int> y) {
  require_labels(x, y, "intra_class_compactness");
  return pair_mask_sum(x, y, true);
}

Tensor inter_class_separability(const Tensor& x, std::span<const int> y) {
  require_labels(x, y, "inter_class_separability");
  return pair_mask_sum(x, y, false);
}

ClassCenters class_centers(const Tensor& x, std::span<const int> y, std::size_t n_classes) {
  require_labels(x, y, "class_centers");
  count(center_calls);
  const std::size_t n = x.dim(0);
  std::vector<double> counts(n_classes, 0.0);
  for (int c : y) {
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes) {
      throw ContractError("class_centers: label " + std::to_string(c) + " outside [0, " +
                          std::to_string(n_classes) + ")");
    }
    counts[static_cast<std::size_t>(c)] += 1.0;
  }
  std::vector<double> avg(n_classes * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(y[i]);
    avg[c * n + i] = 1.0 / counts[c];
  }
  ClassCenters out;
  out.centers = matmul(Tensor::from({n_classes, n}, std::move(avg)), x);
  out.present.resize(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) out.present[c] = counts[c] > 0.0;
  return out;
}

Tensor cross_domain_center_distance(const ClassCenters& a, const ClassCenters& b) {
  if (a.present.size() != b.present.size() || a.centers.shape() != b.centers.shape()) {
    throw DimensionError("cross_domain_center_distance: center sets " + shape_str(a.centers.shape()) + " and " +
                         shape_str(b.centers.shape()) + " differ");
  }
  const std::size_t k = a.present.size();
  std::vector<double> mask(k, 0.0);
  std::size_t common = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (a.present[c] && b.present[c]) {
      mask[c] = 1.0;
      ++common;
    }
  }
  if (common == 0) {
    warn("cross_domain_center_distance: no class present in both domains, term set to 0");
    return Tensor::scalar(0.0);
  }
  Tensor dist = sqrt_zero_safe(sum(square(sub(a.centers, b.centers)), 1));
  return scale(sum(mul(dist, Tensor::from({k}, std::move(mask)))), 1.0 / static_cast<double>(common));
}

ConditionTerms condition_invariant_terms(const std::vector<Tensor>& features,
                                         const std::vector<std::vector<int>>& labels, double alpha,
                                         std::size_t n_classes, std::optional<double> floor) {
  if (features.size() < 2) {
    throw ConfigError("condition_invariant_loss needs at least 2 domains, got " + std::to_string(features.size()),
                      "model.n_domains");
  }
  if (labels.size() != features.size()) {
    throw ContractError("condition_invariant_loss: " + std::to_string(labels.size()) + " label lists for " +
                        std::to_string(features.size()) + " domains");
  }
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0", "train.alpha");
  count(cir_calls);

  ConditionTerms out;
  const std::size_t N = features.size();
  std::vector<ClassCenters> centers;
  Tensor total;
  for (std::size_t n = 0; n < N; ++n) {
    Tensor dc = intra_class_compactness(features[n], labels[n]);
    Tensor ds = inter_class_separability(features[n], labels[n]);
    out.delta_c.push_back(dc.item());
    out.delta_s.push_back(ds.item());
    Tensor term = sub(dc, scale(ds, alpha));
    total = total.defined() ? add(total, term) : term;
    centers.push_back(class_centers(features[n], labels[n], n_classes));
  }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = n + 1; m < N; ++m) {
      Tensor d = cross_domain_center_distance(centers[n], centers[m]);
      out.pair_d.push_back(d.item());
      total = add(total, d);
    }
  out.loss = floor ? clamp_min(total, *floor) : total;
  return out;
}

Tensor condition_invariant_loss(const std::vector<Tensor>& features, const std::vector<std::vector<int>>& labels,
                                double alpha, std::size_t n_classes, std::optional<double> floor) {
  return condition_invariant_terms(features, labels, alpha, n_classes, floor).loss;
}

Tensor classification_loss(const Tensor& logits, std::span<const int> y) {
  return cross_entropy(logits, y, "classification_loss");
}

Tensor domain_classification_loss(const Tensor& logits, std::span<const int> d) {
  return cross_entropy(logits, d, "domain_classification_loss");
}

LossCallCounts loss_call_counts() {
  return {mmd_calls.load(), mir_calls.load(), center_calls.load(), cir_calls.load()};
}

UncountedLossScope::UncountedLossScope() : previous_(counting) { counting = false; }
UncountedLossScope::~UncountedLossScope() { counting = previous_; }

void reset_loss_call_counts() {
  mmd_calls = 0;
  mir_calls = 0;
  center_calls = 0;
  cir_calls = 0;
}

}  // namespace eegdg
