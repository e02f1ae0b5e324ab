#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eegdg/dataset.hpp"

namespace eegdg {

class EegDgModel;

struct MetricsReport {
  double accuracy = 0.0;
  double kappa = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  std::size_t n_samples = 0;
};

double accuracy(std::span<const int> pred, std::span<const int> truth);
// (acc - 1/C) / (1 - 1/C)
double kappa(double acc, std::size_t class_count);
std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const int> pred, std::span<const int> truth,
                                                       std::size_t class_count);
MetricsReport make_report(std::span<const int> pred, std::span<const int> truth, std::size_t class_count);

// Eval-mode predictions in chunks of `chunk` samples. Throws ContractError
// when the dataset does not match the model's input shape or class count.
std::vector<int> predict_dataset(EegDgModel& model, const DomainDataset& ds, std::size_t chunk = 32);
MetricsReport evaluate_on_target(EegDgModel& model, const DomainDataset& target);

// Classical baselines on flattened inputs.
enum class BaselineKind { knn, lda, linear };

struct BaselineSpec {
  BaselineKind kind = BaselineKind::knn;
  std::size_t k = 3;          // knn neighbours
  double ridge = 1e-6;        // lda covariance ridge
  double l2 = 1e-3;           // linear: weight decay
  double learning_rate = 0.1; // linear: gradient descent step
  std::size_t iterations = 500;
  std::uint64_t seed = 0;     // linear: weight init
};

std::string baseline_name(const BaselineSpec& spec);

// Concatenates datasets with matching shapes and class counts.
DomainDataset pool_domains(const std::vector<DomainDataset>& domains);

// knn: majority vote among the k Euclidean nearest, ties to the smallest label.
// lda: shared-covariance Gaussian discriminant with ridge λI.
// linear: one-vs-rest squared-hinge classifier with L2 penalty trained by full
// batch gradient descent on standardized features.
std::vector<int> baseline_fit_predict(const BaselineSpec& spec, const DomainDataset& train,
                                      const DomainDataset& test);

// Projection of row-major data [n × d] onto its top principal components,
// centred. Each component is oriented so that its largest-magnitude loading
// is positive. Missing components (d < count) are zero.
std::vector<double> pca_project(std::span<const double> rows, std::size_t n, std::size_t d,
                                std::size_t count = 2);

enum class FeatureStage { extractor, branch, fused };
std::string to_string(FeatureStage stage);
FeatureStage feature_stage_from_string(const std::string& name);

// CSV columns: domain_id,label,split,stage,f0..f{d-1},pc1,pc2. The branch
// stage takes each source sample through its own domain's branch and has no
// target rows. Returns the number of rows written.
std::size_t export_features(EegDgModel& model, const std::vector<DomainDataset>& sources,
                            const std::vector<DomainDataset>& targets, FeatureStage stage,
                            const std::filesystem::path& path);

}  // namespace eegdg
