#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "eegdg/dataset.hpp"
#include "eegdg/losses.hpp"
#include "eegdg/model.hpp"

namespace eegdg {

struct AdamConfig {
  double beta_m = 0.9;
  double beta_v = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double lr = 0.0005;
  std::size_t batch_per_domain = 8;
  std::size_t epochs = 500;
  double alpha = 0.1;
  double beta1 = 0.1;  // margin-invariant weight
  double beta2 = 0.1;  // condition-invariant weight
  double beta_d = 1.0; // domain-classifier weight
  AdamConfig adam;
  std::uint64_t seed = 1;
  KernelSpec kernel;
  ExtractorConfig extractor;
  std::size_t branch_depth = 2;
  std::size_t branch_dim = 32;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  bool early_metrics = false;        // per-epoch target accuracy via the epoch hook
  bool sample_with_replacement = false;
  std::optional<double> clip_norm;   // global gradient norm clip
  std::optional<double> cir_floor;   // clamp floor for the condition-invariant loss

  void validate() const;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

// Bias-corrected Adam. grads[i] may be empty (treated as zero). Throws
// NumericError on a non-finite gradient, leaving parameters untouched.
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               double lr, const AdamConfig& cfg);

struct DomainBatch {
  Tensor x;
  std::vector<int> y;
  int d = 0;  // position in the source list
};

// Per-domain epoch-shuffled cursors: every domain yields `b` samples per
// draw, without replacement until its permutation is exhausted.
class DomainSampler {
 public:
  DomainSampler(const std::vector<DomainDataset>& domains, std::size_t b, std::uint64_t seed,
                bool with_replacement = false);
  std::vector<DomainBatch> next();
  std::size_t batch_size() const { return b_; }

 private:
  const std::vector<DomainDataset>* domains_;
  std::size_t b_;
  bool with_replacement_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double l_clc = 0.0;
  double l_mir = 0.0;
  double l_cir = 0.0;
  double l_dom = 0.0;
  double total = 0.0;
  double avg_mmd = 0.0;
  double wall_ms = 0.0;
  std::optional<double> target_acc;
  LossBreakdown last;  // breakdown of the epoch's final iteration
};

struct TrainOptions {
  // Epoch-level JSON lines are appended here when set.
  std::optional<std::filesystem::path> metrics_path;
  bool record_wall_ms = true;
  // Periodic and last-good checkpoints go here when set.
  std::optional<std::filesystem::path> checkpoint_dir;
  // Called after every epoch when early_metrics is on; returns target
  // accuracy for reporting only.
  std::function<double(EegDgModel&, std::size_t epoch)> epoch_hook;
};

struct TrainResult {
  EegDgModel model;
  std::vector<EpochMetrics> log;
};

ModelConfig model_config_for(const TrainConfig& cfg, const std::vector<DomainDataset>& domains);

// Forward pass and objective for one set of per-domain batches. Alignment
// losses use each domain's own branch; classification uses fused features.
struct StepLoss {
  Tensor total;
  LossBreakdown breakdown;
};
StepLoss compute_loss(EegDgModel& model, const std::vector<DomainBatch>& batches, const TrainConfig& cfg,
                      bool train = true);

// Margin-invariant loss over full source domains in eval mode.
double average_mmd(EegDgModel& model, const std::vector<DomainDataset>& domains, const KernelSpec& kernel);

TrainResult train(const std::vector<DomainDataset>& domains, const TrainConfig& cfg,
                  const TrainOptions& options = {});

std::string metrics_json_line(const EpochMetrics& m, bool include_wall_ms);

}  // namespace eegdg
