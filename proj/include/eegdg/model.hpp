#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eegdg/tensor.hpp"

namespace eegdg {

// `automatic` picks the multi-scale convolutional extractor for time series
// (n_timesteps > 1) and the dense extractor for plain feature vectors.
enum class ExtractorKind { automatic, eegnet, dense };

std::string to_string(ExtractorKind kind);
ExtractorKind extractor_kind_from_string(const std::string& name);

struct ExtractorConfig {
  ExtractorKind kind = ExtractorKind::automatic;
  // block 1: parallel temporal convolutions (1 × L), "same" padding
  std::vector<std::size_t> temporal_kernel_lengths{16, 32, 64, 128};
  std::size_t filters_per_branch = 4;  // F1
  std::size_t depth_multiplier = 2;    // D, spatial (C × 1) depthwise conv
  // block 2: parallel separable convolutions (depthwise 1 × l, then pointwise)
  std::vector<std::size_t> block2_kernel_lengths{4, 8, 16, 32};
  std::size_t pool1 = 4;
  std::size_t pool2 = 8;
  double dropout_p = 0.25;
  std::size_t embedding_dim = 64;
  // dense extractor: hidden widths, each Linear → BatchNorm → ELU → Dropout
  std::vector<std::size_t> dense_hidden{64};
};

struct ModelConfig {
  ExtractorConfig extractor;
  std::size_t branch_depth = 2;  // K fully connected layers per branch
  std::size_t branch_dim = 32;
  std::size_t n_domains = 3;
  std::size_t n_classes = 4;
  std::size_t n_channels = 1;
  std::size_t n_timesteps = 1;
  std::uint64_t seed = 0;

  ExtractorKind resolved_kind() const;
  // Throws ConfigError on inconsistent sizes (e.g. a kernel longer than the
  // time axis it is applied to).
  void validate() const;
};

struct Linear {
  Tensor weight;  // [in × out]
  Tensor bias;    // [out]
  Tensor forward(const Tensor& x) const;
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  BatchNormBuffers buffers;
  Tensor forward(const Tensor& x, bool train);
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

struct ForwardResult {
  Tensor features;                // g(x)            [B × embedding_dim]
  std::vector<Tensor> branches;   // f_n(g(x))       N × [B × branch_dim]
  Tensor domain_logits;           // f_d(g(x))       [B × N]
  Tensor weights;                 // softmax         [B × N]
  Tensor fused;                   // Σ w_n f_n(g(x)) [B × branch_dim]
  Tensor logits;                  // f_c(fused)      [B × n_classes]
};

// Shared extractor g, per-domain branch heads f_1..f_N, domain classifier f_d
// and motion classifier f_c.
class EegDgModel {
 public:
  explicit EegDgModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  // x is [B × C × T] or [B × 1 × C × T].
  Tensor extract(const Tensor& x, bool train);
  std::vector<Tensor> branch_features(const Tensor& z) const;
  Tensor domain_logits(const Tensor& z) const;
  Tensor domain_weights(const Tensor& z) const;
  Tensor classify(const Tensor& fused) const;
  ForwardResult forward(const Tensor& x, bool train);

  // Eval mode, no graph; argmax with lowest index on ties.
  std::vector<int> predict(const Tensor& x);

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedBuffer> buffers();

  std::vector<Linear>& branch(std::size_t n) { return branches_.at(n); }
  Linear& domain_classifier() { return domain_head_; }
  Linear& motion_classifier() { return motion_head_; }

  // Reseeds the dropout stream.
  void seed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

 private:
  Tensor extract_eegnet(const Tensor& x, bool train);
  Tensor extract_dense(const Tensor& x, bool train);

  ModelConfig config_;
  ExtractorKind kind_;
  std::mt19937_64 dropout_rng_;

  // eegnet
  std::vector<Tensor> temporal_;
  Tensor spatial_;
  BatchNorm bn1_;
  std::vector<Tensor> depthwise_;
  std::vector<Tensor> pointwise_;
  BatchNorm bn2_;
  // dense
  std::vector<Linear> hidden_;
  std::vector<BatchNorm> hidden_bn_;

  Linear embed_;
  std::vector<std::vector<Linear>> branches_;
  Linear domain_head_;
  Linear motion_head_;
};

// x_fused = Σ_n w[:, n] · outs[n], per sample.
Tensor fuse(const Tensor& weights, const std::vector<Tensor>& branch_outs);

// Index of the largest entry per row, lowest index on ties.
std::vector<int> argmax_rows(const Tensor& logits);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// EDGM checkpoint, little-endian: "EDGM", u32 version=1, config echo as a
// length-prefixed JSON string, u32 entry count, then per entry: u32 name
// length, name bytes, u32 rank, rank × u32 dims, f64 payload.
void save_checkpoint(EegDgModel& model, const std::filesystem::path& path);
EegDgModel load_checkpoint(const std::filesystem::path& path);
std::vector<unsigned char> encode_checkpoint(EegDgModel& model);
EegDgModel decode_checkpoint(std::span<const unsigned char> bytes);

}  // namespace eegdg
