#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "eegdg/eval.hpp"
#include "eegdg/signal.hpp"
#include "eegdg/synthetic.hpp"
#include "eegdg/trainer.hpp"

namespace eegdg {

struct BaselineConfig {
  std::size_t knn_k = 3;
  double lda_ridge = 1e-6;
  double linear_l2 = 1e-3;
  double linear_lr = 0.1;
  std::size_t linear_iterations = 500;
  std::uint64_t seed = 0;

  std::vector<BaselineSpec> specs() const;  // knn, lda, linear
};

// Every tunable of a run. Serialized as a flat JSON object with dotted keys
// ("train.lr", "model.pool1", ...); see config_to_json for the full list.
struct RunConfig {
  SimConfig sim;
  TrainConfig train;
  PreprocessOptions preprocess;
  int split_domains = 1;  // preprocess: number of domains to split one recording into
  int domain_id = 0;      // preprocess: id of the first output domain
  std::uint64_t split_seed = 0;
  BaselineConfig baselines;
  std::size_t ablate_seeds = 1;
};

// Applies the keys present in `json_text` on top of the defaults. Unknown
// keys and ill-typed values raise ConfigError naming the key.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
// Full resolved configuration, one key per field.
std::string config_to_json(const RunConfig& cfg, int indent = -1);

}  // namespace eegdg
