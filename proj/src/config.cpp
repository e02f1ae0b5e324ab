#include "eegdg/config.hpp"

#include <concepts>
#include <fstream>
#include <sstream>

#include "eegdg/errors.hpp"
#include "json.hpp"

namespace eegdg {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void bad_type(const std::string& key, const char* want, const json& v) {
  throw ConfigError("config key '" + key + "' expects " + want + ", got " + v.dump(), key);
}

void read(const std::string& key, const json& v, double& out) {
  if (!v.is_number()) bad_type(key, "a number", v);
  out = v.get<double>();
}

void read(const std::string& key, const json& v, int& out) {
  if (!v.is_number_integer()) bad_type(key, "an integer", v);
  out = v.get<int>();
}

template <std::unsigned_integral U>
void read(const std::string& key, const json& v, U& out) {
  if (!v.is_number_unsigned()) bad_type(key, "a non-negative integer", v);
  out = v.get<U>();
}

void read(const std::string& key, const json& v, bool& out) {
  if (!v.is_boolean()) bad_type(key, "true or false", v);
  out = v.get<bool>();
}

void read(const std::string& key, const json& v, std::optional<double>& out) {
  if (v.is_null()) {
    out.reset();
    return;
  }
  double d = 0.0;
  read(key, v, d);
  out = d;
}

void read(const std::string& key, const json& v, std::vector<std::size_t>& out) {
  if (!v.is_array()) bad_type(key, "an array of non-negative integers", v);
  std::vector<std::size_t> tmp;
  for (const json& e : v) {
    if (!e.is_number_unsigned()) bad_type(key, "an array of non-negative integers", v);
    tmp.push_back(e.get<std::size_t>());
  }
  out = std::move(tmp);
}

void read(const std::string& key, const json& v, ExtractorKind& out) {
  if (!v.is_string()) bad_type(key, "\"auto\", \"eegnet\" or \"dense\"", v);
  try {
    out = extractor_kind_from_string(v.get<std::string>());
  } catch (const ConfigError&) {
    bad_type(key, "\"auto\", \"eegnet\" or \"dense\"", v);
  }
}

void read(const std::string& key, const json& v, KernelKind& out) {
  if (v == "rbf") {
    out = KernelKind::rbf;
  } else if (v == "linear") {
    out = KernelKind::linear;
  } else {
    bad_type(key, "\"rbf\" or \"linear\"", v);
  }
}

json write(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json write(ExtractorKind k) { return to_string(k); }
json write(KernelKind k) { return k == KernelKind::rbf ? "rbf" : "linear"; }
template <class T>
json write(const T& v) {
  return json(v);
}

// The kernel bandwidth is either the string "median" or a positive number.
struct SigmaField {
  KernelSpec* spec;
};

void read(const std::string& key, const json& v, SigmaField& out) {
  if (v == "median") {
    out.spec->median_heuristic = true;
    return;
  }
  if (!v.is_number()) bad_type(key, "\"median\" or a number", v);
  out.spec->median_heuristic = false;
  out.spec->sigma = v.get<double>();
}

json write(const SigmaField& f) {
  return f.spec->median_heuristic ? json("median") : json(f.spec->sigma);
}

template <class Visitor>
void visit_fields(RunConfig& c, Visitor&& f) {
  f("sim.n_source_domains", c.sim.n_source_domains);
  f("sim.n_target_domains", c.sim.n_target_domains);
  f("sim.n_classes", c.sim.n_classes);
  f("sim.samples_per_class", c.sim.samples_per_class);
  f("sim.feature_dim", c.sim.feature_dim);
  f("sim.class_center_scale", c.sim.class_center_scale);
  f("sim.domain_shift_scale", c.sim.domain_shift_scale);
  f("sim.domain_rotation_max_rad", c.sim.domain_rotation_max_rad);
  f("sim.per_class_std", c.sim.per_class_std);
  f("sim.noise_anisotropy", c.sim.noise_anisotropy);
  f("sim.seed", c.sim.seed);

  f("train.lr", c.train.lr);
  f("train.batch_per_domain", c.train.batch_per_domain);
  f("train.epochs", c.train.epochs);
  f("train.alpha", c.train.alpha);
  f("train.beta1", c.train.beta1);
  f("train.beta2", c.train.beta2);
  f("train.beta_d", c.train.beta_d);
  f("train.adam_beta_m", c.train.adam.beta_m);
  f("train.adam_beta_v", c.train.adam.beta_v);
  f("train.adam_eps", c.train.adam.eps);
  f("train.seed", c.train.seed);
  f("train.kernel", c.train.kernel.kind);
  SigmaField sigma{&c.train.kernel};
  f("train.kernel_sigma", sigma);
  f("train.checkpoint_every", c.train.checkpoint_every);
  f("train.early_metrics", c.train.early_metrics);
  f("train.sample_with_replacement", c.train.sample_with_replacement);
  f("train.clip_norm", c.train.clip_norm);
  f("train.cir_floor", c.train.cir_floor);

  auto& e = c.train.extractor;
  f("model.extractor", e.kind);
  f("model.temporal_kernel_lengths", e.temporal_kernel_lengths);
  f("model.filters_per_branch", e.filters_per_branch);
  f("model.depth_multiplier", e.depth_multiplier);
  f("model.block2_kernel_lengths", e.block2_kernel_lengths);
  f("model.pool1", e.pool1);
  f("model.pool2", e.pool2);
  f("model.dropout_p", e.dropout_p);
  f("model.embedding_dim", e.embedding_dim);
  f("model.dense_hidden", e.dense_hidden);
  f("model.branch_depth", c.train.branch_depth);
  f("model.branch_dim", c.train.branch_dim);

  f("preprocess.lo_hz", c.preprocess.lo_hz);
  f("preprocess.hi_hz", c.preprocess.hi_hz);
  f("preprocess.order", c.preprocess.order);
  f("preprocess.start_offset_s", c.preprocess.start_offset_s);
  f("preprocess.length_s", c.preprocess.length_s);
  f("preprocess.split_domains", c.split_domains);
  f("preprocess.domain_id", c.domain_id);
  f("preprocess.split_seed", c.split_seed);

  f("baselines.knn_k", c.baselines.knn_k);
  f("baselines.lda_ridge", c.baselines.lda_ridge);
  f("baselines.linear_l2", c.baselines.linear_l2);
  f("baselines.linear_lr", c.baselines.linear_lr);
  f("baselines.linear_iterations", c.baselines.linear_iterations);
  f("baselines.seed", c.baselines.seed);

  f("ablate.seeds", c.ablate_seeds);
}

void validate(const RunConfig& c) {
  c.sim.validate();
  c.train.validate();
  const auto& p = c.preprocess;
  if (!(p.lo_hz > 0.0 && p.hi_hz > p.lo_hz)) {
    throw ConfigError("band edges must satisfy 0 < lo_hz < hi_hz", "preprocess.hi_hz");
  }
  if (p.order < 1) throw ConfigError("filter order must be >= 1", "preprocess.order");
  if (!(p.length_s > 0.0)) throw ConfigError("window length must be > 0", "preprocess.length_s");
  if (p.start_offset_s < 0.0) throw ConfigError("start offset must be >= 0", "preprocess.start_offset_s");
  if (c.split_domains < 1) throw ConfigError("split_domains must be >= 1", "preprocess.split_domains");
  if (c.domain_id < 0) throw ConfigError("domain_id must be >= 0", "preprocess.domain_id");
  if (c.baselines.knn_k < 1) throw ConfigError("knn_k must be >= 1", "baselines.knn_k");
  if (!(c.baselines.lda_ridge >= 0.0)) throw ConfigError("lda_ridge must be >= 0", "baselines.lda_ridge");
  if (!(c.baselines.linear_lr > 0.0)) throw ConfigError("linear_lr must be > 0", "baselines.linear_lr");
  if (!(c.baselines.linear_l2 >= 0.0)) throw ConfigError("linear_l2 must be >= 0", "baselines.linear_l2");
  if (c.ablate_seeds < 1) throw ConfigError("ablate.seeds must be >= 1", "ablate.seeds");
}

}  // namespace

std::vector<BaselineSpec> BaselineConfig::specs() const {
  BaselineSpec knn;
  knn.kind = BaselineKind::knn;
  knn.k = knn_k;
  BaselineSpec lda;
  lda.kind = BaselineKind::lda;
  lda.ridge = lda_ridge;
  BaselineSpec lin;
  lin.kind = BaselineKind::linear;
  lin.l2 = linear_l2;
  lin.learning_rate = linear_lr;
  lin.iterations = linear_iterations;
  lin.seed = seed;
  return {knn, lda, lin};
}

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object with dotted keys");

  RunConfig cfg;
  for (const auto& [key, value] : doc.items()) {
    bool found = false;
    visit_fields(cfg, [&](const char* name, auto& field) {
      if (!found && key == name) {
        read(key, value, field);
        found = true;
      }
    });
    if (!found) throw ConfigError("unknown config key '" + key + "'", key);
  }
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const RunConfig& cfg, int indent) {
  RunConfig copy = cfg;
  json doc = json::object();
  visit_fields(copy, [&](const char* name, auto& field) { doc[name] = write(field); });
  return doc.dump(indent);
}

}  // namespace eegdg
