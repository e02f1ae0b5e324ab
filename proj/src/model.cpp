#include "eegdg/model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

#include "binary_io.hpp"
#include "eegdg/errors.hpp"

namespace eegdg {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kInitStd = 0.02;

// N(0, std²) truncated at ±2 std by resampling.
Tensor trunc_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    double z = unit(rng);
    while (std::abs(z) > 2.0) z = unit(rng);
    x = z * kInitStd;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return Linear{trunc_normal({in, out}, rng), Tensor::zeros({out}, true)};
}

BatchNorm make_bn(std::size_t channels) {
  BatchNorm bn;
  bn.gamma = Tensor::full({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.buffers.running_mean.assign(channels, 0.0);
  bn.buffers.running_var.assign(channels, 1.0);
  return bn;
}

void push_linear(std::vector<NamedTensor>& out, const std::string& prefix, const Linear& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

void push_bn(std::vector<NamedTensor>& out, const std::string& prefix, const BatchNorm& bn) {
  out.push_back({prefix + ".gamma", bn.gamma});
  out.push_back({prefix + ".beta", bn.beta});
}

void push_bn_buffers(std::vector<NamedBuffer>& out, const std::string& prefix, BatchNorm& bn) {
  out.push_back({prefix + ".running_mean", &bn.buffers.running_mean});
  out.push_back({prefix + ".running_var", &bn.buffers.running_var});
}

}  // namespace

std::string to_string(ExtractorKind kind) {
  switch (kind) {
    case ExtractorKind::automatic: return "auto";
    case ExtractorKind::eegnet: return "eegnet";
    case ExtractorKind::dense: return "dense";
  }
  return "auto";
}

ExtractorKind extractor_kind_from_string(const std::string& name) {
  if (name == "auto") return ExtractorKind::automatic;
  if (name == "eegnet") return ExtractorKind::eegnet;
  if (name == "dense") return ExtractorKind::dense;
  throw ConfigError("unknown extractor kind '" + name + "' (expected auto, eegnet or dense)",
                    "model.extractor");
}

ExtractorKind ModelConfig::resolved_kind() const {
  if (extractor.kind != ExtractorKind::automatic) return extractor.kind;
  return n_timesteps > 1 ? ExtractorKind::eegnet : ExtractorKind::dense;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& key, const std::string& msg) {
    if (!ok) throw ConfigError(key + ": " + msg, key);
  };
  require(n_domains >= 1, "model.n_domains", "must be >= 1");
  require(n_classes >= 2, "model.n_classes", "must be >= 2");
  require(n_channels >= 1, "model.n_channels", "must be >= 1");
  require(n_timesteps >= 1, "model.n_timesteps", "must be >= 1");
  require(branch_depth >= 1, "model.branch_depth", "must be >= 1");
  require(branch_dim >= 1, "model.branch_dim", "must be >= 1");
  const auto& e = extractor;
  require(e.embedding_dim >= 1, "model.embedding_dim", "must be >= 1");
  require(e.dropout_p >= 0.0 && e.dropout_p < 1.0, "model.dropout_p", "must lie in [0, 1)");
  if (resolved_kind() == ExtractorKind::dense) {
    for (std::size_t h : e.dense_hidden) require(h >= 1, "model.dense_hidden", "widths must be >= 1");
    return;
  }
  require(!e.temporal_kernel_lengths.empty(), "model.temporal_kernel_lengths", "must not be empty");
  require(!e.block2_kernel_lengths.empty(), "model.block2_kernel_lengths", "must not be empty");
  require(e.filters_per_branch >= 1, "model.filters_per_branch", "must be >= 1");
  require(e.depth_multiplier >= 1, "model.depth_multiplier", "must be >= 1");
  require(e.pool1 >= 1, "model.pool1", "must be >= 1");
  require(e.pool2 >= 1, "model.pool2", "must be >= 1");
  for (std::size_t L : e.temporal_kernel_lengths) {
    require(L >= 1 && L <= n_timesteps, "model.temporal_kernel_lengths",
            "kernel length " + std::to_string(L) + " outside [1, " + std::to_string(n_timesteps) + "]");
  }
  const std::size_t t1 = n_timesteps / e.pool1;
  require(t1 >= 1, "model.pool1",
          "pool " + std::to_string(e.pool1) + " exceeds time axis " + std::to_string(n_timesteps));
  for (std::size_t l : e.block2_kernel_lengths) {
    require(l >= 1 && l <= t1, "model.block2_kernel_lengths",
            "kernel length " + std::to_string(l) + " outside [1, " + std::to_string(t1) + "]");
  }
  require(t1 / e.pool2 >= 1, "model.pool2",
          "pool " + std::to_string(e.pool2) + " exceeds time axis " + std::to_string(t1));
}

Tensor Linear::forward(const Tensor& x) const { return add_rowwise(matmul(x, weight), bias); }

Tensor BatchNorm::forward(const Tensor& x, bool train) {
  return batch_norm(x, gamma, beta, buffers, train);
}

EegDgModel::EegDgModel(ModelConfig config)
    : config_(std::move(config)), dropout_rng_(config_.seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  kind_ = config_.resolved_kind();
  std::mt19937_64 rng(config_.seed);
  const auto& e = config_.extractor;

  std::size_t flat = 0;
  if (kind_ == ExtractorKind::eegnet) {
    const std::size_t f1 = e.filters_per_branch;
    const std::size_t c1 = e.temporal_kernel_lengths.size() * f1;
    const std::size_t f2 = c1 * e.depth_multiplier;
    const std::size_t per_branch = f1 * e.depth_multiplier;
    for (std::size_t L : e.temporal_kernel_lengths) temporal_.push_back(trunc_normal({f1, 1, 1, L}, rng));
    spatial_ = trunc_normal({f2, 1, config_.n_channels, 1}, rng);
    bn1_ = make_bn(f2);
    for (std::size_t l : e.block2_kernel_lengths) {
      depthwise_.push_back(trunc_normal({f2, 1, 1, l}, rng));
      pointwise_.push_back(trunc_normal({per_branch, f2, 1, 1}, rng));
    }
    const std::size_t c2 = e.block2_kernel_lengths.size() * per_branch;
    bn2_ = make_bn(c2);
    flat = c2 * (config_.n_timesteps / e.pool1 / e.pool2);
  } else {
    std::size_t in = config_.n_channels * config_.n_timesteps;
    for (std::size_t h : e.dense_hidden) {
      hidden_.push_back(make_linear(in, h, rng));
      hidden_bn_.push_back(make_bn(h));
      in = h;
    }
    flat = in;
  }
  embed_ = make_linear(flat, e.embedding_dim, rng);

  for (std::size_t n = 0; n < config_.n_domains; ++n) {
    std::vector<Linear> layers;
    std::size_t in = e.embedding_dim;
    for (std::size_t k = 0; k < config_.branch_depth; ++k) {
      layers.push_back(make_linear(in, config_.branch_dim, rng));
      in = config_.branch_dim;
    }
    branches_.push_back(std::move(layers));
  }
  domain_head_ = make_linear(e.embedding_dim, config_.n_domains, rng);
  motion_head_ = make_linear(config_.branch_dim, config_.n_classes, rng);
}

Tensor EegDgModel::extract(const Tensor& x, bool train) {
  const std::size_t C = config_.n_channels, T = config_.n_timesteps;
  const bool ok3 = x.rank() == 3 && x.dim(1) == C && x.dim(2) == T;
  const bool ok4 = x.rank() == 4 && x.dim(1) == 1 && x.dim(2) == C && x.dim(3) == T;
  if (!ok3 && !ok4) {
    throw DimensionError("extract: expected [B x " + std::to_string(C) + " x " + std::to_string(T) +
                         "] input, got " + shape_str(x.shape()));
  }
  return kind_ == ExtractorKind::eegnet ? extract_eegnet(x, train) : extract_dense(x, train);
}

Tensor EegDgModel::extract_eegnet(const Tensor& x, bool train) {
  const auto& e = config_.extractor;
  const std::size_t B = x.dim(0);
  Tensor h = reshape(x, {B, 1, config_.n_channels, config_.n_timesteps});

  std::vector<Tensor> parts;
  for (const Tensor& k : temporal_) parts.push_back(conv2d(h, k, Conv2dOptions::same(1, k.dim(3))));
  h = concat(parts, 1);
  h = conv2d(h, spatial_, Conv2dOptions{.groups = h.dim(1)});
  h = elu(bn1_.forward(h, train));
  h = avg_pool2d(h, 1, e.pool1);
  h = dropout(h, e.dropout_p, train, dropout_rng_);

  parts.clear();
  for (std::size_t i = 0; i < depthwise_.size(); ++i) {
    const std::size_t l = depthwise_[i].dim(3);
    Tensor d = conv2d(h, depthwise_[i], Conv2dOptions::same(1, l, h.dim(1)));
    parts.push_back(conv2d(d, pointwise_[i]));
  }
  h = concat(parts, 1);
  h = elu(bn2_.forward(h, train));
  h = avg_pool2d(h, 1, e.pool2);
  h = dropout(h, e.dropout_p, train, dropout_rng_);
  h = reshape(h, {B, h.numel() / B});
  return embed_.forward(h);
}

Tensor EegDgModel::extract_dense(const Tensor& x, bool train) {
  const std::size_t B = x.dim(0);
  Tensor h = reshape(x, {B, config_.n_channels * config_.n_timesteps});
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    h = elu(hidden_bn_[i].forward(hidden_[i].forward(h), train));
    h = dropout(h, config_.extractor.dropout_p, train, dropout_rng_);
  }
  return embed_.forward(h);
}

std::vector<Tensor> EegDgModel::branch_features(const Tensor& z) const {
  std::vector<Tensor> out;
  out.reserve(branches_.size());
  for (const auto& layers : branches_) {
    Tensor h = z;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (k > 0) h = elu(h);
      h = layers[k].forward(h);
    }
    out.push_back(h);
  }
  return out;
}

Tensor EegDgModel::domain_logits(const Tensor& z) const { return domain_head_.forward(z); }

Tensor EegDgModel::domain_weights(const Tensor& z) const { return softmax(domain_logits(z), 1); }

Tensor EegDgModel::classify(const Tensor& fused) const { return motion_head_.forward(fused); }

ForwardResult EegDgModel::forward(const Tensor& x, bool train) {
  ForwardResult r;
  r.features = extract(x, train);
  r.branches = branch_features(r.features);
  r.domain_logits = domain_logits(r.features);
  r.weights = softmax(r.domain_logits, 1);
  r.fused = fuse(r.weights, r.branches);
  r.logits = classify(r.fused);
  return r;
}

std::vector<int> EegDgModel::predict(const Tensor& x) {
  NoGradGuard guard;
  return argmax_rows(forward(x, false).logits);
}

std::vector<NamedTensor> EegDgModel::parameters() const {
  std::vector<NamedTensor> out;
  if (kind_ == ExtractorKind::eegnet) {
    for (std::size_t i = 0; i < temporal_.size(); ++i) out.push_back({"g.temporal." + std::to_string(i), temporal_[i]});
    out.push_back({"g.spatial", spatial_});
    push_bn(out, "g.bn1", bn1_);
    for (std::size_t i = 0; i < depthwise_.size(); ++i) {
      out.push_back({"g.depthwise." + std::to_string(i), depthwise_[i]});
      out.push_back({"g.pointwise." + std::to_string(i), pointwise_[i]});
    }
    push_bn(out, "g.bn2", bn2_);
  } else {
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
      push_linear(out, "g.hidden." + std::to_string(i), hidden_[i]);
      push_bn(out, "g.hidden_bn." + std::to_string(i), hidden_bn_[i]);
    }
  }
  push_linear(out, "g.embed", embed_);
  for (std::size_t n = 0; n < branches_.size(); ++n)
    for (std::size_t k = 0; k < branches_[n].size(); ++k)
      push_linear(out, "f." + std::to_string(n) + "." + std::to_string(k), branches_[n][k]);
  push_linear(out, "f_d", domain_head_);
  push_linear(out, "f_c", motion_head_);
  return out;
}

std::vector<NamedBuffer> EegDgModel::buffers() {
  std::vector<NamedBuffer> out;
  if (kind_ == ExtractorKind::eegnet) {
    push_bn_buffers(out, "g.bn1", bn1_);
    push_bn_buffers(out, "g.bn2", bn2_);
  } else {
    for (std::size_t i = 0; i < hidden_bn_.size(); ++i) push_bn_buffers(out, "g.hidden_bn." + std::to_string(i), hidden_bn_[i]);
  }
  return out;
}

Tensor fuse(const Tensor& weights, const std::vector<Tensor>& branch_outs) {
  if (weights.rank() != 2) throw DimensionError("fuse: weights must be 2-D, got " + shape_str(weights.shape()));
  if (branch_outs.size() != weights.dim(1)) {
    throw ContractError("fuse: " + std::to_string(branch_outs.size()) + " branch outputs for " +
                        std::to_string(weights.dim(1)) + " weights per sample");
  }
  Tensor out;
  for (std::size_t n = 0; n < branch_outs.size(); ++n) {
    Tensor term = scale_rows(branch_outs[n], column(weights, n));
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows: expected 2-D, got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto v = logits.data();
  std::vector<int> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (v[i * cols + j] > v[i * cols + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  const auto& e = cfg.extractor;
  nlohmann::ordered_json j;
  j["model.extractor"] = to_string(e.kind);
  j["model.temporal_kernel_lengths"] = e.temporal_kernel_lengths;
  j["model.filters_per_branch"] = e.filters_per_branch;
  j["model.depth_multiplier"] = e.depth_multiplier;
  j["model.block2_kernel_lengths"] = e.block2_kernel_lengths;
  j["model.pool1"] = e.pool1;
  j["model.pool2"] = e.pool2;
  j["model.dropout_p"] = e.dropout_p;
  j["model.embedding_dim"] = e.embedding_dim;
  j["model.dense_hidden"] = e.dense_hidden;
  j["model.branch_depth"] = cfg.branch_depth;
  j["model.branch_dim"] = cfg.branch_dim;
  j["model.n_domains"] = cfg.n_domains;
  j["model.n_classes"] = cfg.n_classes;
  j["model.n_channels"] = cfg.n_channels;
  j["model.n_timesteps"] = cfg.n_timesteps;
  j["model.seed"] = cfg.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig cfg;
  auto& e = cfg.extractor;
  try {
    const auto j = nlohmann::json::parse(text);
    e.kind = extractor_kind_from_string(j.at("model.extractor").get<std::string>());
    e.temporal_kernel_lengths = j.at("model.temporal_kernel_lengths").get<std::vector<std::size_t>>();
    e.filters_per_branch = j.at("model.filters_per_branch").get<std::size_t>();
    e.depth_multiplier = j.at("model.depth_multiplier").get<std::size_t>();
    e.block2_kernel_lengths = j.at("model.block2_kernel_lengths").get<std::vector<std::size_t>>();
    e.pool1 = j.at("model.pool1").get<std::size_t>();
    e.pool2 = j.at("model.pool2").get<std::size_t>();
    e.dropout_p = j.at("model.dropout_p").get<double>();
    e.embedding_dim = j.at("model.embedding_dim").get<std::size_t>();
    e.dense_hidden = j.at("model.dense_hidden").get<std::vector<std::size_t>>();
    cfg.branch_depth = j.at("model.branch_depth").get<std::size_t>();
    cfg.branch_dim = j.at("model.branch_dim").get<std::size_t>();
    cfg.n_domains = j.at("model.n_domains").get<std::size_t>();
    cfg.n_classes = j.at("model.n_classes").get<std::size_t>();
    cfg.n_channels = j.at("model.n_channels").get<std::size_t>();
    cfg.n_timesteps = j.at("model.n_timesteps").get<std::size_t>();
    cfg.seed = j.at("model.seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("checkpoint config: ") + ex.what(), 0);
  }
  return cfg;
}

std::vector<unsigned char> encode_checkpoint(EegDgModel& model) {
  io::ByteWriter w;
  w.magic("EDGM");
  w.u32(kCheckpointVersion);
  w.str(model_config_to_json(model.config()));
  const auto params = model.parameters();
  const auto bufs = model.buffers();
  w.u32(static_cast<std::uint32_t>(params.size() + bufs.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.tensor.data()) w.f64(v);
  }
  for (const auto& b : bufs) {
    w.str(b.name);
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(b.values->size()));
    for (double v : *b.values) w.f64(v);
  }
  return std::move(w.bytes());
}

EegDgModel decode_checkpoint(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("EDGM");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::size_t config_at = r.offset();
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(r.str("config"));
    cfg.validate();
  } catch (const ConfigError& ex) {
    throw FormatError(std::string("checkpoint config: ") + ex.what(), config_at);
  } catch (const FormatError& ex) {
    throw FormatError(ex.detail(), config_at);
  }
  EegDgModel model(cfg);
  auto params = model.parameters();
  auto bufs = model.buffers();

  const std::uint32_t count = r.u32("entry count");
  if (count != params.size() + bufs.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " entries, model expects " +
                          std::to_string(params.size() + bufs.size()),
                      r.offset() - 4);
  }
  std::vector<bool> seen(count, false);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.offset();
    const std::string name = r.str("entry name");
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("dim"));

    std::span<double> dest;
    Shape expected;
    std::size_t slot = 0;
    bool found = false;
    for (std::size_t k = 0; k < params.size() && !found; ++k) {
      if (params[k].name == name) {
        dest = params[k].tensor.mutable_data();
        expected = params[k].tensor.shape();
        slot = k;
        found = true;
      }
    }
    for (std::size_t k = 0; k < bufs.size() && !found; ++k) {
      if (bufs[k].name == name) {
        dest = std::span<double>(*bufs[k].values);
        expected = {bufs[k].values->size()};
        slot = params.size() + k;
        found = true;
      }
    }
    if (!found) throw FormatError("unknown checkpoint entry '" + name + "'", entry_at);
    if (seen[slot]) throw FormatError("duplicate checkpoint entry '" + name + "'", entry_at);
    if (shape != expected) {
      throw FormatError("entry '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(expected),
                        entry_at);
    }
    seen[slot] = true;
    const auto values = r.f64_array(dest.size(), name.c_str());
    std::copy(values.begin(), values.end(), dest.begin());
  }
  r.expect_end();
  return model;
}

void save_checkpoint(EegDgModel& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(model));
}

EegDgModel load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace eegdg
