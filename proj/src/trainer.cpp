#include "eegdg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "eegdg/errors.hpp"
#include "json.hpp"

namespace eegdg {

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* key, const std::string& msg) {
    if (!ok) throw ConfigError(std::string(key) + ": " + msg, key);
  };
  require(lr > 0.0 && std::isfinite(lr), "train.lr", "must be > 0");
  require(epochs >= 1, "train.epochs", "must be >= 1");
  require(batch_per_domain >= 1, "train.batch_per_domain", "must be >= 1");
  require(alpha >= 0.0, "train.alpha", "must be >= 0");
  require(beta1 >= 0.0, "train.beta1", "must be >= 0");
  require(beta2 >= 0.0, "train.beta2", "must be >= 0");
  require(beta_d >= 0.0, "train.beta_d", "must be >= 0");
  require(beta2 == 0.0 || alpha > 0.0, "train.alpha", "must be > 0 when the condition-invariant term is on");
  require(adam.beta_m >= 0.0 && adam.beta_m < 1.0, "train.adam_beta_m", "must lie in [0, 1)");
  require(adam.beta_v >= 0.0 && adam.beta_v < 1.0, "train.adam_beta_v", "must lie in [0, 1)");
  require(adam.eps > 0.0, "train.adam_eps", "must be > 0");
  require(!clip_norm || *clip_norm > 0.0, "train.clip_norm", "must be > 0");
  kernel.validate();
}

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               double lr, const AdamConfig& cfg) {
  if (grads.size() != params.size()) {
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].empty() && grads[i].size() != params[i].numel()) {
      throw ContractError("adam_step: gradient " + std::to_string(i) + " has " + std::to_string(grads[i].size()) +
                          " values, parameter has " + std::to_string(params[i].numel()));
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta_m, t);
  const double c2 = 1.0 - std::pow(cfg.beta_v, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i].empty() ? 0.0 : grads[i][j];
      m[j] = cfg.beta_m * m[j] + (1.0 - cfg.beta_m) * g;
      v[j] = cfg.beta_v * v[j] + (1.0 - cfg.beta_v) * g * g;
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

DomainSampler::DomainSampler(const std::vector<DomainDataset>& domains, std::size_t b, std::uint64_t seed,
                             bool with_replacement)
    : domains_(&domains), b_(b), with_replacement_(with_replacement), rng_(seed) {
  if (b == 0) throw ConfigError("batch size must be >= 1", "train.batch_per_domain");
  for (const auto& d : domains) {
    if (d.size() < b && !with_replacement) {
      throw ConfigError("domain " + std::to_string(d.domain_id) + " has " + std::to_string(d.size()) +
                            " samples, fewer than the batch size " + std::to_string(b),
                        "train.batch_per_domain");
    }
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng_);
    order_.push_back(std::move(idx));
    cursor_.push_back(0);
  }
}

std::vector<DomainBatch> DomainSampler::next() {
  std::vector<DomainBatch> out;
  for (std::size_t n = 0; n < domains_->size(); ++n) {
    const auto& ds = (*domains_)[n];
    std::vector<std::size_t> pick;
    if (ds.size() < b_) {
      std::uniform_int_distribution<std::size_t> u(0, ds.size() - 1);
      for (std::size_t i = 0; i < b_; ++i) pick.push_back(u(rng_));
    } else {
      if (cursor_[n] + b_ > order_[n].size()) {
        std::shuffle(order_[n].begin(), order_[n].end(), rng_);
        cursor_[n] = 0;
      }
      pick.assign(order_[n].begin() + static_cast<std::ptrdiff_t>(cursor_[n]),
                  order_[n].begin() + static_cast<std::ptrdiff_t>(cursor_[n] + b_));
      cursor_[n] += b_;
    }
    DomainDataset sub = ds.subset(pick);
    out.push_back({sub.x, std::move(sub.y), static_cast<int>(n)});
  }
  return out;
}

ModelConfig model_config_for(const TrainConfig& cfg, const std::vector<DomainDataset>& domains) {
  if (domains.empty()) throw ContractError("no source domains");
  ModelConfig m;
  m.extractor = cfg.extractor;
  m.branch_depth = cfg.branch_depth;
  m.branch_dim = cfg.branch_dim;
  m.n_domains = domains.size();
  m.n_classes = static_cast<std::size_t>(domains[0].class_count);
  m.n_channels = domains[0].channels();
  m.n_timesteps = domains[0].timesteps();
  m.seed = cfg.seed;
  return m;
}

StepLoss compute_loss(EegDgModel& model, const std::vector<DomainBatch>& batches, const TrainConfig& cfg,
                      bool train) {
  std::vector<Tensor> xs;
  std::vector<int> y_all;
  std::vector<int> d_all;
  std::vector<std::size_t> offsets;
  std::size_t rows = 0;
  for (const auto& b : batches) {
    xs.push_back(b.x);
    offsets.push_back(rows);
    rows += b.y.size();
    y_all.insert(y_all.end(), b.y.begin(), b.y.end());
    d_all.insert(d_all.end(), b.y.size(), b.d);
  }
  ForwardResult r = model.forward(xs.size() == 1 ? xs[0] : concat(xs, 0), train);

  StepLoss out;
  LossBreakdown& bd = out.breakdown;
  Tensor l_clc = classification_loss(r.logits, y_all);
  bd.l_clc = l_clc.item();
  out.total = l_clc;

  if (cfg.beta1 > 0.0 || cfg.beta2 > 0.0) {
    std::vector<Tensor> own;
    std::vector<std::vector<int>> labels;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      const auto n = static_cast<std::size_t>(batches[i].d);
      own.push_back(slice(r.branches.at(n), 0, offsets[i], batches[i].y.size()));
      labels.push_back(batches[i].y);
    }
    if (cfg.beta1 > 0.0) {
      Tensor l_mir = margin_invariant_loss(own, cfg.kernel);
      bd.l_mir = l_mir.item();
      out.total = add(out.total, scale(l_mir, cfg.beta1));
    }
    if (cfg.beta2 > 0.0) {
      auto terms = condition_invariant_terms(own, labels, cfg.alpha, model.config().n_classes, cfg.cir_floor);
      bd.l_cir = terms.loss.item();
      bd.delta_c = std::move(terms.delta_c);
      bd.delta_s = std::move(terms.delta_s);
      bd.pair_d = std::move(terms.pair_d);
      out.total = add(out.total, scale(terms.loss, cfg.beta2));
    }
  }
  if (cfg.beta_d > 0.0) {
    Tensor l_dom = domain_classification_loss(r.domain_logits, d_all);
    bd.l_dom = l_dom.item();
    out.total = add(out.total, scale(l_dom, cfg.beta_d));
  }
  bd.total = out.total.item();
  return out;
}

double average_mmd(EegDgModel& model, const std::vector<DomainDataset>& domains, const KernelSpec& kernel) {
  NoGradGuard guard;
  UncountedLossScope uncounted;
  constexpr std::size_t chunk = 64;
  std::vector<Tensor> own;
  for (std::size_t n = 0; n < domains.size(); ++n) {
    const auto& ds = domains[n];
    std::vector<Tensor> parts;
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
      const std::size_t len = std::min(chunk, ds.size() - start);
      Tensor z = model.extract(slice(ds.x, 0, start, len), false);
      parts.push_back(model.branch_features(z).at(n));
    }
    own.push_back(parts.size() == 1 ? parts[0] : concat(parts, 0));
  }
  return margin_invariant_loss(own, kernel).item();
}

std::string metrics_json_line(const EpochMetrics& m, bool include_wall_ms) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["l_clc"] = m.l_clc;
  j["l_mir"] = m.l_mir;
  j["l_cir"] = m.l_cir;
  j["l_dom"] = m.l_dom;
  j["total"] = m.total;
  j["avg_mmd"] = m.avg_mmd;
  if (include_wall_ms) j["wall_ms"] = m.wall_ms;
  if (m.target_acc) j["target_acc"] = *m.target_acc;
  return j.dump();
}

TrainResult train(const std::vector<DomainDataset>& domains, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (domains.size() < 2) {
    throw ConfigError("training needs at least 2 source domains, got " + std::to_string(domains.size()),
                      "sources");
  }
  for (const auto& d : domains) d.validate();
  check_compatible(domains);

  TrainResult result{EegDgModel(model_config_for(cfg, domains)), {}};
  EegDgModel& model = result.model;
  auto named = model.parameters();
  std::vector<Tensor> params;
  for (auto& p : named) params.push_back(p.tensor);
  AdamState adam;
  DomainSampler sampler(domains, cfg.batch_per_domain, cfg.seed ^ 0x5bd1e995ULL, cfg.sample_with_replacement);

  std::size_t min_size = domains[0].size();
  for (const auto& d : domains) min_size = std::min(min_size, d.size());
  const std::size_t iterations = std::max<std::size_t>(1, min_size / cfg.batch_per_domain);

  std::ofstream metrics;
  if (options.metrics_path) {
    metrics.open(*options.metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot open " + options.metrics_path->string() + " for writing");
  }
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
  std::vector<unsigned char> last_good = encode_checkpoint(model);

  auto diverged = [&](std::size_t epoch, std::size_t it, const LossBreakdown& bd, const std::string& what) {
    if (options.checkpoint_dir) io::write_file(*options.checkpoint_dir / "last_good.edgm", last_good);
    std::ostringstream msg;
    msg.precision(6);
    msg << what << " at epoch " << epoch << " iteration " << it << " (l_clc=" << bd.l_clc << " l_mir=" << bd.l_mir
        << " l_cir=" << bd.l_cir << " l_dom=" << bd.l_dom << " total=" << bd.total << ")";
    if (options.checkpoint_dir) msg << "; last good checkpoint kept at " << (*options.checkpoint_dir / "last_good.edgm").string();
    throw NumericError(msg.str());
  };

  std::vector<std::vector<double>> grads(params.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics em;
    em.epoch = epoch;
    for (std::size_t it = 0; it < iterations; ++it) {
      auto batches = sampler.next();
      StepLoss step = compute_loss(model, batches, cfg, true);
      const LossBreakdown& bd = step.breakdown;
      if (!std::isfinite(bd.total)) diverged(epoch, it, bd, "non-finite loss");

      for (Tensor& p : params) p.zero_grad();
      step.total.backward();
      double sq = 0.0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].has_grad()) {
          auto g = params[i].grad();
          grads[i].assign(g.begin(), g.end());
        } else {
          grads[i].clear();
        }
        for (double g : grads[i]) sq += g * g;
      }
      if (!std::isfinite(sq)) diverged(epoch, it, bd, "non-finite gradient");
      if (cfg.clip_norm && std::sqrt(sq) > *cfg.clip_norm) {
        const double f = *cfg.clip_norm / std::sqrt(sq);
        for (auto& g : grads)
          for (double& v : g) v *= f;
      }
      adam_step(params, grads, adam, cfg.lr, cfg.adam);

      em.l_clc += bd.l_clc;
      em.l_mir += bd.l_mir;
      em.l_cir += bd.l_cir;
      em.l_dom += bd.l_dom;
      em.total += bd.total;
      em.last = bd;
    }
    const double k = static_cast<double>(iterations);
    em.l_clc /= k;
    em.l_mir /= k;
    em.l_cir /= k;
    em.l_dom /= k;
    em.total /= k;
    em.avg_mmd = average_mmd(model, domains, cfg.kernel);
    em.last.avg_mmd = em.avg_mmd;
    if (cfg.early_metrics && options.epoch_hook) em.target_acc = options.epoch_hook(model, epoch);
    em.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    if (metrics.is_open()) {
      metrics << metrics_json_line(em, options.record_wall_ms) << '\n';
      metrics.flush();
    }
    last_good = encode_checkpoint(model);
    if (options.checkpoint_dir && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      io::write_file(*options.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".edgm"), last_good);
    }
    result.log.push_back(std::move(em));
  }
  return result;
}

}  // namespace eegdg
