#include "eegdg/synthetic.hpp"

#include <cmath>
#include <random>

#include "eegdg/errors.hpp"

namespace eegdg {

void SimConfig::validate() const {
  auto positive = [](int v, const char* key) {
    if (v < 1) throw ConfigError(std::string("sim.") + key + " must be >= 1", std::string("sim.") + key);
  };
  auto nonneg = [](double v, const char* key) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string("sim.") + key + " must be a finite value >= 0", std::string("sim.") + key);
    }
  };
  positive(n_source_domains, "n_source_domains");
  positive(n_target_domains, "n_target_domains");
  positive(n_classes, "n_classes");
  positive(samples_per_class, "samples_per_class");
  positive(feature_dim, "feature_dim");
  nonneg(class_center_scale, "class_center_scale");
  nonneg(domain_shift_scale, "domain_shift_scale");
  nonneg(domain_rotation_max_rad, "domain_rotation_max_rad");
  nonneg(per_class_std, "per_class_std");
  nonneg(noise_anisotropy, "noise_anisotropy");
}

namespace {

DomainDataset make_domain(const SimConfig& cfg, const std::vector<std::vector<double>>& centers,
                          int domain_id, std::mt19937_64& rng) {
  const std::size_t d = static_cast<std::size_t>(cfg.feature_dim);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);

  // per-plane rotation angles, translation, noise scales
  std::vector<double> angles(d > 1 ? d - 1 : 0);
  for (double& a : angles) a = sym(rng) * cfg.domain_rotation_max_rad;
  std::vector<double> shift(d);
  for (double& t : shift) t = unit(rng) * cfg.domain_shift_scale;
  std::vector<double> noise_scale(d);
  for (double& s : noise_scale) s = std::exp(sym(rng) * cfg.noise_anisotropy);

  auto rotate = [&](std::vector<double>& v) {
    for (std::size_t p = 0; p + 1 < d; ++p) {
      const double c = std::cos(angles[p]), s = std::sin(angles[p]);
      const double a = v[p], b = v[p + 1];
      v[p] = c * a - s * b;
      v[p + 1] = s * a + c * b;
    }
  };

  const std::size_t n = static_cast<std::size_t>(cfg.n_classes * cfg.samples_per_class);
  std::vector<double> values;
  values.reserve(n * d);
  std::vector<int> labels;
  labels.reserve(n);
  std::vector<double> v(d);
  for (int k = 0; k < cfg.n_classes; ++k) {
    for (int i = 0; i < cfg.samples_per_class; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        v[j] = centers[static_cast<std::size_t>(k)][j] + noise_scale[j] * cfg.per_class_std * unit(rng);
      }
      rotate(v);
      for (std::size_t j = 0; j < d; ++j) values.push_back(v[j] + shift[j]);
      labels.push_back(k);
    }
  }
  DomainDataset ds;
  ds.x = Tensor::from({n, d, 1}, std::move(values));
  ds.y = std::move(labels);
  ds.domain_id = domain_id;
  ds.class_count = cfg.n_classes;
  return ds;
}

}  // namespace

SimulatedDomains generate(const SimConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  SimulatedDomains out;
  out.class_centers.assign(static_cast<std::size_t>(cfg.n_classes),
                           std::vector<double>(static_cast<std::size_t>(cfg.feature_dim)));
  for (auto& c : out.class_centers)
    for (double& v : c) v = unit(rng) * cfg.class_center_scale;

  for (int s = 0; s < cfg.n_source_domains; ++s) {
    out.sources.push_back(make_domain(cfg, out.class_centers, s, rng));
  }
  for (int t = 0; t < cfg.n_target_domains; ++t) {
    out.targets.push_back(make_domain(cfg, out.class_centers, cfg.n_source_domains + t, rng));
  }
  return out;
}

}  // namespace eegdg
