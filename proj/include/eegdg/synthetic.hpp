#pragma once

#include <cstdint>
#include <vector>

#include "eegdg/dataset.hpp"

namespace eegdg {

// Gaussian class blobs with a per-domain distribution shift.
//
// Class centers c_k ~ N(0, class_center_scale² I) are drawn once. Each domain
// then draws a rotation R (one angle per consecutive coordinate plane, uniform
// in ±domain_rotation_max_rad), a translation t ~ N(0, domain_shift_scale² I)
// and per-axis noise scales s_j = exp(u_j · noise_anisotropy), u_j ~ U(-1, 1).
// A sample of class k is  x = R (c_k + S ε) + t  with ε ~ N(0, per_class_std² I),
// so every domain keeps the class structure but has its own marginal and
// class-conditional distribution.
struct SimConfig {
  int n_source_domains = 3;
  int n_target_domains = 5;
  int n_classes = 4;
  int samples_per_class = 25;
  int feature_dim = 2;
  double class_center_scale = 3.0;
  double domain_shift_scale = 1.5;
  double domain_rotation_max_rad = 0.8;
  double per_class_std = 1.0;
  double noise_anisotropy = 0.5;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SimulatedDomains {
  std::vector<DomainDataset> sources;
  std::vector<DomainDataset> targets;
  std::vector<std::vector<double>> class_centers;
};

// Datasets have shape [n_classes·samples_per_class × feature_dim × 1].
// Source domain ids are 0..S-1, target ids continue at S.
SimulatedDomains generate(const SimConfig& cfg);

}  // namespace eegdg
