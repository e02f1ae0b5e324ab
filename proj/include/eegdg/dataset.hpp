#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "eegdg/tensor.hpp"

namespace eegdg {

// One labeled (source) or scored (target) domain.
// x is [n_samples × n_channels × n_timesteps]; labels lie in [0, class_count).
struct DomainDataset {
  Tensor x;
  std::vector<int> y;
  int domain_id = 0;
  int class_count = 0;

  std::size_t size() const { return y.size(); }
  std::size_t channels() const { return x.dim(1); }
  std::size_t timesteps() const { return x.dim(2); }

  // Throws ContractError when the invariants above do not hold.
  void validate() const;

  // Rows `index` in the given order, same domain id and class count.
  DomainDataset subset(std::span<const std::size_t> index) const;
};

// Throws ContractError unless all datasets share channels, timesteps and
// class count.
void check_compatible(std::span<const DomainDataset> domains);

// EDG1 domain file, little-endian:
//   "EDG1" u32 version=1, u32 domain_id, u32 class_count, u32 n_samples,
//   u32 n_channels, u32 n_timesteps, n_samples × u32 label,
//   n_samples·n_channels·n_timesteps × f64 (sample, channel, time).
void save_domain_file(const DomainDataset& ds, const std::filesystem::path& path);
DomainDataset load_domain_file(const std::filesystem::path& path);

std::vector<unsigned char> encode_domain(const DomainDataset& ds);
DomainDataset decode_domain(std::span<const unsigned char> bytes);

}  // namespace eegdg
