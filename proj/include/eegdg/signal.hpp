#pragma once

// EEG preprocessing: zero-phase Butterworth band-pass, per-window min-max
// scaling, trial cropping and random source-domain splitting.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eegdg/dataset.hpp"
#include "eegdg/tensor.hpp"

namespace eegdg {

struct TrialMarker {
  std::size_t onset_sample = 0;
  int label = 0;
};

// Continuous multi-channel recording, samples stored [channel × time].
struct RawRecording {
  std::vector<double> samples;
  std::size_t channels = 0;
  std::size_t timesteps = 0;
  double sample_rate_hz = 0.0;
  int class_count = 0;
  std::vector<TrialMarker> markers;
  std::vector<std::string> channel_names;

  double at(std::size_t channel, std::size_t t) const { return samples[channel * timesteps + t]; }
  void validate() const;
};

// One biquad, transposed direct form II. a0 is normalized to 1.
struct Biquad {
  std::array<double, 3> b{};
  std::array<double, 2> a{};  // a1, a2
};

class ButterworthBandpass {
 public:
  // Digital band-pass of the given analog prototype order (2·order poles),
  // designed by bilinear transform with frequency prewarping.
  ButterworthBandpass(double lo_hz, double hi_hz, double sample_rate_hz, int order);

  const std::vector<Biquad>& sections() const { return sections_; }
  double sample_rate() const { return fs_; }

  // |H(e^{jω})| of the cascade at frequency `hz`.
  double magnitude(double hz) const;

  // Single forward pass with steady-state initial conditions scaled by x[0].
  std::vector<double> filter(std::span<const double> x) const;
  // Forward-backward (zero-phase) filtering with odd-reflection padding.
  std::vector<double> filtfilt(std::span<const double> x) const;

 private:
  double fs_;
  std::vector<Biquad> sections_;
};

RawRecording bandpass(const RawRecording& rec, double lo_hz, double hi_hz, int order = 4);

// Affine map of every row along the last axis onto [0, 1]; constant rows
// become all zeros.
Tensor minmax_scale(const Tensor& x);

// One window per trial marker starting `start_offset_s` after the onset.
DomainDataset crop_windows(const RawRecording& rec, double start_offset_s, double length_s,
                           int domain_id = 0);

// Random partition into n domains whose sizes differ by at most one.
std::vector<DomainDataset> split_into_domains(const DomainDataset& ds, int n, std::uint64_t seed);

struct PreprocessOptions {
  double lo_hz = 8.0;
  double hi_hz = 35.0;
  int order = 4;
  double start_offset_s = 0.0;
  double length_s = 4.0;
};

// bandpass → crop → per-window min-max scaling.
DomainDataset preprocess(const RawRecording& rec, const PreprocessOptions& options, int domain_id = 0);

// EDR1 raw recording file, little-endian:
//   "EDR1" u32 version=1, f64 sample_rate_hz, u32 n_channels, u32 n_timesteps,
//   u32 n_markers, u32 class_count, n_channels × (u32 length, name bytes),
//   n_markers × (u32 onset_sample, u32 label),
//   n_channels·n_timesteps × f64 (channel, time).
void save_raw_file(const RawRecording& rec, const std::filesystem::path& path);
RawRecording load_raw_file(const std::filesystem::path& path);

}  // namespace eegdg
