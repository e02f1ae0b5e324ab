#include "eegdg/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "eegdg/errors.hpp"

namespace eegdg {

namespace {
using cplx = std::complex<double>;
constexpr std::uint32_t kRawVersion = 1;
}  // namespace

void RawRecording::validate() const {
  if (channels < 1 || timesteps < 1) throw ContractError("recording must have at least one channel and sample");
  if (samples.size() != channels * timesteps) {
    throw ContractError("recording holds " + std::to_string(samples.size()) + " values for " +
                        std::to_string(channels) + "x" + std::to_string(timesteps));
  }
  if (!(sample_rate_hz > 0.0)) throw ContractError("sample rate must be positive");
  if (!channel_names.empty() && channel_names.size() != channels) {
    throw ContractError("channel name count does not match channel count");
  }
  for (std::size_t i = 0; i < markers.size(); ++i) {
    if (markers[i].onset_sample >= timesteps) {
      throw ContractError("marker " + std::to_string(i) + " onset beyond end of recording");
    }
    if (markers[i].label < 0 || markers[i].label >= class_count) {
      throw ContractError("marker " + std::to_string(i) + " label " + std::to_string(markers[i].label) +
                          " outside [0, " + std::to_string(class_count) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// Butterworth band-pass

ButterworthBandpass::ButterworthBandpass(double lo_hz, double hi_hz, double fs, int order) : fs_(fs) {
  if (!(fs > 0.0)) throw ConfigError("bandpass: sample rate must be positive");
  if (!(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs / 2.0)) {
    throw ConfigError("bandpass: need 0 < lo < hi < fs/2, got lo=" + std::to_string(lo_hz) +
                      " hi=" + std::to_string(hi_hz) + " fs=" + std::to_string(fs));
  }
  if (order < 1) throw ConfigError("bandpass: order must be >= 1");

  const double pi = std::numbers::pi;
  const double w1 = 2.0 * fs * std::tan(pi * lo_hz / fs);
  const double w2 = 2.0 * fs * std::tan(pi * hi_hz / fs);
  const double w0 = std::sqrt(w1 * w2);
  const double bw = w2 - w1;

  std::vector<cplx> poles;
  for (int k = 0; k < order; ++k) {
    const cplx p = std::polar(1.0, pi * (2.0 * k + order + 1.0) / (2.0 * order));
    const cplx q = p * bw / 2.0;
    const cplx r = std::sqrt(q * q - w0 * w0);
    for (cplx s : {q + r, q - r}) poles.push_back((2.0 * fs + s) / (2.0 * fs - s));
  }
  for (const cplx& z : poles) {
    if (std::abs(z) >= 1.0) throw NumericError("bandpass: unstable design, pole magnitude " + std::to_string(std::abs(z)));
  }

  std::vector<double> real_poles;
  for (const cplx& z : poles) {
    if (std::abs(z.imag()) <= 1e-12) {
      real_poles.push_back(z.real());
    } else if (z.imag() > 0.0) {
      sections_.push_back({{1.0, 0.0, -1.0}, {-2.0 * z.real(), std::norm(z)}});
    }
  }
  std::sort(real_poles.begin(), real_poles.end());
  for (std::size_t i = 0; i + 1 < real_poles.size(); i += 2) {
    sections_.push_back({{1.0, 0.0, -1.0}, {-(real_poles[i] + real_poles[i + 1]), real_poles[i] * real_poles[i + 1]}});
  }
  if (sections_.size() != static_cast<std::size_t>(order)) {
    throw NumericError("bandpass: could not pair poles into second-order sections");
  }

  // unit gain at the (prewarped) geometric center frequency
  const double center_hz = fs / pi * std::atan(w0 / (2.0 * fs));
  const double g = magnitude(center_hz);
  for (double& b : sections_.front().b) b /= g;
}

double ButterworthBandpass::magnitude(double hz) const {
  const cplx zinv = std::polar(1.0, -2.0 * std::numbers::pi * hz / fs_);
  cplx h = 1.0;
  for (const Biquad& s : sections_) {
    const cplx num = s.b[0] + s.b[1] * zinv + s.b[2] * zinv * zinv;
    const cplx den = 1.0 + s.a[0] * zinv + s.a[1] * zinv * zinv;
    h *= num / den;
  }
  return std::abs(h);
}

std::vector<double> ButterworthBandpass::filter(std::span<const double> x) const {
  std::vector<double> y(x.begin(), x.end());
  if (y.empty()) return y;
  double level = x[0];
  for (const Biquad& s : sections_) {
    const double gain = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
    double s2 = (s.b[2] - s.a[1] * gain) * level;
    double s1 = (s.b[1] - s.a[0] * gain) * level + s2;
    for (double& v : y) {
      const double in = v;
      const double out = s.b[0] * in + s1;
      s1 = s.b[1] * in - s.a[0] * out + s2;
      s2 = s.b[2] * in - s.a[1] * out;
      v = out;
    }
    level *= gain;
  }
  return y;
}

std::vector<double> ButterworthBandpass::filtfilt(std::span<const double> x) const {
  const std::size_t n = x.size();
  if (n == 0) return {};
  const std::size_t pad = std::min<std::size_t>(3 * (2 * sections_.size() + 1), n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  std::vector<double> fwd = filter(ext);
  std::reverse(fwd.begin(), fwd.end());
  std::vector<double> back = filter(fwd);
  std::reverse(back.begin(), back.end());
  return {back.begin() + static_cast<std::ptrdiff_t>(pad), back.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

RawRecording bandpass(const RawRecording& rec, double lo_hz, double hi_hz, int order) {
  rec.validate();
  const ButterworthBandpass bp(lo_hz, hi_hz, rec.sample_rate_hz, order);
  RawRecording out = rec;
  for (std::size_t c = 0; c < rec.channels; ++c) {
    std::span<const double> row(rec.samples.data() + c * rec.timesteps, rec.timesteps);
    const std::vector<double> y = bp.filtfilt(row);
    std::copy(y.begin(), y.end(), out.samples.begin() + static_cast<std::ptrdiff_t>(c * rec.timesteps));
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor minmax_scale(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("minmax_scale: input must have rank >= 1");
  const std::size_t len = x.dim(x.rank() - 1);
  std::vector<double> v = x.to_vector();
  for (std::size_t start = 0; start < v.size(); start += len) {
    auto first = v.begin() + static_cast<std::ptrdiff_t>(start);
    auto last = first + static_cast<std::ptrdiff_t>(len);
    const auto [lo, hi] = std::minmax_element(first, last);
    const double mn = *lo, range = *hi - *lo;
    for (auto it = first; it != last; ++it) *it = range > 0.0 ? (*it - mn) / range : 0.0;
  }
  return Tensor::from(x.shape(), std::move(v));
}

DomainDataset crop_windows(const RawRecording& rec, double start_offset_s, double length_s, int domain_id) {
  rec.validate();
  const long long window = std::llround(length_s * rec.sample_rate_hz);
  if (window < 1) throw ConfigError("crop_windows: window length must cover at least one sample");
  if (rec.markers.empty()) throw IngestionError("crop_windows: recording has no trial markers");
  const long long offset = std::llround(start_offset_s * rec.sample_rate_hz);
  const std::size_t tw = static_cast<std::size_t>(window);

  std::vector<double> values;
  values.reserve(rec.markers.size() * rec.channels * tw);
  std::vector<int> labels;
  for (std::size_t i = 0; i < rec.markers.size(); ++i) {
    const long long start = static_cast<long long>(rec.markers[i].onset_sample) + offset;
    if (start < 0 || start + window > static_cast<long long>(rec.timesteps)) {
      throw IngestionError("trial " + std::to_string(i) + ": window [" + std::to_string(start) + ", " +
                           std::to_string(start + window) + ") overruns recording of " +
                           std::to_string(rec.timesteps) + " samples");
    }
    for (std::size_t c = 0; c < rec.channels; ++c) {
      const double* row = rec.samples.data() + c * rec.timesteps + start;
      values.insert(values.end(), row, row + window);
    }
    labels.push_back(rec.markers[i].label);
  }
  DomainDataset ds;
  ds.x = Tensor::from({rec.markers.size(), rec.channels, tw}, std::move(values));
  ds.y = std::move(labels);
  ds.domain_id = domain_id;
  ds.class_count = rec.class_count;
  return ds;
}

std::vector<DomainDataset> split_into_domains(const DomainDataset& ds, int n, std::uint64_t seed) {
  ds.validate();
  if (n < 2) throw ConfigError("split_into_domains: need at least 2 domains, got " + std::to_string(n));
  if (static_cast<std::size_t>(n) > ds.size()) {
    throw ConfigError("split_into_domains: " + std::to_string(n) + " domains requested from " +
                      std::to_string(ds.size()) + " samples");
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t parts = static_cast<std::size_t>(n);
  const std::size_t base = ds.size() / parts, extra = ds.size() % parts;
  std::vector<DomainDataset> out;
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t len = base + (p < extra ? 1 : 0);
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(idx.begin(), idx.end());
    DomainDataset part = ds.subset(idx);
    part.domain_id = static_cast<int>(p);
    out.push_back(std::move(part));
    pos += len;
  }
  return out;
}

DomainDataset preprocess(const RawRecording& rec, const PreprocessOptions& options, int domain_id) {
  const RawRecording filtered = bandpass(rec, options.lo_hz, options.hi_hz, options.order);
  DomainDataset ds = crop_windows(filtered, options.start_offset_s, options.length_s, domain_id);
  ds.x = minmax_scale(ds.x);
  return ds;
}

// ---------------------------------------------------------------------------
// EDR1

void save_raw_file(const RawRecording& rec, const std::filesystem::path& path) {
  rec.validate();
  io::ByteWriter w;
  w.magic("EDR1");
  w.u32(kRawVersion);
  w.f64(rec.sample_rate_hz);
  w.u32(static_cast<std::uint32_t>(rec.channels));
  w.u32(static_cast<std::uint32_t>(rec.timesteps));
  w.u32(static_cast<std::uint32_t>(rec.markers.size()));
  w.u32(static_cast<std::uint32_t>(rec.class_count));
  for (std::size_t c = 0; c < rec.channels; ++c) {
    w.str(rec.channel_names.empty() ? "ch" + std::to_string(c) : rec.channel_names[c]);
  }
  for (const TrialMarker& m : rec.markers) {
    w.u32(static_cast<std::uint32_t>(m.onset_sample));
    w.u32(static_cast<std::uint32_t>(m.label));
  }
  for (double v : rec.samples) w.f64(v);
  io::write_file(path, w.bytes());
}

RawRecording load_raw_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    io::ByteReader r(bytes);
    r.expect_magic("EDR1");
    const std::size_t version_at = r.offset();
    if (r.u32("version") != kRawVersion) throw FormatError("unsupported EDR1 version", version_at);
    RawRecording rec;
    const std::size_t rate_at = r.offset();
    rec.sample_rate_hz = r.f64("sample_rate_hz");
    if (!(rec.sample_rate_hz > 0.0)) throw FormatError("sample rate must be positive", rate_at);
    const std::size_t dims_at = r.offset();
    rec.channels = r.u32("n_channels");
    rec.timesteps = r.u32("n_timesteps");
    const std::uint32_t n_markers = r.u32("n_markers");
    rec.class_count = static_cast<int>(r.u32("class_count"));
    if (rec.channels == 0 || rec.timesteps == 0 || rec.class_count == 0) {
      throw FormatError("header dimensions must be positive", dims_at);
    }
    for (std::size_t c = 0; c < rec.channels; ++c) rec.channel_names.push_back(r.str("channel name"));
    for (std::uint32_t i = 0; i < n_markers; ++i) {
      const std::size_t at = r.offset();
      TrialMarker m;
      m.onset_sample = r.u32("marker onset");
      m.label = static_cast<int>(r.u32("marker label"));
      if (m.onset_sample >= rec.timesteps || m.label >= rec.class_count) {
        throw FormatError("marker " + std::to_string(i) + " out of range", at);
      }
      rec.markers.push_back(m);
    }
    rec.samples = r.f64_array(rec.channels * rec.timesteps, "payload");
    r.expect_end();
    return rec;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace eegdg
