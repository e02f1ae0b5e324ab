#include "eegdg/dataset.hpp"

#include <fstream>

#include "binary_io.hpp"
#include "eegdg/errors.hpp"

namespace eegdg {

namespace io {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

}  // namespace io

namespace {
constexpr std::uint32_t kDomainVersion = 1;
}

void DomainDataset::validate() const {
  if (!x.defined() || x.rank() != 3) {
    throw ContractError("domain " + std::to_string(domain_id) + ": x must be [samples x channels x time]");
  }
  if (x.dim(0) != y.size()) {
    throw ContractError("domain " + std::to_string(domain_id) + ": " + std::to_string(y.size()) +
                        " labels for " + std::to_string(x.dim(0)) + " samples");
  }
  if (class_count < 1) throw ContractError("domain " + std::to_string(domain_id) + ": class_count must be >= 1");
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= class_count) {
      throw ContractError("domain " + std::to_string(domain_id) + ": label " + std::to_string(y[i]) +
                          " of sample " + std::to_string(i) + " outside [0, " + std::to_string(class_count) + ")");
    }
  }
}

DomainDataset DomainDataset::subset(std::span<const std::size_t> index) const {
  const std::size_t row = channels() * timesteps();
  auto src = x.data();
  std::vector<double> values;
  values.reserve(index.size() * row);
  std::vector<int> labels;
  labels.reserve(index.size());
  for (std::size_t i : index) {
    if (i >= size()) throw ContractError("subset index " + std::to_string(i) + " out of range");
    values.insert(values.end(), src.begin() + static_cast<std::ptrdiff_t>(i * row),
                  src.begin() + static_cast<std::ptrdiff_t>((i + 1) * row));
    labels.push_back(y[i]);
  }
  DomainDataset out;
  out.x = Tensor::from({index.size(), channels(), timesteps()}, std::move(values));
  out.y = std::move(labels);
  out.domain_id = domain_id;
  out.class_count = class_count;
  return out;
}

void check_compatible(std::span<const DomainDataset> domains) {
  if (domains.empty()) return;
  const DomainDataset& ref = domains.front();
  for (const DomainDataset& d : domains) {
    d.validate();
    if (d.channels() != ref.channels() || d.timesteps() != ref.timesteps() ||
        d.class_count != ref.class_count) {
      throw ContractError("domain " + std::to_string(d.domain_id) + " has shape [" +
                          std::to_string(d.channels()) + "x" + std::to_string(d.timesteps()) + "], " +
                          std::to_string(d.class_count) + " classes; expected [" +
                          std::to_string(ref.channels()) + "x" + std::to_string(ref.timesteps()) + "], " +
                          std::to_string(ref.class_count) + " classes");
    }
  }
}

std::vector<unsigned char> encode_domain(const DomainDataset& ds) {
  ds.validate();
  io::ByteWriter w;
  w.magic("EDG1");
  w.u32(kDomainVersion);
  w.u32(static_cast<std::uint32_t>(ds.domain_id));
  w.u32(static_cast<std::uint32_t>(ds.class_count));
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.channels()));
  w.u32(static_cast<std::uint32_t>(ds.timesteps()));
  for (int label : ds.y) w.u32(static_cast<std::uint32_t>(label));
  for (double v : ds.x.data()) w.f64(v);
  return std::move(w.bytes());
}

DomainDataset decode_domain(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("EDG1");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kDomainVersion) {
    throw FormatError("unsupported EDG1 version " + std::to_string(version), version_at);
  }
  DomainDataset ds;
  ds.domain_id = static_cast<int>(r.u32("domain_id"));
  const std::size_t classes_at = r.offset();
  const std::uint32_t classes = r.u32("class_count");
  if (classes == 0) throw FormatError("class_count must be positive", classes_at);
  ds.class_count = static_cast<int>(classes);
  const std::size_t dims_at = r.offset();
  const std::uint32_t n = r.u32("n_samples");
  const std::uint32_t c = r.u32("n_channels");
  const std::uint32_t t = r.u32("n_timesteps");
  if (n == 0 || c == 0 || t == 0) throw FormatError("header dimensions must be positive", dims_at);
  ds.y.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t label = r.u32("labels");
    if (label >= classes) {
      throw FormatError("label " + std::to_string(label) + " of sample " + std::to_string(i) +
                            " outside [0, " + std::to_string(classes) + ")",
                        at);
    }
    ds.y[i] = static_cast<int>(label);
  }
  const std::size_t count = std::size_t{n} * c * t;
  ds.x = Tensor::from({n, c, t}, r.f64_array(count, "payload"));
  r.expect_end();
  return ds;
}

void save_domain_file(const DomainDataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_domain(ds));
}

DomainDataset load_domain_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_domain(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace eegdg
