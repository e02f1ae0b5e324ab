#include "eegdg/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <numeric>
#include <random>

#include "eegdg/errors.hpp"
#include "eegdg/model.hpp"

namespace eegdg {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix flatten(const DomainDataset& ds) {
  const std::size_t n = ds.size();
  const std::size_t f = ds.x.numel() / n;
  Matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
  std::copy(ds.x.data().begin(), ds.x.data().end(), m.data());
  return m;
}

int argmax_low(const Eigen::VectorXd& scores) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < scores.size(); ++j)
    if (scores[j] > scores[best]) best = j;
  return static_cast<int>(best);
}

void check_pair(const DomainDataset& train, const DomainDataset& test) {
  train.validate();
  test.validate();
  if (train.x.numel() / train.size() != test.x.numel() / test.size()) {
    throw ContractError("baseline: train samples have shape " + shape_str(train.x.shape()) +
                        " but test samples have shape " + shape_str(test.x.shape()));
  }
}

std::vector<int> knn(const BaselineSpec& spec, const Matrix& tr, const std::vector<int>& ytr, const Matrix& te,
                     int classes) {
  if (spec.k < 1) throw ConfigError("knn: k must be >= 1", "baselines.knn_k");
  const std::size_t k = std::min<std::size_t>(spec.k, static_cast<std::size_t>(tr.rows()));
  std::vector<int> out(static_cast<std::size_t>(te.rows()));
  std::vector<std::pair<double, std::size_t>> dist(static_cast<std::size_t>(tr.rows()));
  for (Eigen::Index i = 0; i < te.rows(); ++i) {
    for (Eigen::Index j = 0; j < tr.rows(); ++j) {
      dist[static_cast<std::size_t>(j)] = {(tr.row(j) - te.row(i)).squaredNorm(), static_cast<std::size_t>(j)};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::vector<int> votes(static_cast<std::size_t>(classes), 0);
    for (std::size_t q = 0; q < k; ++q) votes[static_cast<std::size_t>(ytr[dist[q].second])]++;
    out[static_cast<std::size_t>(i)] =
        static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

std::vector<int> lda(const BaselineSpec& spec, const Matrix& tr, const std::vector<int>& ytr, const Matrix& te,
                     int classes) {
  constexpr Eigen::Index kMaxFeatures = 4096;
  const Eigen::Index n = tr.rows(), d = tr.cols();
  if (d > kMaxFeatures) {
    throw ConfigError("lda: " + std::to_string(d) + " features exceed the supported " +
                          std::to_string(kMaxFeatures),
                      "baselines.lda");
  }
  Matrix means = Matrix::Zero(classes, d);
  std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    means.row(ytr[static_cast<std::size_t>(i)]) += tr.row(i);
    counts[static_cast<std::size_t>(ytr[static_cast<std::size_t>(i)])] += 1.0;
  }
  for (int c = 0; c < classes; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0) means.row(c) /= counts[static_cast<std::size_t>(c)];
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd r = (tr.row(i) - means.row(ytr[static_cast<std::size_t>(i)])).transpose();
    cov.noalias() += r * r.transpose();
  }
  const Eigen::Index present = std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; });
  cov /= static_cast<double>(n > present ? n - present : n);
  cov += spec.ridge * Eigen::MatrixXd::Identity(d, d);

  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericError("lda: pooled covariance is singular despite the ridge");
  Eigen::MatrixXd inv_means = llt.solve(Eigen::MatrixXd(means.transpose()));  // d × C
  if (!inv_means.allFinite()) throw NumericError("lda: covariance solve produced non-finite values");
  Eigen::VectorXd offset(classes);
  for (int c = 0; c < classes; ++c) {
    const double cnt = counts[static_cast<std::size_t>(c)];
    offset[c] = cnt > 0 ? -0.5 * means.row(c).dot(inv_means.col(c)) + std::log(cnt / static_cast<double>(n))
                        : -std::numeric_limits<double>::infinity();
  }
  std::vector<int> out(static_cast<std::size_t>(te.rows()));
  for (Eigen::Index i = 0; i < te.rows(); ++i) {
    Eigen::VectorXd scores = (te.row(i) * inv_means).transpose() + offset;
    out[static_cast<std::size_t>(i)] = argmax_low(scores);
  }
  return out;
}

std::vector<int> linear(const BaselineSpec& spec, const Matrix& tr_raw, const std::vector<int>& ytr,
                        const Matrix& te_raw, int classes) {
  const Eigen::Index n = tr_raw.rows(), d = tr_raw.cols();
  Eigen::RowVectorXd mu = tr_raw.colwise().mean();
  Eigen::RowVectorXd sd = ((tr_raw.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index j = 0; j < d; ++j)
    if (!(sd[j] > 0.0)) sd[j] = 1.0;
  Matrix tr = (tr_raw.rowwise() - mu).array().rowwise() / sd.array();
  Matrix te = (te_raw.rowwise() - mu).array().rowwise() / sd.array();

  Eigen::MatrixXd targets = Eigen::MatrixXd::Constant(n, classes, -1.0);
  for (Eigen::Index i = 0; i < n; ++i) targets(i, ytr[static_cast<std::size_t>(i)]) = 1.0;

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> init(0.0, 0.01);
  Eigen::MatrixXd w(d, classes);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = init(rng);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(classes);

  for (std::size_t it = 0; it < spec.iterations; ++it) {
    Eigen::MatrixXd scores = (tr * w).rowwise() + b;
    // d/ds max(0, 1 - t s)² = -2 t max(0, 1 - t s)
    Eigen::MatrixXd slack = (1.0 - targets.array() * scores.array()).max(0.0);
    Eigen::MatrixXd g = (-2.0 * targets.array() * slack.array()).matrix() / static_cast<double>(n);
    Eigen::MatrixXd gw = tr.transpose() * g + 2.0 * spec.l2 * w;
    w -= spec.learning_rate * gw;
    b -= spec.learning_rate * g.colwise().sum();
  }
  if (!w.allFinite()) throw NumericError("linear baseline diverged");
  std::vector<int> out(static_cast<std::size_t>(te.rows()));
  for (Eigen::Index i = 0; i < te.rows(); ++i) {
    Eigen::VectorXd s = (te.row(i) * w + b).transpose();
    out[static_cast<std::size_t>(i)] = argmax_low(s);
  }
  return out;
}

void write_csv_value(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

}  // namespace

double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw ContractError("accuracy: " + std::to_string(pred.size()) + " predictions for " +
                        std::to_string(truth.size()) + " labels");
  }
  if (pred.empty()) throw ContractError("accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double kappa(double acc, std::size_t class_count) {
  if (class_count < 2) throw ContractError("kappa: class count must be >= 2, got " + std::to_string(class_count));
  if (!(acc >= 0.0 && acc <= 1.0)) throw ContractError("kappa: accuracy must lie in [0, 1]");
  const double chance = 1.0 / static_cast<double>(class_count);
  return (acc - chance) / (1.0 - chance);
}

std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const int> pred, std::span<const int> truth,
                                                       std::size_t class_count) {
  if (pred.size() != truth.size()) throw ContractError("confusion_matrix: length mismatch");
  std::vector<std::vector<std::size_t>> m(class_count, std::vector<std::size_t>(class_count, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= class_count ||
        static_cast<std::size_t>(truth[i]) >= class_count) {
      throw ContractError("confusion_matrix: label outside [0, " + std::to_string(class_count) + ")");
    }
    m[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])]++;
  }
  return m;
}

MetricsReport make_report(std::span<const int> pred, std::span<const int> truth, std::size_t class_count) {
  MetricsReport r;
  r.accuracy = accuracy(pred, truth);
  r.kappa = kappa(r.accuracy, class_count);
  r.confusion = confusion_matrix(pred, truth, class_count);
  r.n_samples = pred.size();
  return r;
}

std::vector<int> predict_dataset(EegDgModel& model, const DomainDataset& ds, std::size_t chunk) {
  ds.validate();
  const auto& cfg = model.config();
  if (ds.channels() != cfg.n_channels || ds.timesteps() != cfg.n_timesteps) {
    throw ContractError("dataset samples are " + std::to_string(ds.channels()) + " x " +
                        std::to_string(ds.timesteps()) + " but the model expects " +
                        std::to_string(cfg.n_channels) + " x " + std::to_string(cfg.n_timesteps));
  }
  if (static_cast<std::size_t>(ds.class_count) > cfg.n_classes) {
    throw ContractError("dataset has " + std::to_string(ds.class_count) + " classes but the model predicts " +
                        std::to_string(cfg.n_classes));
  }
  std::vector<int> out;
  out.reserve(ds.size());
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t len = std::min(chunk, ds.size() - start);
    auto p = model.predict(slice(ds.x, 0, start, len));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

MetricsReport evaluate_on_target(EegDgModel& model, const DomainDataset& target) {
  const auto pred = predict_dataset(model, target);
  return make_report(pred, target.y, model.config().n_classes);
}

std::string baseline_name(const BaselineSpec& spec) {
  switch (spec.kind) {
    case BaselineKind::knn: return std::to_string(spec.k) + "nn";
    case BaselineKind::lda: return "lda";
    case BaselineKind::linear: return "linear";
  }
  return "unknown";
}

DomainDataset pool_domains(const std::vector<DomainDataset>& domains) {
  if (domains.empty()) throw ContractError("pool_domains: no datasets");
  check_compatible(domains);
  std::vector<Tensor> xs;
  DomainDataset out;
  for (const auto& d : domains) {
    xs.push_back(d.x);
    out.y.insert(out.y.end(), d.y.begin(), d.y.end());
  }
  out.x = xs.size() == 1 ? domains[0].x : concat(xs, 0).detach();
  out.domain_id = -1;
  out.class_count = domains[0].class_count;
  return out;
}

std::vector<int> baseline_fit_predict(const BaselineSpec& spec, const DomainDataset& train,
                                      const DomainDataset& test) {
  check_pair(train, test);
  const Matrix tr = flatten(train);
  const Matrix te = flatten(test);
  const int classes = std::max(train.class_count, test.class_count);
  switch (spec.kind) {
    case BaselineKind::knn: return knn(spec, tr, train.y, te, classes);
    case BaselineKind::lda: return lda(spec, tr, train.y, te, classes);
    case BaselineKind::linear: return linear(spec, tr, train.y, te, classes);
  }
  throw ContractError("unknown baseline kind");
}

std::vector<double> pca_project(std::span<const double> rows, std::size_t n, std::size_t d, std::size_t count) {
  if (rows.size() != n * d || n == 0 || d == 0) {
    throw DimensionError("pca_project: " + std::to_string(rows.size()) + " values do not form " +
                         std::to_string(n) + " x " + std::to_string(d));
  }
  Eigen::Map<const Matrix> x(rows.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Matrix centred = x.rowwise() - x.colwise().mean();
  Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("pca_project: eigen decomposition failed");

  std::vector<double> out(n * count, 0.0);
  const auto dd = static_cast<Eigen::Index>(d);
  for (std::size_t c = 0; c < count && c < d; ++c) {
    Eigen::VectorXd axis = eig.eigenvectors().col(dd - 1 - static_cast<Eigen::Index>(c));
    Eigen::Index big = 0;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis[big] < 0) axis = -axis;
    Eigen::VectorXd proj = centred * axis;
    for (std::size_t i = 0; i < n; ++i) out[i * count + c] = proj[static_cast<Eigen::Index>(i)];
  }
  return out;
}

std::string to_string(FeatureStage stage) {
  switch (stage) {
    case FeatureStage::extractor: return "extractor";
    case FeatureStage::branch: return "branch";
    case FeatureStage::fused: return "fused";
  }
  return "extractor";
}

FeatureStage feature_stage_from_string(const std::string& name) {
  if (name == "extractor") return FeatureStage::extractor;
  if (name == "branch") return FeatureStage::branch;
  if (name == "fused") return FeatureStage::fused;
  throw ConfigError("unknown feature stage '" + name + "' (expected extractor, branch or fused)", "stage");
}

std::size_t export_features(EegDgModel& model, const std::vector<DomainDataset>& sources,
                            const std::vector<DomainDataset>& targets, FeatureStage stage,
                            const std::filesystem::path& path) {
  struct Row {
    int domain_id;
    int label;
    const char* split;
  };
  std::vector<Row> meta;
  std::vector<double> values;
  std::size_t width = 0;
  constexpr std::size_t chunk = 32;

  auto collect = [&](const DomainDataset& ds, const char* split, std::size_t branch_index) {
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
      const std::size_t len = std::min(chunk, ds.size() - start);
      NoGradGuard guard;
      Tensor z = model.extract(slice(ds.x, 0, start, len), false);
      Tensor f;
      if (stage == FeatureStage::extractor) {
        f = z;
      } else if (stage == FeatureStage::branch) {
        f = model.branch_features(z).at(branch_index);
      } else {
        f = fuse(model.domain_weights(z), model.branch_features(z));
      }
      width = f.dim(1);
      values.insert(values.end(), f.data().begin(), f.data().end());
      for (std::size_t i = 0; i < len; ++i) meta.push_back({ds.domain_id, ds.y[start + i], split});
    }
  };
  if (stage == FeatureStage::branch && sources.size() > model.config().n_domains) {
    throw ContractError("export: " + std::to_string(sources.size()) + " source domains for a model with " +
                        std::to_string(model.config().n_domains) + " branches");
  }
  for (std::size_t n = 0; n < sources.size(); ++n) collect(sources[n], "source", n);
  if (stage != FeatureStage::branch)
    for (const auto& t : targets) collect(t, "target", 0);
  if (meta.empty()) throw ContractError("export: no samples to export");

  const auto pcs = pca_project(values, meta.size(), width, 2);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "domain_id,label,split,stage";
  for (std::size_t j = 0; j < width; ++j) os << ",f" << j;
  os << ",pc1,pc2\n";
  const std::string stage_name = to_string(stage);
  for (std::size_t i = 0; i < meta.size(); ++i) {
    os << meta[i].domain_id << ',' << meta[i].label << ',' << meta[i].split << ',' << stage_name;
    for (std::size_t j = 0; j < width; ++j) {
      os << ',';
      write_csv_value(os, values[i * width + j]);
    }
    os << ',';
    write_csv_value(os, pcs[i * 2]);
    os << ',';
    write_csv_value(os, pcs[i * 2 + 1]);
    os << '\n';
  }
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
  return meta.size();
}

}  // namespace eegdg
