#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "eegdg/errors.hpp"
#include "eegdg/model.hpp"
#include "gradcheck.hpp"

using namespace eegdg;
using eegdg::testing::gradcheck;
using eegdg::testing::random_tensor;

namespace {

ModelConfig eeg_config(std::size_t C, std::size_t T) {
  ModelConfig cfg;
  cfg.n_channels = C;
  cfg.n_timesteps = T;
  cfg.n_domains = 3;
  cfg.n_classes = 4;
  cfg.seed = 11;
  return cfg;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_channels = 2;
  cfg.n_timesteps = 16;
  cfg.n_domains = 2;
  cfg.n_classes = 3;
  cfg.branch_dim = 4;
  cfg.seed = 5;
  auto& e = cfg.extractor;
  e.temporal_kernel_lengths = {3, 4};
  e.filters_per_branch = 2;
  e.depth_multiplier = 1;
  e.block2_kernel_lengths = {2};
  e.pool1 = 2;
  e.pool2 = 2;
  e.dropout_p = 0.0;
  e.embedding_dim = 5;
  return cfg;
}

Tensor find_param(const EegDgModel& m, const std::string& name) {
  for (const auto& p : m.parameters())
    if (p.name == name) return p.tensor;
  FAIL("missing parameter " << name);
  return {};
}

void randomize(EegDgModel& m, std::uint64_t seed, double spread = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-spread, spread);
  for (auto& p : m.parameters())
    for (double& v : p.tensor.mutable_data()) v = u(rng);
}

void fill(Tensor t, double value) {
  for (double& v : t.mutable_data()) v = value;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& y) {
  return scale(mean(pick(log_softmax(logits, 1), y)), -1.0);
}

}  // namespace

TEST_CASE("extractor output shape on full-size EEG input") {
  EegDgModel m(eeg_config(3, 1000));
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 3, 1000}, rng, false);
  Tensor z = m.extract(x, false);
  CHECK(z.shape() == Shape{2, 64});
  auto r = m.forward(x, false);
  CHECK(r.logits.shape() == Shape{2, 4});
  CHECK(r.branches.size() == 3);
  CHECK(r.branches[0].shape() == Shape{2, 32});
}

TEST_CASE("eval forward is deterministic and leaves buffers untouched") {
  EegDgModel m(eeg_config(3, 256));
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({4, 3, 256}, rng, false);
  auto before = m.buffers();
  std::vector<std::vector<double>> snapshot;
  for (const auto& b : before) snapshot.push_back(*b.values);

  auto a = m.extract(x, false).to_vector();
  auto b = m.extract(x, false).to_vector();
  CHECK(a == b);
  auto after = m.buffers();
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(*after[i].values == snapshot[i]);

  m.extract(x, true);
  bool changed = false;
  for (std::size_t i = 0; i < after.size(); ++i) changed = changed || *after[i].values != snapshot[i];
  CHECK(changed);
}

TEST_CASE("toy extractor matches a hand-built composition") {
  ModelConfig cfg;
  cfg.n_channels = 1;
  cfg.n_timesteps = 32;
  cfg.n_domains = 2;
  cfg.n_classes = 2;
  cfg.seed = 3;
  auto& e = cfg.extractor;
  e.temporal_kernel_lengths = {3};
  e.block2_kernel_lengths = {3};
  e.filters_per_branch = 2;
  e.depth_multiplier = 2;
  e.pool1 = 4;
  e.pool2 = 2;
  e.embedding_dim = 6;
  EegDgModel m(cfg);
  randomize(m, 9);

  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 1, 32}, rng, false);
  Tensor got = m.extract(x, false);

  // eval batch norm with fresh buffers: mean 0, var 1
  auto bn_eval = [](const Tensor& h, const Tensor& gamma, const Tensor& beta) {
    const std::size_t B = h.dim(0), Ch = h.dim(1), W = h.dim(3);
    std::vector<double> out(h.numel());
    const auto hv = h.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < Ch; ++c)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t i = (b * Ch + c) * W + w;
          out[i] = hv[i] / std::sqrt(1.0 + 1e-5) * gamma.data()[c] + beta.data()[c];
        }
    return Tensor::from(h.shape(), out);
  };
  // "same" padding for width 3 is one column each side
  Conv2dOptions pad3;
  pad3.pad_left = 1;
  pad3.pad_right = 1;

  Tensor h = reshape(x, {3, 1, 1, 32});
  h = conv2d(h, find_param(m, "g.temporal.0"), pad3);  // [3,2,1,32]
  Conv2dOptions grouped;
  grouped.groups = 2;
  h = conv2d(h, find_param(m, "g.spatial"), grouped);  // [3,4,1,32]
  h = elu(bn_eval(h, find_param(m, "g.bn1.gamma"), find_param(m, "g.bn1.beta")));
  h = avg_pool2d(h, 1, 4);  // [3,4,1,8]
  Conv2dOptions dw = pad3;
  dw.groups = 4;
  h = conv2d(h, find_param(m, "g.depthwise.0"), dw);
  h = conv2d(h, find_param(m, "g.pointwise.0"));  // [3,4,1,8]
  h = elu(bn_eval(h, find_param(m, "g.bn2.gamma"), find_param(m, "g.bn2.beta")));
  h = avg_pool2d(h, 1, 2);  // [3,4,1,4]
  h = reshape(h, {3, 16});
  Tensor want = add_rowwise(matmul(h, find_param(m, "g.embed.weight")), find_param(m, "g.embed.bias"));

  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}

TEST_CASE("kernel longer than the time axis is rejected at build time") {
  ModelConfig cfg = eeg_config(2, 64);
  CHECK_THROWS_AS(EegDgModel{cfg}, ConfigError);  // 128-sample temporal kernel
  cfg.extractor.temporal_kernel_lengths = {8, 16};
  cfg.extractor.block2_kernel_lengths = {32};  // time axis is 16 after pool1
  try {
    EegDgModel m(cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "model.block2_kernel_lengths");
  }
}

TEST_CASE("vector inputs use the dense extractor") {
  ModelConfig cfg;
  cfg.n_channels = 2;
  cfg.n_timesteps = 1;
  EegDgModel m(cfg);
  CHECK(cfg.resolved_kind() == ExtractorKind::dense);
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({5, 2, 1}, rng, false);
  CHECK(m.extract(x, false).shape() == Shape{5, 64});
  CHECK_THROWS_AS(m.extract(random_tensor({5, 3, 1}, rng, false), false), DimensionError);
}

TEST_CASE("branch features") {
  std::mt19937_64 rng(6);
  Tensor z = random_tensor({4, 64}, rng, false);

  SUBCASE("single branch equals f1") {
    ModelConfig cfg;
    cfg.n_domains = 1;
    EegDgModel m(cfg);
    auto outs = m.branch_features(z);
    REQUIRE(outs.size() == 1);
    auto& l = m.branch(0);
    Tensor want = l[1].forward(elu(l[0].forward(z)));
    CHECK(outs[0].to_vector() == want.to_vector());
  }
  SUBCASE("identical weights give identical outputs") {
    ModelConfig cfg;
    cfg.n_domains = 3;
    EegDgModel m(cfg);
    for (std::size_t n = 1; n < 3; ++n)
      for (std::size_t k = 0; k < 2; ++k) {
        auto src = m.branch(0)[k].weight.data();
        auto dst = m.branch(n)[k].weight.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
      }
    auto outs = m.branch_features(z);
    CHECK(outs[1].to_vector() == outs[0].to_vector());
    CHECK(outs[2].to_vector() == outs[0].to_vector());
  }
  SUBCASE("identity single layer returns its input") {
    ModelConfig cfg;
    cfg.branch_depth = 1;
    cfg.branch_dim = 64;
    cfg.n_domains = 2;
    EegDgModel m(cfg);
    for (std::size_t n = 0; n < 2; ++n) {
      auto w = m.branch(n)[0].weight.mutable_data();
      for (std::size_t i = 0; i < 64; ++i)
        for (std::size_t j = 0; j < 64; ++j) w[i * 64 + j] = i == j ? 1.0 : 0.0;
    }
    auto outs = m.branch_features(z);
    CHECK(outs[0].to_vector() == z.to_vector());
    CHECK(outs[1].to_vector() == z.to_vector());
  }
}

TEST_CASE("domain weights") {
  std::mt19937_64 rng(7);
  Tensor z = random_tensor({6, 64}, rng, false);
  ModelConfig cfg;
  cfg.n_domains = 4;
  EegDgModel m(cfg);

  auto w = m.domain_weights(z);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t n = 0; n < 4; ++n) s += w.at({i, n});
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  fill(m.domain_classifier().weight, 0.0);
  w = m.domain_weights(z);
  for (double v : w.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  Tensor logits = Tensor::from({1, 2}, {std::log(3.0), 0.0});
  auto s = softmax(logits, 1);
  CHECK(s.at({0, 0}) == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(s.at({0, 1}) == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("fuse") {
  Tensor v1 = Tensor::from({1, 3}, {1, 2, 3});
  Tensor v2 = Tensor::from({1, 3}, {5, 6, 7});
  CHECK(fuse(Tensor::from({1, 2}, {0.5, 0.5}), {v1, v2}).to_vector() == std::vector<double>{3, 4, 5});
  CHECK(fuse(Tensor::from({1, 2}, {0.0, 1.0}), {v1, v2}).to_vector() == v2.to_vector());
  CHECK_THROWS_AS(fuse(Tensor::from({1, 2}, {0.5, 0.5}), {v1}), ContractError);

  std::mt19937_64 rng(8);
  const std::size_t B = 5, N = 3, d = 4;
  Tensor w = softmax(random_tensor({B, N}, rng, false, -2, 2), 1);
  std::vector<Tensor> outs;
  for (std::size_t n = 0; n < N; ++n) outs.push_back(random_tensor({B, d}, rng, false));
  Tensor got = fuse(w, outs);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < d; ++j) {
      double want = 0.0;
      for (std::size_t n = 0; n < N; ++n) want += w.at({b, n}) * outs[n].at({b, j});
      CHECK(std::abs(got.at({b, j}) - want) < 1e-12);
    }
}

TEST_CASE("classify and predict") {
  ModelConfig cfg;
  cfg.n_channels = 2;
  EegDgModel m(cfg);
  randomize(m, 21);
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({8, 2, 1}, rng, false, -3, 3);

  SUBCASE("zero classifier ties to class 0") {
    fill(m.motion_classifier().weight, 0.0);
    fill(m.motion_classifier().bias, 0.0);
    auto r = m.forward(x, false);
    for (double v : r.logits.data()) CHECK(v == 0.0);
    for (int y : m.predict(x)) CHECK(y == 0);
  }
  SUBCASE("argmax shift invariance") {
    auto before = m.predict(x);
    for (double& b : m.motion_classifier().bias.mutable_data()) b += 7.5;
    CHECK(m.predict(x) == before);
  }
  SUBCASE("predict agrees with a step-by-step pipeline") {
    Tensor z = m.extract(x, false);
    auto w = m.domain_weights(z);
    auto outs = m.branch_features(z);
    Tensor fused = fuse(w, outs);
    CHECK(m.predict(x) == argmax_rows(m.classify(fused)));
  }
  CHECK(argmax_rows(Tensor::from({2, 3}, {1, 3, 3, 2, 2, 1})) == std::vector<int>{1, 0});
}

TEST_CASE("end-to-end gradients reach every parameter group and match finite differences") {
  EegDgModel m(tiny_config());
  randomize(m, 31);
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({4, 2, 16}, rng, false);
  const std::vector<int> y{0, 1, 2, 1};

  auto params = m.parameters();
  std::vector<Tensor> inputs;
  for (auto& p : params) inputs.push_back(p.tensor);
  auto fn = [&](const std::vector<Tensor>&) {
    auto r = m.forward(x, true);
    return cross_entropy(r.logits, y);
  };
  auto res = gradcheck(fn, inputs);
  CHECK(res.rel_error < 1e-4);

  for (auto& p : params) p.tensor.zero_grad();
  fn({}).backward();
  for (const char* group : {"g.", "f.0.", "f.1.", "f_d.", "f_c."}) {
    double norm = 0.0;
    for (auto& p : params)
      if (p.name.rfind(group, 0) == 0 && p.tensor.has_grad())
        for (double g : p.tensor.grad()) norm += g * g;
    CAPTURE(group);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("checkpoint round trip is bitwise") {
  ModelConfig cfg = tiny_config();
  EegDgModel m(cfg);
  randomize(m, 41);
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({6, 2, 16}, rng, false);
  m.forward(x, true);  // populate running statistics

  const auto path = std::filesystem::temp_directory_path() / "eegdg_test_model.edgm";
  save_checkpoint(m, path);
  EegDgModel back = load_checkpoint(path);
  std::filesystem::remove(path);

  auto pa = m.parameters();
  auto pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.to_vector() == pb[i].tensor.to_vector());
  }
  auto ba = m.buffers();
  auto bb = back.buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(*ba[i].values == *bb[i].values);
  CHECK(m.forward(x, false).logits.to_vector() == back.forward(x, false).logits.to_vector());
  CHECK(encode_checkpoint(m) == encode_checkpoint(back));

  auto bytes = encode_checkpoint(m);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  bytes = encode_checkpoint(m);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
}
