#include <cmath>

#include "doctest.h"
#include "glad/error.hpp"
#include "glad/models.hpp"
#include "glad/objective.hpp"
#include "support.hpp"

using namespace glad;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.d_in = 8;
  cfg.hidden = 12;
  cfg.embed = 6;
  cfg.lora.rank = 2;
  return cfg;
}

Batch random_batch(Rng& rng, std::size_t b, std::size_t c, std::size_t d_in) {
  Batch batch;
  batch.images = oracle::random_tensor(rng, {b, d_in}, -1, 1, false);
  batch.class_texts = oracle::random_tensor(rng, {c, d_in}, -1, 1, false);
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(rng.below(c));
  return batch;
}

// KL(p || q) for softmax(a), softmax(b) computed row by row in plain loops.
double kl_oracle(const std::vector<double>& a, const std::vector<double>& b, std::size_t rows, std::size_t c) {
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double za = 0.0, zb = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      za += std::exp(a[r * c + j]);
      zb += std::exp(b[r * c + j]);
    }
    for (std::size_t j = 0; j < c; ++j) {
      const double p = std::exp(a[r * c + j]) / za, q = std::exp(b[r * c + j]) / zb;
      total += p * std::log(p / q);
    }
  }
  return total / static_cast<double>(rows);
}

}  // namespace

TEST_CASE("similarity logits examples") {
  const Tensor img = Tensor::matrix(1, 2, {0.6, 0.8});
  const Tensor txt = Tensor::matrix(2, 2, {0.6, 0.8, -0.8, 0.6});
  const auto l = values(similarity_logits(img, txt, 1.0));
  CHECK(l[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(l[1]) <= 1e-15);
  CHECK(l[0] > l[1]);

  Rng rng(1);
  const Tensor fi = l2_normalize(oracle::random_tensor(rng, {4, 5}, -1, 1, false));
  const Tensor ft = l2_normalize(oracle::random_tensor(rng, {3, 5}, -1, 1, false));
  const auto one = values(similarity_logits(fi, ft, 3.0));
  const auto two = values(similarity_logits(fi, ft, 6.0));
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(two[i] == doctest::Approx(2.0 * one[i]).epsilon(1e-14));
  for (std::size_t r = 0; r < 4; ++r) {
    auto row = [&](const std::vector<double>& v) { return std::max_element(v.begin() + 3 * r, v.begin() + 3 * r + 3) - v.begin(); };
    CHECK(row(one) == row(two));
  }
}

TEST_CASE("similarity logits accept image-conditioned text") {
  Rng rng(2);
  const Tensor fi = l2_normalize(oracle::random_tensor(rng, {3, 4}, -1, 1, false));
  const Tensor ft = l2_normalize(oracle::random_tensor(rng, {5, 4}, -1, 1, false));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 5; ++k) rows.push_back(k);
  const Tensor per_image = reshape(gather_rows(ft, rows), {3, 5, 4});
  CHECK(oracle::max_abs_diff(similarity_logits(fi, per_image, 10.0).data(), similarity_logits(fi, ft, 10.0).data()) <=
        1e-14);
  CHECK_THROWS_AS(similarity_logits(fi, Tensor::zeros({5, 3}), 1.0), DimensionError);
  CHECK_THROWS_AS(similarity_logits(fi, Tensor::zeros({2, 5, 4}), 1.0), DimensionError);
}

TEST_CASE("cross entropy examples") {
  const std::vector<std::size_t> labels{2};
  CHECK(cross_entropy(Tensor::matrix(1, 4, {0, 0, 0, 0}), labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(cross_entropy(Tensor::matrix(1, 4, {0, 0, 800, 0}), labels).item() <= 1e-300);
  CHECK_THROWS_AS(cross_entropy(Tensor::matrix(1, 4, {0, 0, 0, 0}), std::vector<std::size_t>{4}), DataError);
  CHECK_THROWS_AS(cross_entropy(Tensor::matrix(2, 4, std::vector<double>(8, 0.0)), labels), DataError);
}

TEST_CASE("cross entropy gradient matches central differences") {
  Rng rng(3);
  const std::vector<std::size_t> labels{1, 4, 0};
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = oracle::random_tensor(rng, {3, 5}, -2, 2);
    CHECK(oracle::gradient_check([&](const std::vector<Tensor>& in) { return cross_entropy(in[0], labels); }, {z}) <=
          1e-6);
  }
}

TEST_CASE("kl preservation examples") {
  Rng rng(4);
  const Tensor z = oracle::random_tensor(rng, {3, 6}, -3, 3, false);
  CHECK(std::abs(kl_preservation(z, z).item()) <= 1e-12);

  // p = softmax(0, 0) = (0.5, 0.5), q = softmax(ln 9, 0) = (0.9, 0.1)
  const Tensor tuned = Tensor::matrix(1, 2, {std::log(9.0), 0.0});
  const Tensor frozen = Tensor::matrix(1, 2, {0.0, 0.0});
  const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(std::abs(kl_preservation(tuned, frozen).item() - expected) <= 1e-12);
  CHECK(kl_preservation(tuned, frozen).item() == doctest::Approx(0.5108).epsilon(1e-4));
  CHECK_THROWS_AS(kl_preservation(tuned, Tensor::zeros({1, 3})), DimensionError);
}

TEST_CASE("property: kl is non-negative and matches a loop oracle in both directions") {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b = 1 + rng.below(4), c = 2 + rng.below(5);
    const Tensor a = oracle::random_tensor(rng, {b, c}, -4, 4, false);
    const Tensor f = oracle::random_tensor(rng, {b, c}, -4, 4, false);
    const double fwd = kl_preservation(a, f, KlDirection::frozen_to_tuned).item();
    const double rev = kl_preservation(a, f, KlDirection::tuned_to_frozen).item();
    CHECK(fwd >= 0.0);
    CHECK(rev >= 0.0);
    CHECK(std::abs(fwd - kl_oracle(values(f), values(a), b, c)) <= 1e-12);
    CHECK(std::abs(rev - kl_oracle(values(a), values(f), b, c)) <= 1e-12);
  }
}

TEST_CASE("kl gradient flows only through the tuned logits") {
  Rng rng(6);
  for (auto dir : {KlDirection::frozen_to_tuned, KlDirection::tuned_to_frozen}) {
    const Tensor tuned = oracle::random_tensor(rng, {3, 4}, -2, 2);
    Tensor frozen = oracle::random_tensor(rng, {3, 4}, -2, 2);
    CHECK(oracle::gradient_check([&](const std::vector<Tensor>& in) { return kl_preservation(in[0], frozen, dir); },
                                 {tuned}) <= 1e-6);
    frozen.zero_grad();
    Tape tape;
    {
      TapeScope scope(&tape);
      tape.backward(kl_preservation(tuned, frozen, dir));
    }
    CHECK_FALSE(frozen.has_grad());
  }
}

TEST_CASE("loss config validation and parsing") {
  LossConfig cfg;
  cfg.kl_weight = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_kl_direction("tuned_to_frozen") == KlDirection::tuned_to_frozen);
  CHECK(to_string(KlDirection::frozen_to_tuned) == "frozen_to_tuned");
  CHECK_THROWS_AS(parse_kl_direction("sideways"), ConfigError);
}

TEST_CASE("total loss: fresh model has zero KL, lambda = 0 gives CE exactly") {
  DualEncoder backbone(small_model(), 7);
  backbone.freeze();
  Rng rng(8);
  AdaptedModel model(backbone, AlignNet(6, AlignNetConfig::proportional(6), rng));
  const Batch batch = random_batch(rng, 5, 4, 8);

  const LossEval fresh = total_loss(batch, model, LossConfig{});
  CHECK(std::abs(fresh.kl) <= 1e-12);
  CHECK(std::abs(fresh.total.item() - fresh.ce) <= 1e-12);

  for (const auto& [name, t] : model.trainable_parameters()) {
    Tensor u = t;
    for (auto& v : u.mutable_data()) v = rng.normal(0.0, 0.3);
  }
  LossConfig off;
  off.kl_weight = 0.0;
  const LossEval ce_only = total_loss(batch, model, off);
  CHECK(ce_only.total.item() == ce_only.ce);
  CHECK(ce_only.kl > 0.0);
}

TEST_CASE("total loss equals independently recomputed terms") {
  DualEncoder backbone(small_model(), 9);
  backbone.freeze();
  Rng rng(10);
  AdaptedModel model(backbone, AlignNet(6, AlignNetConfig::proportional(6), rng));
  for (const auto& [name, t] : model.trainable_parameters()) {
    Tensor u = t;
    for (auto& v : u.mutable_data()) v = rng.normal(0.0, 0.3);
  }
  const Batch batch = random_batch(rng, 6, 5, 8);
  for (double lambda : {0.0, 0.25, 1.0, 3.0}) {
    LossConfig cfg;
    cfg.kl_weight = lambda;
    const LossEval got = total_loss(batch, model, cfg);
    const Tensor tuned = model.logits(batch.images, batch.class_texts);
    const Tensor frozen = model.frozen_logits(batch.images, batch.class_texts);
    const double ce = cross_entropy(tuned, batch.labels).item();
    const double kl = kl_oracle(values(frozen), values(tuned), 6, 5);
    CHECK(std::abs(got.ce - ce) <= 1e-12);
    CHECK(std::abs(got.kl - kl) <= 1e-12);
    CHECK(std::abs(got.total.item() - (ce + lambda * kl)) <= 1e-12);
    CHECK(got.total.item() >= got.ce);
  }
}

TEST_CASE("frozen logits are gradient-isolated") {
  DualEncoder backbone(small_model(), 11);  // base weights still trainable
  Rng rng(12);
  AdaptedModel model(backbone, std::nullopt);
  for (const auto& [name, t] : model.backbone().lora_parameters()) {
    Tensor u = t;
    for (auto& v : u.mutable_data()) v = rng.normal(0.0, 0.3);
  }
  const Batch batch = random_batch(rng, 4, 3, 8);

  // The KL gradient must equal the one taken against a detached constant copy.
  auto grads = [&](bool through_model) {
    for (const auto& [name, t] : model.named_tensors()) Tensor(t).zero_grad();
    const Tensor constant = model.frozen_logits(batch.images, batch.class_texts).clone();
    Tape tape;
    {
      TapeScope scope(&tape);
      const Tensor tuned = model.logits(batch.images, batch.class_texts);
      const Tensor frozen = through_model ? model.frozen_logits(batch.images, batch.class_texts) : constant;
      CHECK(frozen.is_leaf());
      CHECK_FALSE(frozen.requires_grad());
      tape.backward(kl_preservation(tuned, frozen));
    }
    std::vector<std::vector<double>> out;
    for (const auto& [name, t] : model.named_tensors()) out.push_back(t.grad());
    return out;
  };
  CHECK(grads(true) == grads(false));
}
