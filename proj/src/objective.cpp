#include "glad/objective.hpp"

#include "glad/error.hpp"
#include "glad/models.hpp"

namespace glad {

std::string to_string(KlDirection d) {
  return d == KlDirection::frozen_to_tuned ? "frozen_to_tuned" : "tuned_to_frozen";
}

KlDirection parse_kl_direction(const std::string& name) {
  if (name == "frozen_to_tuned") return KlDirection::frozen_to_tuned;
  if (name == "tuned_to_frozen") return KlDirection::tuned_to_frozen;
  throw ConfigError("unknown kl direction '" + name + "' (expected frozen_to_tuned or tuned_to_frozen)");
}

void LossConfig::validate() const {
  if (!(kl_weight >= 0.0)) throw ConfigError("loss.kl_weight must be non-negative");
}

Tensor similarity_logits(const Tensor& f_img, const Tensor& f_txt, double temperature) {
  if (f_img.rank() != 2) throw DimensionError("similarity_logits: image embeddings must be b x d");
  const std::size_t b = f_img.dim(0), d = f_img.dim(1);
  if (f_txt.rank() == 2) {
    if (f_txt.dim(1) != d) {
      throw DimensionError("similarity_logits: widths differ " + shape_str(f_img.shape()) + " vs " +
                           shape_str(f_txt.shape()));
    }
    return scale(matmul(f_img, transpose(f_txt)), temperature);
  }
  if (f_txt.rank() != 3 || f_txt.dim(0) != b || f_txt.dim(2) != d) {
    throw DimensionError("similarity_logits: cannot pair " + shape_str(f_img.shape()) + " with " +
                         shape_str(f_txt.shape()));
  }
  const std::size_t c = f_txt.dim(1);
  std::vector<std::size_t> rows(b * c);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < c; ++k) rows[i * c + k] = i;
  const Tensor img = gather_rows(f_img, rows);
  const Tensor txt = reshape(f_txt, {b * c, d});
  return scale(reshape(sum_last(mul(img, txt)), {b, c}), temperature);
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be b x c");
  if (labels.size() != logits.dim(0)) {
    throw DataError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(logits.dim(0)) + " rows");
  }
  for (auto y : labels) {
    if (y >= logits.dim(1)) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                      std::to_string(logits.dim(1)) + " classes");
    }
  }
  return scale(mean(pick(log_softmax(logits), labels)), -1.0);
}

Tensor kl_preservation(const Tensor& logits_tuned, const Tensor& logits_frozen, KlDirection direction) {
  if (logits_tuned.shape() != logits_frozen.shape() || logits_tuned.rank() != 2) {
    throw DimensionError("kl_preservation: shapes differ " + shape_str(logits_tuned.shape()) + " vs " +
                         shape_str(logits_frozen.shape()));
  }
  const double rows = static_cast<double>(logits_tuned.dim(0));
  Tensor log_frozen;
  {
    TapeScope no_tape(nullptr);
    log_frozen = log_softmax(logits_frozen.detach());
  }
  const Tensor log_tuned = log_softmax(logits_tuned);
  Tensor kl;
  if (direction == KlDirection::frozen_to_tuned) {
    Tensor p_frozen;
    {
      TapeScope no_tape(nullptr);
      p_frozen = softmax(logits_frozen.detach());
    }
    kl = sum(mul(p_frozen, sub(log_frozen, log_tuned)));
  } else {
    kl = sum(mul(softmax(logits_tuned), sub(log_tuned, log_frozen)));
  }
  return scale(kl, 1.0 / rows);
}

LossEval total_loss(const Batch& batch, const AdaptedModel& model, const LossConfig& cfg) {
  cfg.validate();
  const Tensor tuned = model.logits(batch.images, batch.class_texts);
  const Tensor ce = cross_entropy(tuned, batch.labels);
  LossEval out;
  out.ce = ce.item();
  const Tensor frozen = model.frozen_logits(batch.images, batch.class_texts);
  if (cfg.kl_weight == 0.0) {
    // Still reported, but kept off the tape.
    TapeScope no_tape(nullptr);
    out.kl = kl_preservation(tuned.detach(), frozen, cfg.kl_direction).item();
    out.total = ce;
    return out;
  }
  const Tensor kl = kl_preservation(tuned, frozen, cfg.kl_direction);
  out.kl = kl.item();
  out.total = add(ce, scale(kl, cfg.kl_weight));
  return out;
}

}  // namespace glad
