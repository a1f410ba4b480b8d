#pragma once

#include <span>
#include <string>
#include <vector>

#include "glad/tensor.hpp"

namespace glad {

class AdaptedModel;

enum class KlDirection {
  frozen_to_tuned,  // KL(p_frozen || p_tuned)
  tuned_to_frozen,  // KL(p_tuned || p_frozen)
};

std::string to_string(KlDirection d);
KlDirection parse_kl_direction(const std::string& name);

struct LossConfig {
  double kl_weight = 1.0;
  KlDirection kl_direction = KlDirection::frozen_to_tuned;

  void validate() const;
};

// temp * <f_img[i], f_txt[k]> for f_txt of shape c x d, or
// temp * <f_img[i], f_txt[i][k]> for image-conditioned text of shape b x c x d.
Tensor similarity_logits(const Tensor& f_img, const Tensor& f_txt, double temperature);

// Mean over rows of -log_softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Mean over rows of KL between the tuned and frozen distributions. Frozen
// logits are treated as constants.
Tensor kl_preservation(const Tensor& logits_tuned, const Tensor& logits_frozen,
                       KlDirection direction = KlDirection::frozen_to_tuned);

struct Batch {
  Tensor images;                    // b x d_in
  std::vector<std::size_t> labels;  // indices into class_texts rows
  Tensor class_texts;               // c x d_in
};

struct LossEval {
  Tensor total;
  double ce = 0.0;
  double kl = 0.0;
};

// L = L_CE + kl_weight * L_KL against the model's frozen backbone path.
LossEval total_loss(const Batch& batch, const AdaptedModel& model, const LossConfig& cfg);

}  // namespace glad
