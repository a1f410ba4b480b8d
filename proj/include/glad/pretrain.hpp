#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "glad/models.hpp"
#include "glad/synth_bench.hpp"

namespace glad {

// Classes the backbone is contrastively pretrained on.
struct PretrainCorpus {
  std::vector<std::uint32_t> class_ids;
  Matrix prototypes;
  Matrix texts;
  double sigma_img = 0.15;
  double sigma_txt = 0.02;
};

PretrainCorpus pretrain_corpus(const TaskBundle& bundle);

struct PretrainConfig {
  std::size_t epochs = 150;
  std::size_t batch_classes = 16;
  double lr = 0.05;
  double momentum = 0.9;
  // Trailing pool classes kept out of training to measure zero-shot transfer.
  std::size_t heldout_classes = 16;
  std::size_t heldout_samples_per_class = 20;
};

struct PretrainReport {
  double initial_heldout_acc = 0.0;  // percent
  double heldout_acc = 0.0;          // percent
  double chance = 0.0;               // percent
  double final_loss = 0.0;
  std::size_t steps = 0;
};

// Symmetric image/text contrastive training of the base weights, followed by
// freezing them. Throws ConfigError when the pool shares ids with
// `downstream_ids`, and ContractError when held-out zero-shot accuracy ends
// below twice chance.
PretrainReport pretrain_backbone(DualEncoder& model, const PretrainCorpus& corpus,
                                 std::span<const std::uint32_t> downstream_ids, const PretrainConfig& cfg,
                                 std::uint64_t seed);

// Percent of `images` whose nearest class text (cosine, LoRA off) matches `labels`.
double zero_shot_accuracy(const DualEncoder& model, const Matrix& images, std::span<const std::uint32_t> labels,
                          const Matrix& class_texts);

}  // namespace glad
