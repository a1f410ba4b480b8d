#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "glad/rng.hpp"
#include "glad/tensor.hpp"

namespace glad {

using NamedTensor = std::pair<std::string, Tensor>;

enum class Activation { relu, tanh };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);
Tensor activate(const Tensor& x, Activation a);

struct LoraConfig {
  std::size_t rank = 8;
  // Residual scale; 16 / rank is the usual LoRA convention.
  double gamma = 2.0;
  double init_std = 0.02;
};

struct ModelConfig {
  std::size_t d_in = 32;
  std::size_t hidden = 64;
  std::size_t embed = 16;
  double temperature = 10.0;
  Activation activation = Activation::relu;
  LoraConfig lora;
};

struct AlignNetConfig {
  // Desk-scale defaults keep the 2d -> d/2 -> d/4 -> d proportions.
  std::size_t hidden1 = 8;
  std::size_t hidden2 = 4;
  Activation activation = Activation::relu;
  // Re-project adjusted text embeddings onto the unit sphere.
  bool renormalize = true;

  static AlignNetConfig proportional(std::size_t embed_dim);
};

// Linear map with a frozen base weight and a trainable low-rank residual:
//   h = W x + gamma * B (A x) + bias
// W is M x N, A is r x N, B is M x r. B starts at zero.
class LoraLinear {
 public:
  LoraLinear(std::size_t in_features, std::size_t out_features, const LoraConfig& cfg, Rng& rng,
             bool with_bias = true);

  // x is batch x N. With use_lora == false the residual branch is skipped.
  Tensor forward(const Tensor& x, bool use_lora = true) const;

  // W + gamma * B A, detached.
  Tensor merged_weight() const;
  // Folds the residual into W and zeroes B. Merging is one-shot: a second
  // call throws ContractError.
  void merge();
  bool merged() const { return merged_; }

  void freeze_base();
  bool base_frozen() const { return !weight_.requires_grad(); }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  std::size_t rank() const { return rank_; }
  double gamma() const { return gamma_; }
  void set_gamma(double g) { gamma_ = g; }
  bool has_bias() const { return bias_.defined(); }

  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& bias() const { return bias_; }
  Tensor& lora_a() { return a_; }
  const Tensor& lora_a() const { return a_; }
  Tensor& lora_b() { return b_; }
  const Tensor& lora_b() const { return b_; }

 private:
  std::size_t in_, out_, rank_;
  double gamma_;
  Tensor weight_, bias_, a_, b_;
  bool merged_ = false;
};

// Two LoRA-adapted linear layers with a nonlinearity in between.
class EncoderTower {
 public:
  EncoderTower(const ModelConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, bool use_lora = true) const;

  LoraLinear& first() { return first_; }
  const LoraLinear& first() const { return first_; }
  LoraLinear& second() { return second_; }
  const LoraLinear& second() const { return second_; }

 private:
  LoraLinear first_, second_;
  Activation activation_;
};

// Toy stand-in for a CLIP-style image/text dual encoder.
class DualEncoder {
 public:
  DualEncoder(const ModelConfig& cfg, std::uint64_t seed);

  // Both return unit-norm rows of width cfg.embed.
  Tensor encode_image(const Tensor& x, bool use_lora = true) const;
  Tensor encode_text(const Tensor& t, bool use_lora = true) const;

  // Base weights stop requiring grad; LoRA factors become the only
  // trainable backbone tensors.
  void freeze();
  bool frozen() const { return frozen_; }

  std::vector<NamedTensor> base_parameters() const;
  std::vector<NamedTensor> lora_parameters() const;
  std::vector<NamedTensor> named_tensors() const;

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  double temperature() const { return cfg_.temperature; }

  EncoderTower& image_tower() { return image_; }
  const EncoderTower& image_tower() const { return image_; }
  EncoderTower& text_tower() { return text_; }
  const EncoderTower& text_tower() const { return text_; }

  // Deep copy (tensors are not shared with the source).
  DualEncoder clone() const;

  // Re-draws all LoRA A factors from the given seed and zeroes B.
  void reset_lora(std::uint64_t seed);

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  EncoderTower image_, text_;
  bool frozen_ = false;
};

struct DenseLayer {
  Tensor weight;  // out x in
  Tensor bias;    // out

  DenseLayer(std::size_t in, std::size_t out, Rng& rng, bool zero_init);
  Tensor forward(const Tensor& x) const;
};

// MLP producing an additive, image-conditioned bias for text embeddings:
//   adjusted(i, c) = normalize(f_t[c] + MLP([f_i[i]; f_t[c]]))
// The final layer starts at zero so the initial adjustment is the identity.
class AlignNet {
 public:
  AlignNet(std::size_t embed_dim, const AlignNetConfig& cfg, Rng& rng);

  // f_img: b x d, f_txt: c x d -> b x c x d.
  Tensor adjust(const Tensor& f_img, const Tensor& f_txt) const;
  // Bias for already-concatenated pairs: n x 2d -> n x d.
  Tensor bias(const Tensor& joint) const;

  std::vector<NamedTensor> parameters() const;
  const AlignNetConfig& config() const { return cfg_; }
  std::size_t embed_dim() const { return embed_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

 private:
  std::size_t embed_;
  AlignNetConfig cfg_;
  std::vector<DenseLayer> layers_;
};

// Backbone plus optional AlignNet head: the model being adapted.
class AdaptedModel {
 public:
  AdaptedModel(DualEncoder backbone, std::optional<AlignNet> alignnet);

  // Tuned logits (LoRA on, AlignNet when present). `evaluating` honours
  // alignnet_at_eval.
  Tensor logits(const Tensor& images, const Tensor& class_texts, bool evaluating = false) const;
  // Backbone with the LoRA branch disabled and no AlignNet, never recorded.
  Tensor frozen_logits(const Tensor& images, const Tensor& class_texts) const;

  std::vector<NamedTensor> trainable_parameters() const;
  std::vector<NamedTensor> named_tensors() const;

  DualEncoder& backbone() { return backbone_; }
  const DualEncoder& backbone() const { return backbone_; }
  bool has_alignnet() const { return alignnet_.has_value(); }
  AlignNet& alignnet() { return *alignnet_; }
  const AlignNet& alignnet() const { return *alignnet_; }

  bool alignnet_at_eval = true;

 private:
  DualEncoder backbone_;
  std::optional<AlignNet> alignnet_;
};

std::size_t parameter_count(const std::vector<NamedTensor>& tensors);

// ---- checkpoints ----------------------------------------------------------
//
// Layout (little-endian):
//   8 bytes  magic "GLADCKPT"
//   u32      format version (1)
//   u64      manifest length L
//   L bytes  manifest JSON: dims, lora rank/gamma, activation, freeze flags,
//            seed, alignnet config, and {name, shape, offset} per tensor
//   ...      f64 payload, tensors concatenated in manifest order
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const AdaptedModel& model);
AdaptedModel load_checkpoint(const std::filesystem::path& path);

void save_backbone(const std::filesystem::path& path, const DualEncoder& model);
DualEncoder load_backbone(const std::filesystem::path& path);

}  // namespace glad
