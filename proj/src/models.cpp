#include "glad/models.hpp"

#include <algorithm>
#include <cmath>

#include "glad/error.hpp"
#include "glad/objective.hpp"

namespace glad {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + name + "' (expected relu or tanh)");
}

Tensor activate(const Tensor& x, Activation a) { return a == Activation::relu ? relu(x) : tanh(x); }

AlignNetConfig AlignNetConfig::proportional(std::size_t embed_dim) {
  AlignNetConfig cfg;
  cfg.hidden1 = std::max<std::size_t>(1, embed_dim / 2);
  cfg.hidden2 = std::max<std::size_t>(1, embed_dim / 4);
  return cfg;
}

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

// x W^T (+ bias) for x: b x in, W: out x in.
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor h = matmul(x, transpose(weight));
  return bias.defined() ? add(h, bias) : h;
}

}  // namespace

// ---- LoraLinear -------------------------------------------------------------

LoraLinear::LoraLinear(std::size_t in_features, std::size_t out_features, const LoraConfig& cfg, Rng& rng,
                       bool with_bias)
    : in_(in_features), out_(out_features), rank_(cfg.rank), gamma_(cfg.gamma) {
  if (rank_ == 0 || 2 * rank_ > std::min(in_, out_)) {
    throw ConfigError("lora rank " + std::to_string(rank_) + " must satisfy 1 <= r <= min(" +
                      std::to_string(out_) + "," + std::to_string(in_) + ")/2");
  }
  weight_ = gaussian({out_, in_}, std::sqrt(2.0 / static_cast<double>(in_)), rng, true);
  if (with_bias) bias_ = Tensor::zeros({out_}, true);
  a_ = gaussian({rank_, in_}, cfg.init_std, rng, true);
  b_ = Tensor::zeros({out_, rank_}, true);
}

Tensor LoraLinear::forward(const Tensor& x, bool use_lora) const {
  if (x.rank() != 2 || x.dim(1) != in_) {
    throw DimensionError("lora layer expects width " + std::to_string(in_) + ", got input " +
                         shape_str(x.shape()));
  }
  Tensor h = matmul(x, transpose(weight_));
  if (use_lora) {
    Tensor low = matmul(matmul(x, transpose(a_)), transpose(b_));
    h = add(h, scale(low, gamma_));
  }
  return bias_.defined() ? add(h, bias_) : h;
}

Tensor LoraLinear::merged_weight() const {
  TapeScope no_tape(nullptr);
  return add(weight_, scale(matmul(b_, a_), gamma_)).detach();
}

void LoraLinear::merge() {
  if (merged_) throw ContractError("lora layer already merged");
  const Tensor merged = merged_weight();
  std::copy(merged.data().begin(), merged.data().end(), weight_.mutable_data().begin());
  std::fill(b_.mutable_data().begin(), b_.mutable_data().end(), 0.0);
  merged_ = true;
}

void LoraLinear::freeze_base() {
  weight_.set_requires_grad(false);
  if (bias_.defined()) bias_.set_requires_grad(false);
}

// ---- EncoderTower / DualEncoder ---------------------------------------------

EncoderTower::EncoderTower(const ModelConfig& cfg, Rng& rng)
    : first_(cfg.d_in, cfg.hidden, cfg.lora, rng),
      second_(cfg.hidden, cfg.embed, cfg.lora, rng),
      activation_(cfg.activation) {}

Tensor EncoderTower::forward(const Tensor& x, bool use_lora) const {
  return second_.forward(activate(first_.forward(x, use_lora), activation_), use_lora);
}

DualEncoder::DualEncoder(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      seed_(seed),
      image_([&] {
        Rng rng(mix_seed(seed, 101));
        return EncoderTower(cfg, rng);
      }()),
      text_([&] {
        Rng rng(mix_seed(seed, 202));
        return EncoderTower(cfg, rng);
      }()) {
  if (!(cfg.temperature > 0.0)) throw ConfigError("model.temperature must be positive");
}

Tensor DualEncoder::encode_image(const Tensor& x, bool use_lora) const {
  if (x.rank() != 2 || x.dim(1) != cfg_.d_in) {
    throw DimensionError("encode_image expects width " + std::to_string(cfg_.d_in) + ", got " +
                         shape_str(x.shape()));
  }
  return l2_normalize(image_.forward(x, use_lora));
}

Tensor DualEncoder::encode_text(const Tensor& t, bool use_lora) const {
  if (t.rank() != 2 || t.dim(1) != cfg_.d_in) {
    throw DimensionError("encode_text expects width " + std::to_string(cfg_.d_in) + ", got " +
                         shape_str(t.shape()));
  }
  return l2_normalize(text_.forward(t, use_lora));
}

void DualEncoder::freeze() {
  for (auto* tower : {&image_, &text_}) {
    tower->first().freeze_base();
    tower->second().freeze_base();
  }
  frozen_ = true;
}

namespace {

void append_layer(std::vector<NamedTensor>& out, const std::string& prefix, const LoraLinear& layer,
                  bool base, bool lora) {
  if (base) {
    out.emplace_back(prefix + ".weight", layer.weight());
    if (layer.has_bias()) out.emplace_back(prefix + ".bias", layer.bias());
  }
  if (lora) {
    out.emplace_back(prefix + ".lora_a", layer.lora_a());
    out.emplace_back(prefix + ".lora_b", layer.lora_b());
  }
}

std::vector<NamedTensor> collect(const DualEncoder& m, bool base, bool lora) {
  std::vector<NamedTensor> out;
  append_layer(out, "image.fc1", m.image_tower().first(), base, lora);
  append_layer(out, "image.fc2", m.image_tower().second(), base, lora);
  append_layer(out, "text.fc1", m.text_tower().first(), base, lora);
  append_layer(out, "text.fc2", m.text_tower().second(), base, lora);
  return out;
}

void deep_copy_layer(LoraLinear& layer) {
  layer.weight() = layer.weight().clone();
  if (layer.has_bias()) layer.bias() = layer.bias().clone();
  layer.lora_a() = layer.lora_a().clone();
  layer.lora_b() = layer.lora_b().clone();
}

}  // namespace

std::vector<NamedTensor> DualEncoder::base_parameters() const { return collect(*this, true, false); }

std::vector<NamedTensor> DualEncoder::lora_parameters() const { return collect(*this, false, true); }

std::vector<NamedTensor> DualEncoder::named_tensors() const { return collect(*this, true, true); }

DualEncoder DualEncoder::clone() const {
  DualEncoder copy = *this;
  for (auto* tower : {&copy.image_, &copy.text_}) {
    deep_copy_layer(tower->first());
    deep_copy_layer(tower->second());
  }
  return copy;
}

void DualEncoder::reset_lora(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 303));
  for (auto* tower : {&image_, &text_}) {
    for (auto* layer : {&tower->first(), &tower->second()}) {
      for (auto& v : layer->lora_a().mutable_data()) v = rng.normal(0.0, cfg_.lora.init_std);
      std::fill(layer->lora_b().mutable_data().begin(), layer->lora_b().mutable_data().end(), 0.0);
      layer->lora_a().zero_grad();
      layer->lora_b().zero_grad();
    }
  }
}

// ---- AlignNet -----------------------------------------------------------------

DenseLayer::DenseLayer(std::size_t in, std::size_t out, Rng& rng, bool zero_init)
    : weight(zero_init ? Tensor::zeros({out, in}, true)
                       : gaussian({out, in}, std::sqrt(2.0 / static_cast<double>(in)), rng, true)),
      bias(Tensor::zeros({out}, true)) {}

Tensor DenseLayer::forward(const Tensor& x) const { return affine(x, weight, bias); }

AlignNet::AlignNet(std::size_t embed_dim, const AlignNetConfig& cfg, Rng& rng) : embed_(embed_dim), cfg_(cfg) {
  if (embed_dim == 0 || cfg.hidden1 == 0 || cfg.hidden2 == 0) {
    throw ConfigError("alignnet dimensions must be positive");
  }
  layers_.emplace_back(2 * embed_dim, cfg.hidden1, rng, false);
  layers_.emplace_back(cfg.hidden1, cfg.hidden2, rng, false);
  layers_.emplace_back(cfg.hidden2, embed_dim, rng, true);
}

Tensor AlignNet::bias(const Tensor& joint) const {
  if (joint.rank() != 2 || joint.dim(1) != 2 * embed_) {
    throw DimensionError("alignnet expects joint width " + std::to_string(2 * embed_) + ", got " +
                         shape_str(joint.shape()));
  }
  Tensor h = activate(layers_[0].forward(joint), cfg_.activation);
  h = activate(layers_[1].forward(h), cfg_.activation);
  return layers_[2].forward(h);
}

Tensor AlignNet::adjust(const Tensor& f_img, const Tensor& f_txt) const {
  if (f_img.rank() != 2 || f_txt.rank() != 2 || f_img.dim(1) != embed_ || f_txt.dim(1) != embed_) {
    throw DimensionError("alignnet_adjust: embeddings must be ? x " + std::to_string(embed_) + ", got " +
                         shape_str(f_img.shape()) + " and " + shape_str(f_txt.shape()));
  }
  const std::size_t b = f_img.dim(0), c = f_txt.dim(0);
  std::vector<std::size_t> img_rows(b * c), txt_rows(b * c);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      img_rows[i * c + k] = i;
      txt_rows[i * c + k] = k;
    }
  }
  const Tensor img = gather_rows(f_img, img_rows);
  const Tensor txt = gather_rows(f_txt, txt_rows);
  Tensor adjusted = add(txt, bias(concat(img, txt)));
  if (cfg_.renormalize) adjusted = l2_normalize(adjusted);
  return reshape(adjusted, {b, c, embed_});
}

std::vector<NamedTensor> AlignNet::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "align.fc" + std::to_string(i + 1);
    out.emplace_back(prefix + ".weight", layers_[i].weight);
    out.emplace_back(prefix + ".bias", layers_[i].bias);
  }
  return out;
}

// ---- AdaptedModel -------------------------------------------------------------

AdaptedModel::AdaptedModel(DualEncoder backbone, std::optional<AlignNet> alignnet)
    : backbone_(std::move(backbone)), alignnet_(std::move(alignnet)) {
  if (alignnet_ && alignnet_->embed_dim() != backbone_.config().embed) {
    throw DimensionError("alignnet output dimension must equal the text embedding dimension");
  }
}

Tensor AdaptedModel::logits(const Tensor& images, const Tensor& class_texts, bool evaluating) const {
  const Tensor f_img = backbone_.encode_image(images);
  const Tensor f_txt = backbone_.encode_text(class_texts);
  const bool use_align = alignnet_ && (!evaluating || alignnet_at_eval);
  if (!use_align) return similarity_logits(f_img, f_txt, backbone_.temperature());
  return similarity_logits(f_img, alignnet_->adjust(f_img, f_txt), backbone_.temperature());
}

Tensor AdaptedModel::frozen_logits(const Tensor& images, const Tensor& class_texts) const {
  TapeScope no_tape(nullptr);
  const Tensor f_img = backbone_.encode_image(images, false);
  const Tensor f_txt = backbone_.encode_text(class_texts, false);
  return similarity_logits(f_img, f_txt, backbone_.temperature());
}

std::vector<NamedTensor> AdaptedModel::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& nt : backbone_.named_tensors()) {
    if (nt.second.requires_grad()) out.push_back(nt);
  }
  if (alignnet_) {
    for (auto& nt : alignnet_->parameters()) out.push_back(nt);
  }
  return out;
}

std::vector<NamedTensor> AdaptedModel::named_tensors() const {
  auto out = backbone_.named_tensors();
  if (alignnet_) {
    for (auto& nt : alignnet_->parameters()) out.push_back(nt);
  }
  return out;
}

std::size_t parameter_count(const std::vector<NamedTensor>& tensors) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

}  // namespace glad
