#include "glad/pretrain.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

#include "glad/error.hpp"
#include "glad/objective.hpp"
#include "glad/optimizer.hpp"

namespace glad {

PretrainCorpus pretrain_corpus(const TaskBundle& bundle) {
  PretrainCorpus c;
  c.class_ids = bundle.pretrain_ids;
  c.prototypes = bundle.pretrain_prototypes;
  c.texts = bundle.pretrain_texts;
  c.sigma_img = bundle.spec.sigma_img;
  c.sigma_txt = bundle.spec.sigma_txt;
  return c;
}

double zero_shot_accuracy(const DualEncoder& model, const Matrix& images, std::span<const std::uint32_t> labels,
                          const Matrix& class_texts) {
  if (images.rows == 0) throw ContractError("zero_shot_accuracy: no images");
  TapeScope no_tape(nullptr);
  const Tensor f_img = model.encode_image(images.to_tensor(), false);
  const Tensor f_txt = model.encode_text(class_texts.to_tensor(), false);
  const Tensor logits = similarity_logits(f_img, f_txt, 1.0);
  const std::size_t c = class_texts.rows;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < images.rows; ++i) {
    const auto row = logits.data().subspan(i * c, c);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[i]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(images.rows);
}

namespace {

struct HeldoutSet {
  Matrix images;
  std::vector<std::uint32_t> labels;
  Matrix texts;
};

HeldoutSet make_heldout(const PretrainCorpus& corpus, std::size_t first, const PretrainConfig& cfg, Rng& rng) {
  HeldoutSet h;
  const std::size_t n = corpus.prototypes.rows - first;
  const std::size_t d = corpus.prototypes.cols;
  h.texts = Matrix(n, d);
  h.images = Matrix(n * cfg.heldout_samples_per_class, d);
  std::size_t r = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::copy_n(corpus.texts.row(first + c), d, h.texts.row(c));
    for (std::size_t k = 0; k < cfg.heldout_samples_per_class; ++k, ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        h.images.row(r)[j] = corpus.prototypes.row(first + c)[j] + corpus.sigma_img * rng.normal();
      }
      h.labels.push_back(static_cast<std::uint32_t>(c));
    }
  }
  return h;
}

}  // namespace

PretrainReport pretrain_backbone(DualEncoder& model, const PretrainCorpus& corpus,
                                 std::span<const std::uint32_t> downstream_ids, const PretrainConfig& cfg,
                                 std::uint64_t seed) {
  const std::unordered_set<std::uint32_t> pool(corpus.class_ids.begin(), corpus.class_ids.end());
  for (auto id : downstream_ids) {
    if (pool.contains(id)) {
      throw ConfigError("pretraining pool shares class id " + std::to_string(id) + " with downstream classes");
    }
  }
  if (model.frozen()) throw ContractError("pretrain_backbone: backbone is already frozen");
  const std::size_t n_classes = corpus.prototypes.rows;
  if (cfg.heldout_classes < 2 || cfg.heldout_classes + 2 > n_classes) {
    throw ConfigError("pretrain.heldout_classes must leave at least two training classes");
  }
  if (cfg.batch_classes < 2) throw ConfigError("pretrain.batch_classes must be at least 2");
  const std::size_t n_train = n_classes - cfg.heldout_classes;
  const std::size_t d = corpus.prototypes.cols;

  Rng rng(mix_seed(seed, 404));
  Rng heldout_rng(mix_seed(seed, 405));
  const HeldoutSet heldout = make_heldout(corpus, n_train, cfg, heldout_rng);

  PretrainReport report;
  report.chance = 100.0 / static_cast<double>(cfg.heldout_classes);
  report.initial_heldout_acc = zero_shot_accuracy(model, heldout.images, heldout.labels, heldout.texts);

  ParamSet params(model.base_parameters());
  const std::size_t batch = std::min(cfg.batch_classes, n_train);
  const std::size_t steps_per_epoch = (n_train + batch - 1) / batch;
  UpdateRule rule;
  rule.kind = UpdateKind::sgd_momentum;
  rule.base_lr = cfg.lr;
  rule.momentum = cfg.momentum;
  rule.total_steps = std::max<std::size_t>(1, cfg.epochs * steps_per_epoch);
  UpdateState state;

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n_train; start += batch) {
      const std::size_t k = std::min(batch, n_train - start);
      if (k < 2) continue;
      Matrix images(k, d), texts(k, d);
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t c = order[start + i];
        for (std::size_t j = 0; j < d; ++j) {
          images.row(i)[j] = corpus.prototypes.row(c)[j] + corpus.sigma_img * rng.normal();
          texts.row(i)[j] = corpus.prototypes.row(c)[j] + corpus.sigma_txt * rng.normal();
        }
      }
      std::vector<std::size_t> diag(k);
      std::iota(diag.begin(), diag.end(), 0);
      const Tensor x = images.to_tensor(), tx = texts.to_tensor();
      const LossFn loss_fn = [&] {
        const Tensor logits =
            similarity_logits(model.encode_image(x, false), model.encode_text(tx, false), model.temperature());
        const Tensor loss = scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), 0.5);
        return LossEval{loss, loss.item(), 0.0};
      };
      const GradientEval ge = compute_gradient(loss_fn, params);
      report.final_loss = ge.loss;
      apply_update(params, ge.grad, rule, state, t++);
    }
  }
  report.steps = t;
  model.freeze();
  report.heldout_acc = zero_shot_accuracy(model, heldout.images, heldout.labels, heldout.texts);
  if (report.heldout_acc < 2.0 * report.chance) {
    throw ContractError("pretraining reached only " + std::to_string(report.heldout_acc) +
                        "% held-out zero-shot accuracy (chance " + std::to_string(report.chance) + "%)");
  }
  return report;
}

}  // namespace glad
