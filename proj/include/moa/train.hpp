#pragma once

// AdamW with decoupled weight decay, linear-warmup cosine schedule, mixup,
// soft-target cross entropy, and the epoch loop.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "moa/data.hpp"
#include "moa/model.hpp"
#include "moa/params.hpp"
#include "moa/tensor.hpp"

namespace moa {

struct AdamHyper {
  double lr_peak = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct OptState {
  AdamHyper hyper;
  int64_t step = 0;
  std::vector<std::vector<S>> m, v;  // aligned with the param store order

  explicit OptState(const ParamStore<S>& params, AdamHyper h = {}) : hyper(h) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& [name, t] : params.items()) {
      m.emplace_back(static_cast<size_t>(t.numel()), S(0));
      v.emplace_back(static_cast<size_t>(t.numel()), S(0));
    }
  }
};

// theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta), with
// bias-corrected moments. Consumes and clears the populated gradients.
template <class S>
void adamw_step(ParamStore<S>& params, OptState<S>& opt, double lr) {
  opt.step += 1;
  double bc1 = 1.0 - std::pow(opt.hyper.beta1, double(opt.step));
  double bc2 = 1.0 - std::pow(opt.hyper.beta2, double(opt.step));
  size_t pi = 0;
  for (auto& [name, t] : const_cast<std::vector<std::pair<std::string, Tensor<S>>>&>(params.items())) {
    if (!t.has_grad())
      throw ContractError("adamw: missing gradient for parameter " + name);
    auto g = t.grad();
    auto vals = t.mutable_values();
    auto& m = opt.m[pi];
    auto& v = opt.v[pi];
    for (size_t i = 0; i < m.size(); ++i) {
      double gi = double(g[i]);
      double mi = opt.hyper.beta1 * double(m[i]) + (1.0 - opt.hyper.beta1) * gi;
      double vi = opt.hyper.beta2 * double(v[i]) + (1.0 - opt.hyper.beta2) * gi * gi;
      m[i] = S(mi);
      v[i] = S(vi);
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      vals[i] = S(double(vals[i]) -
                  lr * (mhat / (std::sqrt(vhat) + opt.hyper.eps) +
                        opt.hyper.weight_decay * double(vals[i])));
    }
    t.clear_grad();
    ++pi;
  }
}

struct Schedule {
  double warmup_epochs = 20;
  double total_epochs = 300;
  int64_t steps_per_epoch = 1;
  double lr_peak = 0.009;
  double lr_min = 1e-6;
};

// Linear 0 -> lr_peak over warmup, then cosine decay to lr_min; continuous
// at the boundary (both sides equal lr_peak).
inline double lr_at(const Schedule& s, double epoch_fraction) {
  if (s.warmup_epochs > 0 && epoch_fraction < s.warmup_epochs)
    return s.lr_peak * epoch_fraction / s.warmup_epochs;
  double span = s.total_epochs - s.warmup_epochs;
  double t = span > 0 ? (epoch_fraction - s.warmup_epochs) / span : 1.0;
  t = std::min(std::max(t, 0.0), 1.0);
  return s.lr_min + (s.lr_peak - s.lr_min) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// lambda ~ Beta(alpha, alpha); x <- lambda*x + (1-lambda)*x[perm], same for
// the one-hot targets. Runs on raw values (augmentation, not differentiated).
template <class S>
void mixup(std::vector<S>& batch_x, std::vector<S>& batch_y, int64_t batch, double alpha,
           std::mt19937_64& rng) {
  if (alpha <= 0) throw ContractError("mixup: alpha must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  double a = gamma(rng), b = gamma(rng);
  double lambda = a / (a + b);
  std::vector<int64_t> perm(static_cast<size_t>(batch));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  int64_t xe = static_cast<int64_t>(batch_x.size()) / batch;
  int64_t ye = static_cast<int64_t>(batch_y.size()) / batch;
  std::vector<S> x0 = batch_x, y0 = batch_y;
  for (int64_t i = 0; i < batch; ++i) {
    const S* xs = x0.data() + perm[static_cast<size_t>(i)] * xe;
    const S* ys = y0.data() + perm[static_cast<size_t>(i)] * ye;
    S* xd = batch_x.data() + i * xe;
    S* yd = batch_y.data() + i * ye;
    for (int64_t j = 0; j < xe; ++j) xd[j] = S(lambda) * xd[j] + S(1.0 - lambda) * xs[j];
    for (int64_t j = 0; j < ye; ++j) yd[j] = S(lambda) * yd[j] + S(1.0 - lambda) * ys[j];
  }
}

// Mean over the batch of -sum(target * log softmax(logits)).
template <class S>
Tensor<S> cross_entropy_soft(const Tensor<S>& logits, const Tensor<S>& target) {
  if (logits.shape() != target.shape())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(target.shape()));
  int64_t batch = logits.size(0);
  Tensor<S> nll = mul(target, log_softmax_lastdim(logits));
  return scale(sum_all(nll), S(-1) / static_cast<S>(batch));
}

template <class S>
std::vector<S> one_hot(const std::vector<int>& labels, int64_t num_classes) {
  std::vector<S> y(labels.size() * static_cast<size_t>(num_classes), S(0));
  for (size_t i = 0; i < labels.size(); ++i)
    y[i * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[i])] = S(1);
  return y;
}

struct TrainRecipe {
  int64_t epochs = 1;
  int64_t batch_size = 128;
  double lr_peak = 0.009;
  double lr_min = 1e-6;
  double weight_decay = 0.05;
  double warmup_epochs = 20;
  double mixup_alpha = 0.8;  // <= 0 disables mixup
  uint64_t seed = 42;
};

struct EpochMetrics {
  int64_t epoch = 0;
  double lr = 0, train_loss = 0, train_acc = 0, eval_acc = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  int64_t steps = 0;
};

template <class S>
double evaluate_accuracy(const Model<S>& model, const LabeledImageSet& set, int64_t batch_size) {
  int64_t correct = 0;
  for (const auto& idx : batch_indices(set.size(), batch_size, false, 0)) {
    auto [x, labels] = make_batch<S>(set, idx);
    Tensor<S> logits = model.forward(x, false, nullptr);
    int64_t k = logits.size(1);
    auto vals = logits.values();
    for (size_t i = 0; i < labels.size(); ++i) {
      const S* row = vals.data() + static_cast<int64_t>(i) * k;
      int64_t best = 0;
      for (int64_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      if (best == labels[i]) ++correct;
    }
  }
  return double(correct) / double(set.size());
}

// One epoch loop over shuffled minibatches: forward (train mode) -> soft
// cross entropy -> backward -> adamw at the scheduled lr. Aborts on a
// non-finite loss or gradient norm. `max_steps` <= 0 means no cap.
template <class S>
TrainResult train(Model<S>& model, const LabeledImageSet& train_set,
                  const LabeledImageSet& eval_set, const TrainRecipe& recipe,
                  std::ostream* log = nullptr, int64_t max_steps = 0) {
  if (train_set.num_classes != model.cfg.num_classes)
    throw ConfigError("train: dataset has " + std::to_string(train_set.num_classes) +
                      " classes, model expects " + std::to_string(model.cfg.num_classes));
  int64_t steps_per_epoch =
      (train_set.size() + recipe.batch_size - 1) / recipe.batch_size;
  Schedule sched{recipe.warmup_epochs, double(recipe.epochs), steps_per_epoch, recipe.lr_peak,
                 recipe.lr_min};
  OptState<S> opt(model.params,
                  AdamHyper{recipe.lr_peak, recipe.weight_decay, 0.9, 0.999, 1e-8});
  std::mt19937_64 rng(recipe.seed);
  if (log)
    *log << "# seed = " << recipe.seed << "\n"
         << "# epoch, lr, train_loss, train_acc, eval_acc\n";
  TrainResult result;
  int64_t k = model.cfg.num_classes;
  for (int64_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    double loss_sum = 0;
    int64_t seen = 0, correct = 0;
    double lr_last = 0;
    auto batches = batch_indices(train_set.size(), recipe.batch_size, true,
                                 recipe.seed + static_cast<uint64_t>(epoch) + 1);
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      if (max_steps > 0 && result.steps >= max_steps) break;
      auto [x, labels] = make_batch<S>(train_set, batches[bi]);
      int64_t b = static_cast<int64_t>(labels.size());
      std::vector<S> yv = one_hot<S>(labels, k);
      if (recipe.mixup_alpha > 0) {
        std::vector<S> xv(x.values().begin(), x.values().end());
        mixup(xv, yv, b, recipe.mixup_alpha, rng);
        x = Tensor<S>::from(x.shape(), std::move(xv));
      }
      Tensor<S> y = Tensor<S>::from({b, k}, std::move(yv));
      double lr = lr_at(sched, double(epoch) + double(bi) / double(steps_per_epoch));
      lr_last = lr;
      Tensor<S> logits, loss;
      {
        Tape<S> tape;
        logits = model.forward(x, true, &rng);
        loss = cross_entropy_soft(logits, y);
        double lv = double(loss.item());
        if (!std::isfinite(lv))
          throw NumericsError("train: non-finite loss at step " + std::to_string(result.steps) +
                              " (lr " + std::to_string(lr) + ")");
        tape.backward(loss);
      }
      double grad_sq = 0;
      for (const auto& [name, t] : model.params.items())
        for (S g : t.grad()) grad_sq += double(g) * double(g);
      if (!std::isfinite(grad_sq))
        throw NumericsError("train: non-finite gradient norm at step " +
                            std::to_string(result.steps) + " (lr " + std::to_string(lr) +
                            ", loss " + std::to_string(double(loss.item())) + ")");
      adamw_step(model.params, opt, lr);
      // training accuracy against the pre-mix hard labels
      auto lv = logits.values();
      for (size_t i = 0; i < labels.size(); ++i) {
        const S* row = lv.data() + static_cast<int64_t>(i) * k;
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
          if (row[j] > row[best]) best = j;
        if (best == labels[i]) ++correct;
      }
      loss_sum += double(loss.item()) * double(b);
      seen += b;
      result.steps += 1;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr_last;
    em.train_loss = seen ? loss_sum / double(seen) : 0;
    em.train_acc = seen ? double(correct) / double(seen) : 0;
    em.eval_acc = evaluate_accuracy(model, eval_set, recipe.batch_size);
    result.metrics.push_back(em);
    if (log) {
      *log << em.epoch << "," << std::fixed << std::setprecision(6) << em.lr << ","
           << em.train_loss << "," << em.train_acc << "," << em.eval_acc << "\n";
      log->flush();
    }
    if (max_steps > 0 && result.steps >= max_steps) break;
  }
  return result;
}

}  // namespace moa
