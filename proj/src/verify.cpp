#include "moa/verify.hpp"

#include "moa/moa_block.hpp"
#include "moa/train.hpp"

namespace moa {

namespace {

using D = double;

GradCheckCase check_linear(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  LinearLayer<D> layer(ps, "linear", 5, 4);
  Tensor<D> x = detail::random_tensor<D>({3, 5}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&layer, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(layer.forward(x), pr);
  };
  auto report = finite_diff_grad<D>(
      loss_fn, {{"linear.weight", layer.weight}, {"linear.bias", layer.bias}, {"linear.input", x}});
  return {"linear", std::move(report)};
}

GradCheckCase check_layernorm(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  LayerNorm<D> ln(ps, "ln", 6);
  Tensor<D> x = detail::random_tensor<D>({4, 6}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&ln, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(ln.forward(x), pr);
  };
  auto report = finite_diff_grad<D>(
      loss_fn, {{"ln.gamma", ln.gamma}, {"ln.beta", ln.beta}, {"ln.input", x}});
  return {"layernorm", std::move(report)};
}

GradCheckCase check_gelu(uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<D> x = detail::random_tensor<D>({3, 7}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(gelu(x), pr);
  };
  auto report = finite_diff_grad<D>(loss_fn, {{"gelu.input", x}});
  return {"gelu", std::move(report)};
}

GradCheckCase check_conv1x1(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  LinearLayer<D> layer(ps, "conv", 3, 5);
  Tensor<D> x = detail::random_tensor<D>({2, 4, 4, 3}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&layer, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(conv1x1(x, layer), pr);
  };
  auto report = finite_diff_grad<D>(
      loss_fn, {{"conv.weight", layer.weight}, {"conv.bias", layer.bias}, {"conv.input", x}});
  return {"conv1x1", std::move(report)};
}

GradCheckCase check_softmax(uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<D> x = detail::random_tensor<D>({4, 6}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(softmax_lastdim(x), pr);
  };
  auto report = finite_diff_grad<D>(loss_fn, {{"softmax.input", x}});
  return {"softmax", std::move(report)};
}

GradCheckCase check_window_msa(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  WindowMsaLayer<D> msa(ps, "msa", 8, 2, 2);
  Tensor<D> x = detail::random_tensor<D>({2, 4, 8}, rng);  // 2 windows of 2x2 tokens
  x.set_requires_grad(true);
  auto loss_fn = [&msa, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(msa.forward(x), pr);
  };
  std::vector<std::pair<std::string, Tensor<D>>> checked{{"msa.input", x}};
  for (const auto& [name, t] : ps.items()) checked.emplace_back(name, t);
  auto report = finite_diff_grad<D>(loss_fn, std::move(checked));
  return {"window-msa", std::move(report)};
}

GradCheckCase check_local_block(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  LocalBlock<D> block(ps, "block", 8, 2, 2, 0.0);
  Tensor<D> x = detail::random_tensor<D>({2, 4, 8}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&block, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(block.forward(x, false, nullptr), pr);
  };
  std::vector<std::pair<std::string, Tensor<D>>> checked{{"block.input", x}};
  for (const auto& [name, t] : ps.items()) checked.emplace_back(name, t);
  auto report = finite_diff_grad<D>(loss_fn, std::move(checked));
  return {"local-block", std::move(report)};
}

GradCheckCase check_patch_merge(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  PatchMerge<D> merge(ps, "merge", 4);
  Tensor<D> x = detail::random_tensor<D>({2, 4, 4, 4}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&merge, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(merge.forward(x), pr);
  };
  std::vector<std::pair<std::string, Tensor<D>>> checked{{"merge.input", x}};
  for (const auto& [name, t] : ps.items()) checked.emplace_back(name, t);
  auto report = finite_diff_grad<D>(loss_fn, std::move(checked));
  return {"patch-merge", std::move(report)};
}

// The spec'd micro instance: B=1, H=W=8, C=8, q=4, k=6, s=4, p=1, R=2.
GradCheckCase check_moa(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  MoaGeometry g;
  g.height = g.width = 8;
  g.channels = 8;
  g.reduction = 2;
  g.query_patch = 4;
  g.kv_patch = 6;
  g.kv_stride = 4;
  g.kv_padding = 1;
  MoaBlock<D> moa_block(ps, "moa", g, 2);
  // zero-init out_conv blocks all gradient flow through the global branch;
  // perturb it so the check exercises the whole block
  {
    std::normal_distribution<double> n(0.0, 0.05);
    std::mt19937_64 wr(seed + 3);
    for (auto& v : moa_block.out_conv.weight.mutable_values()) v = n(wr);
  }
  Tensor<D> x = detail::random_tensor<D>({1, 8, 8, 8}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&moa_block, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    return detail::probe_loss(moa_block.forward(x), pr);
  };
  std::vector<std::pair<std::string, Tensor<D>>> checked{{"moa.input", x}};
  for (const auto& [name, t] : ps.items()) checked.emplace_back(name, t);
  auto report = finite_diff_grad<D>(loss_fn, std::move(checked));
  return {"moa", std::move(report)};
}

GradCheckCase check_head(uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<D> ps(seed);
  LayerNorm<D> norm(ps, "final_norm", 6);
  LinearLayer<D> head(ps, "head", 6, 3);
  Tensor<D> x = detail::random_tensor<D>({2, 4, 6}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&norm, &head, &x, seed]() {
    std::mt19937_64 pr(seed + 1);
    Tensor<D> pooled = mean_over_axis(norm.forward(x), 1);
    return detail::probe_loss(head.forward(pooled), pr);
  };
  std::vector<std::pair<std::string, Tensor<D>>> checked{{"head.input", x}};
  for (const auto& [name, t] : ps.items()) checked.emplace_back(name, t);
  auto report = finite_diff_grad<D>(loss_fn, std::move(checked));
  return {"head", std::move(report)};
}

GradCheckCase check_cross_entropy(uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<D> logits = detail::random_tensor<D>({2, 3}, rng);
  logits.set_requires_grad(true);
  std::vector<D> target{0.2, 0.5, 0.3, 1.0, 0.0, 0.0};
  Tensor<D> y = Tensor<D>::from({2, 3}, target);
  auto loss_fn = [&logits, &y]() { return cross_entropy_soft(faulty_identity(logits), y); };
  auto report = finite_diff_grad<D>(loss_fn, {{"cross_entropy.logits", logits}});
  return {"cross-entropy", std::move(report)};
}

}  // namespace

std::vector<std::string> gradcheck_scopes() {
  return {"linear",      "layernorm",  "gelu",        "conv1x1", "softmax",
          "window-msa",  "local-block", "patch-merge", "moa",     "head",
          "cross-entropy"};
}

std::vector<GradCheckCase> run_gradcheck(const std::string& scope, uint64_t seed) {
  std::vector<GradCheckCase> cases;
  auto want = [&](const std::string& s) { return scope == "all" || scope == s; };
  if (want("linear")) cases.push_back(check_linear(seed));
  if (want("layernorm")) cases.push_back(check_layernorm(seed));
  if (want("gelu")) cases.push_back(check_gelu(seed));
  if (want("conv1x1")) cases.push_back(check_conv1x1(seed));
  if (want("softmax")) cases.push_back(check_softmax(seed));
  if (want("window-msa")) cases.push_back(check_window_msa(seed));
  if (want("local-block")) cases.push_back(check_local_block(seed));
  if (want("patch-merge")) cases.push_back(check_patch_merge(seed));
  if (want("moa")) cases.push_back(check_moa(seed));
  if (want("head")) cases.push_back(check_head(seed));
  if (want("cross-entropy")) cases.push_back(check_cross_entropy(seed));
  if (cases.empty()) {
    std::string known = "all";
    for (const auto& s : gradcheck_scopes()) known += ", " + s;
    throw ConfigError("gradcheck: unknown scope '" + scope + "'; known scopes: " + known);
  }
  return cases;
}

}  // namespace moa
