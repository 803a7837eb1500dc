#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlp/data.hpp"
#include "vlp/error.hpp"
#include "vlp/mask_engine.hpp"
#include "vlp/model.hpp"
#include "vlp/objectives.hpp"
#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"
#include "vlp/tensor_io.hpp"

namespace vlp {

enum class MfrMode { kRanked, kRandom, kCosine, kOff };

inline const char* to_string(MfrMode m) {
  switch (m) {
    case MfrMode::kRanked:
      return "ranked";
    case MfrMode::kRandom:
      return "random";
    case MfrMode::kCosine:
      return "cosine";
    case MfrMode::kOff:
      return "off";
  }
  return "?";
}

inline MfrMode parse_mfr_mode(const std::string& s) {
  if (s == "ranked") return MfrMode::kRanked;
  if (s == "random") return MfrMode::kRandom;
  if (s == "cosine") return MfrMode::kCosine;
  if (s == "off") return MfrMode::kOff;
  throw ConfigError("unknown MFR mode '" + s + "' (expected ranked|random|cosine|off)");
}

struct OptimizerConfig {
  double lr = 1e-3;              // multi-modal transformer and heads
  double vision_lr_scale = 0.1;  // vision transformer runs 10× slower
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 50;
  // Step-size drops by 10× at these fractions of the run.
  double first_decay = 0.60;
  double second_decay = 0.85;
};

struct TrainConfig {
  ModelConfig model;
  DataConfig data;
  LossWeights weights;
  IpotConfig ipot;
  OptimizerConfig optimizer;
  MfrMode mfr_mode = MfrMode::kRanked;
  std::size_t mfr_k = 7;       // ranked / cosine plans
  double mfr_p = 7.0 / 16.0;   // random plans mask round(m·p)
  std::size_t dataset_size = 512;
  std::size_t images_per_step = 2;
  std::size_t steps = 500;
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    data.validate(model);
    weights.validate();
    ipot.validate();
    auto req = [](bool c, const std::string& w) { detail::require<ConfigError>(c, "train config: " + w); };
    req(steps > 0 && images_per_step > 0 && dataset_size > 0, "steps, images_per_step, dataset_size must be > 0");
    req(optimizer.lr > 0.0 && optimizer.vision_lr_scale >= 0.0, "learning rates");
    if (mfr_mode == MfrMode::kRanked || mfr_mode == MfrMode::kCosine)
      req(mfr_k >= 1 && mfr_k <= model.num_patches(), "MFR k must be in [1, m]");
    if (mfr_mode == MfrMode::kRandom) req(mfr_p > 0.0 && mfr_p < 1.0, "MFR p must be in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j["model"] = c.model;
  j["data"] = c.data;
  j["weights"] = {{"lambda1", c.weights.lambda1}, {"lambda2", c.weights.lambda2}, {"vla_weight", c.weights.vla_weight}};
  j["ipot"] = {{"beta", c.ipot.beta},
               {"outer_iterations", c.ipot.outer_iterations},
               {"inner_iterations", c.ipot.inner_iterations}};
  const auto& o = c.optimizer;
  j["optimizer"] = {{"lr", o.lr},
                    {"vision_lr_scale", o.vision_lr_scale},
                    {"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"eps", o.eps},
                    {"weight_decay", o.weight_decay},
                    {"warmup_steps", o.warmup_steps},
                    {"first_decay", o.first_decay},
                    {"second_decay", o.second_decay}};
  j["mfr_mode"] = to_string(c.mfr_mode);
  j["mfr_k"] = c.mfr_k;
  j["mfr_p"] = c.mfr_p;
  j["dataset_size"] = c.dataset_size;
  j["images_per_step"] = c.images_per_step;
  j["steps"] = c.steps;
  j["seed"] = c.seed;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("data")) j.at("data").get_to(c.data);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.lambda1 = w.value("lambda1", c.weights.lambda1);
    c.weights.lambda2 = w.value("lambda2", c.weights.lambda2);
    c.weights.vla_weight = w.value("vla_weight", c.weights.vla_weight);
  }
  if (j.contains("ipot")) {
    const auto& p = j.at("ipot");
    c.ipot.beta = p.value("beta", c.ipot.beta);
    c.ipot.outer_iterations = p.value("outer_iterations", c.ipot.outer_iterations);
    c.ipot.inner_iterations = p.value("inner_iterations", c.ipot.inner_iterations);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    auto& d = c.optimizer;
    d.lr = o.value("lr", d.lr);
    d.vision_lr_scale = o.value("vision_lr_scale", d.vision_lr_scale);
    d.beta1 = o.value("beta1", d.beta1);
    d.beta2 = o.value("beta2", d.beta2);
    d.eps = o.value("eps", d.eps);
    d.weight_decay = o.value("weight_decay", d.weight_decay);
    d.warmup_steps = o.value("warmup_steps", d.warmup_steps);
    d.first_decay = o.value("first_decay", d.first_decay);
    d.second_decay = o.value("second_decay", d.second_decay);
  }
  if (j.contains("mfr_mode")) c.mfr_mode = parse_mfr_mode(j.at("mfr_mode").get<std::string>());
  c.mfr_k = j.value("mfr_k", c.mfr_k);
  c.mfr_p = j.value("mfr_p", c.mfr_p);
  c.dataset_size = j.value("dataset_size", c.dataset_size);
  c.images_per_step = j.value("images_per_step", c.images_per_step);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Per-batch objective
// ---------------------------------------------------------------------------

struct LossValues {
  double mlm = 0.0;
  double itm = 0.0;  // ITM NLL alone
  double vla = 0.0;
  double mfr = 0.0;
  double total = 0.0;
  bool has_mlm = false;
  bool has_mfr = false;
};

struct BatchLoss {
  Tensor total;
  LossValues values;
};

inline MaskPlan make_vision_plan(MfrMode mode, const VisionOutput& vis, const TrainConfig& cfg, Rng& rng) {
  switch (mode) {
    case MfrMode::kRanked:
      return mfr_mask_plan(vis.records.back().matrix, cfg.mfr_k, rng);
    case MfrMode::kRandom:
      return random_mask_plan(vis.tokens.rows(), cfg.mfr_p, rng);
    case MfrMode::kCosine:
      return cosine_mask_plan(vis.tokens.detach(), cfg.mfr_k, rng);
    case MfrMode::kOff:
      break;
  }
  return {};
}

// Losses for a batch of image groups. Every text feeds ITM on an unmasked
// forward; matched texts additionally feed VLA, and a second, masked forward
// feeds MLM and MFR.
inline BatchLoss batch_loss(Tape& tape, const ModelParams& params, const std::vector<SyntheticPair>& pairs,
                            const std::vector<std::vector<std::size_t>>& groups, const TrainConfig& cfg, Rng& rng) {
  std::vector<Tensor> mlm_terms, itm_terms, vla_terms, mfr_terms;
  MlmMaskOptions mlm_opt;
  mlm_opt.vocab = params.config.vocab;
  mlm_opt.first_regular_id = kMaskTokenId + 1;

  for (const auto& group : groups) {
    const auto& image = pairs[group.front()].image;
    VisionOutput vis = vision_forward(tape, image, params);
    for (auto idx : group) {
      const auto& pair = pairs[idx];
      FusionOutput clean = multimodal_forward(tape, vis.tokens, pair.caption, params);
      itm_terms.push_back(itm_loss(tape, itm_logits(tape, clean, params), pair.matched));
      if (!pair.matched) continue;

      if (cfg.weights.vla_weight > 0.0) {
        Tensor v = gather_rows(tape, clean.hidden, clean.layout.partition.vision);
        Tensor l = gather_rows(tape, clean.hidden, clean.layout.partition.language);
        vla_terms.push_back(vla_loss(tape, v, l, cfg.ipot).loss);
      }

      MaskPlan lang_plan = mlm_mask_plan(pair.caption.size(), rng, mlm_opt);
      MaskPlan vis_plan = make_vision_plan(cfg.mfr_mode, vis, cfg, rng);
      if (lang_plan.empty() && vis_plan.empty()) continue;
      FusionOutput masked = multimodal_forward(tape, vis.tokens, pair.caption, params,
                                               vis_plan.empty() ? nullptr : &vis_plan, &lang_plan);
      if (!lang_plan.empty())
        mlm_terms.push_back(mlm_loss(tape, mlm_logits(tape, masked, params), pair.caption, lang_plan));
      if (!vis_plan.empty()) {
        Tensor targets = gather_rows(tape, vis.tokens, vis_plan.positions).detach();
        mfr_terms.push_back(mfr_loss(tape, targets, mfr_regress(tape, masked, params, vis_plan)));
      }
    }
  }

  auto mean = [&tape](const std::vector<Tensor>& terms) {
    return combine_scalars(tape, terms, std::vector<double>(terms.size(), 1.0 / static_cast<double>(terms.size())));
  };

  BatchLoss out;
  LossParts parts;
  Tensor itm = mean(itm_terms);
  out.values.itm = itm.item();
  if (!vla_terms.empty()) {
    Tensor vla = mean(vla_terms);
    out.values.vla = vla.item();
    parts.itm = combine_scalars(tape, {itm, vla}, {1.0, cfg.weights.vla_weight});
  } else {
    parts.itm = itm;
  }
  if (!mlm_terms.empty()) {
    parts.mlm = mean(mlm_terms);
    out.values.mlm = parts.mlm->item();
    out.values.has_mlm = true;
  }
  if (!mfr_terms.empty()) {
    parts.mfr = mean(mfr_terms);
    out.values.mfr = parts.mfr->item();
    out.values.has_mfr = true;
  }
  out.total = total_loss(tape, parts, cfg.weights);
  out.values.total = out.total.item();
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

inline double lr_multiplier(const OptimizerConfig& o, std::size_t step, std::size_t total_steps) {
  double m = 1.0;
  if (o.warmup_steps > 0 && step < o.warmup_steps)
    m = static_cast<double>(step + 1) / static_cast<double>(o.warmup_steps);
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  if (frac >= o.first_decay) m *= 0.1;
  if (frac >= o.second_decay) m *= 0.1;
  return m;
}

// AdamW with decoupled weight decay on matrices only.
class AdamW {
 public:
  AdamW(const ModelParams& params, OptimizerConfig cfg) : cfg_(cfg) {
    for (auto& [name, t] : params.named_parameters()) {
      slots_.push_back({t, std::vector<double>(t.numel(), 0.0), std::vector<double>(t.numel(), 0.0),
                        name.rfind("vision.", 0) == 0 ? cfg.vision_lr_scale : 1.0, t.rank() == 2});
    }
  }

  void step(double lr_mult) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      const double lr = cfg_.lr * lr_mult * s.lr_scale;
      if (lr == 0.0) continue;
      auto w = s.param.data();
      if (!s.param.has_grad()) continue;
      auto g = s.param.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
        if (s.decay) w[i] -= lr * cfg_.weight_decay * w[i];
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
    double lr_scale;
    bool decay;
  };
  OptimizerConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Loss log
// ---------------------------------------------------------------------------

struct LossLogRow {
  std::size_t step = 0;
  LossValues values;
};

struct LossLog {
  bool with_mfr = true;
  std::vector<LossLogRow> rows;

  // Mean total loss over rows [begin, end).
  double mean_total(std::size_t begin, std::size_t end) const {
    end = std::min(end, rows.size());
    detail::require<ContractError>(begin < end, "loss log: empty window");
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += rows[i].values.total;
    return s / static_cast<double>(end - begin);
  }

  LossValues mean_values(std::size_t begin, std::size_t end) const {
    end = std::min(end, rows.size());
    detail::require<ContractError>(begin < end, "loss log: empty window");
    LossValues m;
    const double k = static_cast<double>(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& v = rows[i].values;
      m.mlm += v.mlm / k, m.itm += v.itm / k, m.vla += v.vla / k, m.mfr += v.mfr / k, m.total += v.total / k;
    }
    m.has_mfr = with_mfr;
    m.has_mlm = true;
    return m;
  }
};

inline void write_loss_csv(std::ostream& os, const LossLog& log) {
  os << (log.with_mfr ? "step,L_MLM,L_ITM,L_VLA,L_MFR,L_total\n" : "step,L_MLM,L_ITM,L_VLA,L_total\n");
  os.precision(17);
  for (const auto& r : log.rows) {
    os << r.step << ',' << r.values.mlm << ',' << r.values.itm << ',' << r.values.vla << ',';
    if (log.with_mfr) os << r.values.mfr << ',';
    os << r.values.total << '\n';
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json + one tensor file per parameter.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["model"] = params.config;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, t] : params.named_parameters()) {
    const std::string file = name + ".tensor";
    save_tensor(dir / file, t);
    list.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  }
  manifest["params"] = list;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(1) << '\n';
}

inline ModelParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("cannot open checkpoint manifest " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(is);
  ModelConfig cfg = manifest.at("model").get<ModelConfig>();
  Rng scratch(0);
  ModelParams params = init_params(cfg, scratch);
  auto named = params.named_parameters();
  const auto& list = manifest.at("params");
  detail::require<IoError>(list.size() == named.size(), "checkpoint parameter count does not match model config");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& e = list[i];
    detail::require<IoError>(e.at("name").get<std::string>() == named[i].first,
                             "checkpoint parameter order mismatch at " + named[i].first);
    Tensor loaded = load_tensor(dir / e.at("file").get<std::string>());
    detail::require<IoError>(loaded.shape() == named[i].second.shape(), "checkpoint shape mismatch for " +
                                                                           named[i].first);
    auto dst = named[i].second.data();
    std::copy(loaded.data().begin(), loaded.data().end(), dst.begin());
  }
  return params;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  ModelParams params;
  LossLog log;
  ModelParams initial;  // untrained weights from the same seed
};

inline ModelParams clone_params(const ModelParams& p) {
  Rng scratch(0);
  ModelParams out = init_params(p.config, scratch);
  auto src = p.named_parameters();
  auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].second.data();
    std::copy(src[i].second.data().begin(), src[i].second.data().end(), d.begin());
  }
  return out;
}

// Stream salts; each consumer of randomness draws from its own stream.
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kDataStream = 2;
inline constexpr std::uint64_t kBatchStream = 3;
inline constexpr std::uint64_t kMaskStream = 4;
inline constexpr std::uint64_t kHeldOutStream = 5;
inline constexpr std::uint64_t kProbeStream = 6;

inline std::vector<SyntheticPair> training_data(const TrainConfig& cfg) {
  Rng root(cfg.seed);
  Rng data_rng = root.fork(kDataStream);
  return synth_dataset(cfg.dataset_size, ConceptBank(cfg.model, cfg.data), data_rng);
}

inline std::vector<SyntheticPair> held_out_data(const TrainConfig& cfg, std::size_t n) {
  Rng root(cfg.seed);
  Rng rng = root.fork(kHeldOutStream);
  return synth_dataset(n, ConceptBank(cfg.model, cfg.data), rng);
}

// Called after each step with (step, values); return false to stop early.
using StepCallback = std::function<bool(std::size_t, const LossValues&)>;

inline TrainResult train(const TrainConfig& cfg, const std::vector<SyntheticPair>& data,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng init_rng = root.fork(kInitStream);
  Rng batch_rng = root.fork(kBatchStream);
  Rng mask_rng = root.fork(kMaskStream);

  TrainResult res;
  res.params = init_params(cfg.model, init_rng);
  res.initial = clone_params(res.params);
  res.log.with_mfr = cfg.mfr_mode != MfrMode::kOff;

  const auto groups = group_by_image(data);
  detail::require<ContractError>(!groups.empty(), "train: empty dataset");
  AdamW opt(res.params, cfg.optimizer);

  // Epoch-wise shuffled pass over image groups.
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_group = [&]() {
    if (cursor == order.size()) {
      order.resize(groups.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[batch_rng.uniform_index(i)]);
      cursor = 0;
    }
    return groups[order[cursor++]];
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<std::size_t>> batch;
    for (std::size_t b = 0; b < cfg.images_per_step; ++b) batch.push_back(next_group());

    Tape tape;
    res.params.zero_grad();
    BatchLoss loss = batch_loss(tape, res.params, data, batch, cfg, mask_rng);
    if (!std::isfinite(loss.values.total)) {
      std::ostringstream os;
      os << "training diverged at step " << step << ": L_MLM=" << loss.values.mlm << " L_ITM=" << loss.values.itm
         << " L_VLA=" << loss.values.vla << " L_MFR=" << loss.values.mfr;
      throw NumericError(os.str());
    }
    tape.backward(loss.total);
    opt.step(lr_multiplier(cfg.optimizer, step, cfg.steps));
    res.log.rows.push_back({step, loss.values});
    if (on_step && !on_step(step, loss.values)) break;
  }
  res.params.zero_grad();
  return res;
}

// Fraction of pairs whose ITM argmax equals the matched label.
inline double itm_accuracy(const ModelParams& params, const std::vector<SyntheticPair>& pairs) {
  detail::require<ContractError>(!pairs.empty(), "itm_accuracy: no pairs");
  std::size_t correct = 0;
  for (const auto& group : group_by_image(pairs)) {
    Tape tape = Tape::inference();
    VisionOutput vis = vision_forward(tape, pairs[group.front()].image, params);
    for (auto idx : group) {
      FusionOutput f = multimodal_forward(tape, vis.tokens, pairs[idx].caption, params);
      Tensor logits = itm_logits(tape, f, params);
      const bool predicted_match = logits[1] > logits[0];
      if (predicted_match == pairs[idx].matched) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

}  // namespace vlp
