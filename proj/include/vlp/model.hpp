#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vlp/error.hpp"
#include "vlp/mask_engine.hpp"
#include "vlp/records.hpp"
#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"

namespace vlp {

// Token id 0 is the language [MASK] symbol; regular words use 1..vocab-1.
inline constexpr std::size_t kMaskTokenId = 0;

struct ModelConfig {
  std::size_t width = 64;  // c
  std::size_t heads = 4;
  std::size_t vision_layers = 4;
  std::size_t fusion_layers = 4;
  std::size_t patch = 4;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t vocab = 64;
  std::size_t max_words = 16;
  std::size_t mlp_ratio = 4;

  std::size_t grid() const { return image_size / patch; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch * patch * channels; }

  void validate() const {
    auto req = [](bool c, const std::string& what) { detail::require<ConfigError>(c, "model config: " + what); };
    req(width > 0 && heads > 0 && width % heads == 0, "width must be a positive multiple of heads");
    req(width % 4 == 0, "width must be divisible by 4 for the 2-D sinusoidal embedding");
    req(vision_layers > 0 && fusion_layers > 0, "layer counts must be positive");
    req(patch > 0 && image_size % patch == 0, "image size must be divisible by patch");
    req(channels > 0 && vocab > 1 && max_words > 0 && mlp_ratio > 0, "channels/vocab/max_words/mlp_ratio");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"width", c.width},         {"heads", c.heads},   {"vision_layers", c.vision_layers},
       {"fusion_layers", c.fusion_layers}, {"patch", c.patch}, {"image_size", c.image_size},
       {"channels", c.channels},   {"vocab", c.vocab},   {"max_words", c.max_words},
       {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.vision_layers = j.value("vision_layers", c.vision_layers);
  c.fusion_layers = j.value("fusion_layers", c.fusion_layers);
  c.patch = j.value("patch", c.patch);
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.vocab = j.value("vocab", c.vocab);
  c.max_words = j.value("max_words", c.max_words);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

// Pre-norm transformer block.
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct ModelParams {
  ModelConfig config;

  // vision transformer
  Tensor patch_w, patch_b, patch_ln_gain, patch_ln_bias;
  std::vector<BlockParams> vision_blocks;
  Tensor vision_ln_gain, vision_ln_bias;

  // multi-modal transformer
  Tensor word_embedding;   // vocab × c
  Tensor word_position;    // max_words × c
  Tensor vision_type, language_type;
  Tensor cls_embedding, sep_embedding;  // 1 × c
  Tensor visual_mask_embedding;         // 1 × c
  std::vector<BlockParams> fusion_blocks;
  Tensor fusion_ln_gain, fusion_ln_bias;

  // heads
  Tensor mlm_w, mlm_b;  // c × vocab
  Tensor itm_w, itm_b;  // c × 2
  Tensor mfr_w, mfr_b;  // c × c

  // Every trainable tensor with a stable name; "vision." prefixes the
  // vision transformer. Handles alias the stored tensors.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto block = [&out](const std::string& p, const BlockParams& b) {
      out.insert(out.end(), {{p + "ln1_gain", b.ln1_gain}, {p + "ln1_bias", b.ln1_bias}, {p + "wq", b.wq},
                             {p + "bq", b.bq},             {p + "wk", b.wk},             {p + "bk", b.bk},
                             {p + "wv", b.wv},             {p + "bv", b.bv},             {p + "wo", b.wo},
                             {p + "bo", b.bo},             {p + "ln2_gain", b.ln2_gain}, {p + "ln2_bias", b.ln2_bias},
                             {p + "w1", b.w1},             {p + "b1", b.b1},             {p + "w2", b.w2},
                             {p + "b2", b.b2}});
    };
    out.insert(out.end(), {{"vision.patch_w", patch_w},
                           {"vision.patch_b", patch_b},
                           {"vision.patch_ln_gain", patch_ln_gain},
                           {"vision.patch_ln_bias", patch_ln_bias}});
    for (std::size_t l = 0; l < vision_blocks.size(); ++l)
      block("vision.block" + std::to_string(l + 1) + ".", vision_blocks[l]);
    out.insert(out.end(), {{"vision.ln_gain", vision_ln_gain}, {"vision.ln_bias", vision_ln_bias}});
    out.insert(out.end(), {{"fusion.word_embedding", word_embedding},
                           {"fusion.word_position", word_position},
                           {"fusion.vision_type", vision_type},
                           {"fusion.language_type", language_type},
                           {"fusion.cls_embedding", cls_embedding},
                           {"fusion.sep_embedding", sep_embedding},
                           {"fusion.visual_mask_embedding", visual_mask_embedding}});
    for (std::size_t l = 0; l < fusion_blocks.size(); ++l)
      block("fusion.block" + std::to_string(l + 1) + ".", fusion_blocks[l]);
    out.insert(out.end(), {{"fusion.ln_gain", fusion_ln_gain},
                           {"fusion.ln_bias", fusion_ln_bias},
                           {"head.mlm_w", mlm_w},
                           {"head.mlm_b", mlm_b},
                           {"head.itm_w", itm_w},
                           {"head.itm_b", itm_b},
                           {"head.mfr_w", mfr_w},
                           {"head.mfr_b", mfr_b}});
    return out;
  }

  void zero_grad() const {
    for (auto& [name, t] : named_parameters()) {
      Tensor h = t;
      h.zero_grad();
    }
  }
};

namespace detail {

inline Tensor random_tensor(Shape shape, double stddev, Rng& rng) {
  const auto n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

inline BlockParams init_block(std::size_t c, std::size_t hidden, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(c));
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
  BlockParams b;
  b.ln1_gain = Tensor::full({c}, 1.0, true);
  b.ln1_bias = Tensor::zeros({c}, true);
  b.wq = random_tensor({c, c}, s, rng);
  b.bq = Tensor::zeros({c}, true);
  b.wk = random_tensor({c, c}, s, rng);
  b.bk = Tensor::zeros({c}, true);
  b.wv = random_tensor({c, c}, s, rng);
  b.bv = Tensor::zeros({c}, true);
  b.wo = random_tensor({c, c}, s, rng);
  b.bo = Tensor::zeros({c}, true);
  b.ln2_gain = Tensor::full({c}, 1.0, true);
  b.ln2_bias = Tensor::zeros({c}, true);
  b.w1 = random_tensor({c, hidden}, s, rng);
  b.b1 = Tensor::zeros({hidden}, true);
  b.w2 = random_tensor({hidden, c}, sh, rng);
  b.b2 = Tensor::zeros({c}, true);
  return b;
}

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.width;
  ModelParams p;
  p.config = cfg;
  p.patch_w = detail::random_tensor({cfg.patch_dim(), c}, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), rng);
  p.patch_b = Tensor::zeros({c}, true);
  p.patch_ln_gain = Tensor::full({c}, 1.0, true);
  p.patch_ln_bias = Tensor::zeros({c}, true);
  for (std::size_t l = 0; l < cfg.vision_layers; ++l)
    p.vision_blocks.push_back(detail::init_block(c, c * cfg.mlp_ratio, rng));
  p.vision_ln_gain = Tensor::full({c}, 1.0, true);
  p.vision_ln_bias = Tensor::zeros({c}, true);

  p.word_embedding = detail::random_tensor({cfg.vocab, c}, 1.0, rng);
  p.word_position = detail::random_tensor({cfg.max_words, c}, 0.1, rng);
  p.vision_type = detail::random_tensor({c}, 0.1, rng);
  p.language_type = detail::random_tensor({c}, 0.1, rng);
  p.cls_embedding = detail::random_tensor({1, c}, 1.0, rng);
  p.sep_embedding = detail::random_tensor({1, c}, 1.0, rng);
  p.visual_mask_embedding = detail::random_tensor({1, c}, 1.0, rng);
  for (std::size_t l = 0; l < cfg.fusion_layers; ++l)
    p.fusion_blocks.push_back(detail::init_block(c, c * cfg.mlp_ratio, rng));
  p.fusion_ln_gain = Tensor::full({c}, 1.0, true);
  p.fusion_ln_bias = Tensor::zeros({c}, true);

  const double s = 1.0 / std::sqrt(static_cast<double>(c));
  p.mlm_w = detail::random_tensor({c, cfg.vocab}, s, rng);
  p.mlm_b = Tensor::zeros({cfg.vocab}, true);
  p.itm_w = detail::random_tensor({c, 2}, s, rng);
  p.itm_b = Tensor::zeros({2}, true);
  p.mfr_w = detail::random_tensor({c, c}, s, rng);
  p.mfr_b = Tensor::zeros({c}, true);
  return p;
}

// 2-D sine/cosine table for an h×w grid, row-major over positions. The first
// c/2 channels encode the row index and the last c/2 the column index; within
// each half, channel 2i is sin(pos·ω_i) and 2i+1 is cos(pos·ω_i) with
// ω_i = 10000^(−2i/(c/2)).
inline Tensor sinusoidal_pos_embed_2d(std::size_t h, std::size_t w, std::size_t c) {
  detail::require<ConfigError>(c > 0 && c % 4 == 0, "sinusoidal_pos_embed_2d: channel count must be divisible by 4");
  detail::require<ConfigError>(h > 0 && w > 0, "sinusoidal_pos_embed_2d: empty grid");
  const std::size_t half = c / 2;
  Tensor out = Tensor::zeros({h * w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t r = y * w + x;
      for (std::size_t i = 0; i < half / 2; ++i) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        out.at(r, 2 * i) = std::sin(static_cast<double>(y) * omega);
        out.at(r, 2 * i + 1) = std::cos(static_cast<double>(y) * omega);
        out.at(r, half + 2 * i) = std::sin(static_cast<double>(x) * omega);
        out.at(r, half + 2 * i + 1) = std::cos(static_cast<double>(x) * omega);
      }
    }
  return out;
}

// Splits an h×w×ch image into non-overlapping patch×patch tiles, row-major
// over the tile grid; each tile flattened in (y, x, channel) order.
inline Tensor extract_patches(const Tensor& image, std::size_t patch) {
  detail::require<DimensionError>(image.rank() == 3, "image must be h×w×ch, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  detail::require<ConfigError>(patch > 0 && h % patch == 0 && w % patch == 0,
                               "image " + shape_str(image.shape()) + " not divisible by patch " + std::to_string(patch));
  const std::size_t gh = h / patch, gw = w / patch, dim = patch * patch * ch;
  Tensor out = Tensor::zeros({gh * gw, dim});
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      std::size_t col = 0;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t k = 0; k < ch; ++k)
            out.at(gy * gw + gx, col++) = image[((gy * patch + py) * w + gx * patch + px) * ch + k];
    }
  return out;
}

// Patches → linear projection + 2-D position table → layer norm.
inline Tensor patch_embed(Tape& tape, const Tensor& image, const ModelParams& p) {
  const auto& cfg = p.config;
  Tensor patches = extract_patches(image, cfg.patch);
  detail::require<DimensionError>(patches.cols() == p.patch_w.rows(), "patch_embed: image channels do not match model");
  const std::size_t gh = image.dim(0) / cfg.patch, gw = image.dim(1) / cfg.patch;
  Tensor x = linear(tape, patches, p.patch_w, p.patch_b);
  x = add(tape, x, sinusoidal_pos_embed_2d(gh, gw, cfg.width));
  return layer_norm(tape, x, p.patch_ln_gain, p.patch_ln_bias);
}

namespace detail {

// One pre-norm block; writes the head-averaged attention into `record`.
inline Tensor transformer_block(Tape& tape, const Tensor& x, const BlockParams& b, std::size_t heads,
                                Tensor& record) {
  const std::size_t n = x.rows(), c = x.cols(), dh = c / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor h = layer_norm(tape, x, b.ln1_gain, b.ln1_bias);
  Tensor q = linear(tape, h, b.wq, b.bq);
  Tensor k = linear(tape, h, b.wk, b.bk);
  Tensor v = linear(tape, h, b.wv, b.bv);

  record = Tensor::zeros({n, n});
  std::vector<Tensor> head_out;
  head_out.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Tensor qh = slice_cols(tape, q, hd * dh, (hd + 1) * dh);
    Tensor kh = slice_cols(tape, k, hd * dh, (hd + 1) * dh);
    Tensor vh = slice_cols(tape, v, hd * dh, (hd + 1) * dh);
    Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
    Tensor att = softmax_rows(tape, scores);
    for (std::size_t i = 0; i < n * n; ++i) record[i] += att[i] / static_cast<double>(heads);
    head_out.push_back(matmul(tape, att, vh));
  }
  Tensor mixed = linear(tape, concat_cols(tape, head_out), b.wo, b.bo);
  Tensor y = add(tape, x, mixed);

  Tensor h2 = layer_norm(tape, y, b.ln2_gain, b.ln2_bias);
  Tensor ff = linear(tape, gelu(tape, linear(tape, h2, b.w1, b.b1)), b.w2, b.b2);
  return add(tape, y, ff);
}

}  // namespace detail

struct VisionOutput {
  Tensor tokens;  // m × c
  std::vector<AttentionRecord> records;
};

inline VisionOutput vision_forward(Tape& tape, const Tensor& image, const ModelParams& p) {
  VisionOutput out;
  Tensor x = patch_embed(tape, image, p);
  for (std::size_t l = 0; l < p.vision_blocks.size(); ++l) {
    AttentionRecord rec{l + 1, {}};
    x = detail::transformer_block(tape, x, p.vision_blocks[l], p.config.heads, rec.matrix);
    out.records.push_back(std::move(rec));
  }
  out.tokens = layer_norm(tape, x, p.vision_ln_gain, p.vision_ln_bias);
  return out;
}

struct FusionOutput {
  Tensor hidden;  // n × c, after the final layer norm
  std::vector<AttentionRecord> records;
  std::vector<Tensor> layer_outputs;  // residual stream after each block
  SequenceLayout layout;
};

// Applies a language plan to token ids: [MASK], random replacement or keep.
inline std::vector<std::size_t> apply_language_plan(std::vector<std::size_t> words, const MaskPlan& plan) {
  for (std::size_t i = 0; i < plan.positions.size(); ++i) {
    detail::require<ContractError>(plan.positions[i] < words.size(), "language mask position out of range");
    const MaskAction a = plan.actions.empty() ? MaskAction::kMask : plan.actions[i];
    if (a == MaskAction::kMask) words[plan.positions[i]] = kMaskTokenId;
    if (a == MaskAction::kRandom) words[plan.positions[i]] = plan.replacements.at(i);
  }
  return words;
}

// Joint forward over [CLS] ⊕ visual ⊕ [SEP] ⊕ words. Masked visual rows are
// swapped for the learned visual [MASK] embedding before entry.
inline FusionOutput multimodal_forward(Tape& tape, const Tensor& visual, const std::vector<std::size_t>& words,
                                       const ModelParams& p, const MaskPlan* vision_plan = nullptr,
                                       const MaskPlan* language_plan = nullptr) {
  const auto& cfg = p.config;
  detail::require_matrix(visual, "multimodal_forward");
  detail::require<DimensionError>(visual.cols() == cfg.width, "multimodal_forward: visual width mismatch");
  detail::require<ContractError>(!words.empty() && words.size() <= cfg.max_words,
                                 "multimodal_forward: caption length must be in [1, max_words]");
  for (auto w : words) detail::require<ContractError>(w < cfg.vocab, "multimodal_forward: word id out of vocabulary");
  const std::size_t m = visual.rows(), t = words.size();

  Tensor vis_in = visual;
  if (vision_plan && !vision_plan->empty()) {
    std::vector<std::size_t> rows(m);
    for (std::size_t i = 0; i < m; ++i) rows[i] = i;
    for (auto pos : vision_plan->positions) {
      detail::require<ContractError>(pos < m, "visual mask position out of range");
      rows[pos] = m;  // the appended [MASK] row
    }
    vis_in = gather_rows(tape, concat_rows(tape, {visual, p.visual_mask_embedding}), rows);
  }
  vis_in = add_row_bias(tape, vis_in, p.vision_type);

  const auto ids = language_plan ? apply_language_plan(words, *language_plan) : words;
  std::vector<std::size_t> pos_ids(t);
  for (std::size_t i = 0; i < t; ++i) pos_ids[i] = i;
  Tensor lang_in = add(tape, gather_rows(tape, p.word_embedding, ids), gather_rows(tape, p.word_position, pos_ids));
  lang_in = add_row_bias(tape, lang_in, p.language_type);

  FusionOutput out;
  out.layout = joint_layout(m, t);
  Tensor x = concat_rows(tape, {p.cls_embedding, vis_in, p.sep_embedding, lang_in});
  for (std::size_t l = 0; l < p.fusion_blocks.size(); ++l) {
    AttentionRecord rec{l + 1, {}};
    x = detail::transformer_block(tape, x, p.fusion_blocks[l], cfg.heads, rec.matrix);
    out.records.push_back(std::move(rec));
    out.layer_outputs.push_back(x);
  }
  out.hidden = layer_norm(tape, x, p.fusion_ln_gain, p.fusion_ln_bias);
  return out;
}

// Head inputs: rows of the joint hidden state.

// Vocabulary logits for every language token (t × vocab).
inline Tensor mlm_logits(Tape& tape, const FusionOutput& f, const ModelParams& p) {
  return linear(tape, gather_rows(tape, f.hidden, f.layout.partition.language), p.mlm_w, p.mlm_b);
}

inline Tensor itm_logits(Tape& tape, const FusionOutput& f, const ModelParams& p) {
  return linear(tape, gather_rows(tape, f.hidden, {f.layout.cls}), p.itm_w, p.itm_b);
}

// r(·): regressed features at masked visual positions, in plan order.
inline Tensor mfr_regress(Tape& tape, const FusionOutput& f, const ModelParams& p, const MaskPlan& plan) {
  std::vector<std::size_t> rows;
  for (auto pos : plan.positions) rows.push_back(f.layout.partition.vision.at(pos));
  return linear(tape, gather_rows(tape, f.hidden, rows), p.mfr_w, p.mfr_b);
}

}  // namespace vlp
