#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "vlp/error.hpp"
#include "vlp/model.hpp"
#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"
#include "vlp/tensor_io.hpp"

namespace vlp {

struct DataConfig {
  std::size_t concepts = 8;
  std::size_t caption_length = 8;
  std::size_t lit_cells = 6;   // patch cells painted with the concept color
  double noise = 0.2;          // per-pixel Gaussian noise
  std::uint64_t bank_seed = 7; // fixes the concept vocabulary across datasets
  std::size_t texts_per_image = 4;
  std::size_t matched_per_image = 2;

  void validate(const ModelConfig& model) const {
    auto req = [](bool c, const std::string& w) { detail::require<ConfigError>(c, "data config: " + w); };
    req(concepts >= 2, "need at least two concepts");
    req(caption_length >= 2 && caption_length <= model.max_words, "caption length must fit max_words");
    req(model.vocab >= 8, "vocabulary too small for templated captions");
    req(lit_cells >= 1 && lit_cells <= model.num_patches(), "lit_cells must fit the patch grid");
    req(texts_per_image >= 1 && matched_per_image <= texts_per_image, "texts/matched per image");
    req(noise >= 0.0, "noise must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const DataConfig& d) {
  j = {{"concepts", d.concepts},   {"caption_length", d.caption_length},
       {"lit_cells", d.lit_cells}, {"noise", d.noise},
       {"bank_seed", d.bank_seed}, {"texts_per_image", d.texts_per_image},
       {"matched_per_image", d.matched_per_image}};
}

inline void from_json(const nlohmann::json& j, DataConfig& d) {
  d.concepts = j.value("concepts", d.concepts);
  d.caption_length = j.value("caption_length", d.caption_length);
  d.lit_cells = j.value("lit_cells", d.lit_cells);
  d.noise = j.value("noise", d.noise);
  d.bank_seed = j.value("bank_seed", d.bank_seed);
  d.texts_per_image = j.value("texts_per_image", d.texts_per_image);
  d.matched_per_image = j.value("matched_per_image", d.matched_per_image);
}

// Token ids 1 and 2 are interchangeable articles opening every caption; the
// rest of a caption is a fixed per-concept template.
inline constexpr std::size_t kArticleA = 1;
inline constexpr std::size_t kArticleB = 2;
inline constexpr std::size_t kFirstContentWord = 3;

struct Concept {
  std::vector<double> color;               // one value per channel
  std::vector<std::size_t> cells;          // lit patch cells, ascending
  std::vector<std::size_t> template_words; // caption_length − 1 ids
};

// Concept definitions depend only on (model dims, data config); every dataset
// built from the same bank shares them, so held-out data is in-distribution.
class ConceptBank {
 public:
  ConceptBank(const ModelConfig& model, const DataConfig& data) : model_(model), data_(data) {
    data.validate(model);
    Rng rng(data.bank_seed);
    const std::size_t cells = model.num_patches();
    for (std::size_t k = 0; k < data.concepts; ++k) {
      Concept c;
      for (std::size_t ch = 0; ch < model.channels; ++ch) c.color.push_back(rng.uniform(-1.0, 1.0));
      std::vector<std::size_t> order(cells);
      for (std::size_t i = 0; i < cells; ++i) order[i] = i;
      for (std::size_t i = 0; i < data.lit_cells; ++i) std::swap(order[i], order[i + rng.uniform_index(cells - i)]);
      c.cells.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(data.lit_cells));
      std::sort(c.cells.begin(), c.cells.end());
      for (std::size_t w = 1; w < data.caption_length; ++w)
        c.template_words.push_back(kFirstContentWord + rng.uniform_index(model.vocab - kFirstContentWord));
      concepts_.push_back(std::move(c));
    }
  }

  std::size_t size() const { return concepts_.size(); }
  const Concept& operator[](std::size_t k) const { return concepts_.at(k); }
  const ModelConfig& model() const { return model_; }
  const DataConfig& data() const { return data_; }

  // Caption for concept k; `variant` picks the opening article.
  std::vector<std::size_t> caption(std::size_t k, bool variant) const {
    std::vector<std::size_t> words{variant ? kArticleB : kArticleA};
    const auto& t = concepts_.at(k).template_words;
    words.insert(words.end(), t.begin(), t.end());
    return words;
  }

  Tensor render(std::size_t k, Rng& rng) const {
    const std::size_t s = model_.image_size, ch = model_.channels, p = model_.patch, g = model_.grid();
    Tensor img = Tensor::zeros({s, s, ch});
    const auto& c = concepts_.at(k);
    for (auto cell : c.cells) {
      const std::size_t gy = cell / g, gx = cell % g;
      for (std::size_t y = gy * p; y < (gy + 1) * p; ++y)
        for (std::size_t x = gx * p; x < (gx + 1) * p; ++x)
          for (std::size_t z = 0; z < ch; ++z) img[(y * s + x) * ch + z] = c.color[z];
    }
    for (auto& v : img.data()) v += rng.normal(0.0, data_.noise);
    return img;
  }

 private:
  ModelConfig model_;
  DataConfig data_;
  std::vector<Concept> concepts_;
};

struct ConceptLabels {
  std::size_t image_concept = 0;
  std::size_t caption_concept = 0;
};

struct SyntheticPair {
  std::size_t image_id = 0;
  Tensor image;  // h × w × ch; pairs of one image share storage
  std::vector<std::size_t> caption;
  bool matched = false;
  ConceptLabels concept_labels;  // evaluation only
};

// Pairs come in groups of texts_per_image sharing one image: the first
// matched_per_image captions describe the image's concept, the rest describe
// a different, uniformly chosen concept. The last group is truncated at n.
inline std::vector<SyntheticPair> synth_dataset(std::size_t n, const ConceptBank& bank, Rng& rng) {
  const auto& d = bank.data();
  std::vector<SyntheticPair> out;
  out.reserve(n);
  std::size_t image_id = 0;
  while (out.size() < n) {
    const std::size_t k = rng.uniform_index(bank.size());
    Tensor image = bank.render(k, rng);
    for (std::size_t t = 0; t < d.texts_per_image && out.size() < n; ++t) {
      SyntheticPair pair;
      pair.image_id = image_id;
      pair.image = image;
      pair.matched = t < d.matched_per_image;
      std::size_t cap = k;
      if (!pair.matched) {
        cap = rng.uniform_index(bank.size() - 1);
        if (cap >= k) ++cap;
      }
      pair.caption = bank.caption(cap, rng.bernoulli(0.5));
      pair.concept_labels = {k, cap};
      out.push_back(std::move(pair));
    }
    ++image_id;
  }
  return out;
}

inline std::vector<SyntheticPair> synth_dataset(std::size_t n, std::size_t concepts, Rng& rng,
                                                const ModelConfig& model = {}, DataConfig data = {}) {
  data.concepts = concepts;
  return synth_dataset(n, ConceptBank(model, data), rng);
}

// Groups pair indices by image, preserving order.
inline std::vector<std::vector<std::size_t>> group_by_image(const std::vector<SyntheticPair>& pairs) {
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (groups.empty() || pairs[groups.back().front()].image_id != pairs[i].image_id) groups.emplace_back();
    groups.back().push_back(i);
  }
  return groups;
}

// On disk: <dir>/pairs.json (captions, labels, image ids) and
// <dir>/images.tensor (stacked images, one per image id).
inline void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticPair>& pairs) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = nlohmann::json::array();
  std::vector<double> stacked;
  Shape img_shape;
  std::size_t images = 0;
  for (const auto& g : group_by_image(pairs)) {
    const auto& img = pairs[g.front()].image;
    img_shape = img.shape();
    stacked.insert(stacked.end(), img.data().begin(), img.data().end());
    for (auto i : g) {
      const auto& p = pairs[i];
      j.push_back({{"image", images},
                   {"caption", p.caption},
                   {"matched", p.matched},
                   {"image_concept", p.concept_labels.image_concept},
                   {"caption_concept", p.concept_labels.caption_concept}});
    }
    ++images;
  }
  detail::require<ContractError>(images > 0, "save_dataset: empty dataset");
  Shape shape{images};
  shape.insert(shape.end(), img_shape.begin(), img_shape.end());
  save_tensor(dir / "images.tensor", Tensor(shape, std::move(stacked)));
  std::ofstream os(dir / "pairs.json");
  if (!os) throw IoError("cannot write " + (dir / "pairs.json").string());
  os << j.dump(1) << '\n';
}

inline std::vector<SyntheticPair> load_dataset(const std::filesystem::path& dir) {
  const Tensor images = load_tensor(dir / "images.tensor");
  detail::require<IoError>(images.rank() == 4, "images.tensor must be 4-D");
  std::ifstream is(dir / "pairs.json");
  if (!is) throw IoError("cannot open " + (dir / "pairs.json").string());
  const auto j = nlohmann::json::parse(is);
  const Shape img_shape(images.shape().begin() + 1, images.shape().end());
  const std::size_t per = shape_numel(img_shape);
  std::vector<Tensor> views;
  for (std::size_t i = 0; i < images.dim(0); ++i)
    views.emplace_back(img_shape, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                                      images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
  std::vector<SyntheticPair> out;
  for (const auto& e : j) {
    SyntheticPair p;
    p.image_id = e.at("image").get<std::size_t>();
    detail::require<IoError>(p.image_id < views.size(), "pairs.json references a missing image");
    p.image = views[p.image_id];
    p.caption = e.at("caption").get<std::vector<std::size_t>>();
    p.matched = e.at("matched").get<bool>();
    p.concept_labels = {e.at("image_concept").get<std::size_t>(), e.at("caption_concept").get<std::size_t>()};
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace vlp
