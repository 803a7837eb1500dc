#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlp/attention_flow.hpp"
#include "vlp/data.hpp"
#include "vlp/error.hpp"
#include "vlp/fusion_probe.hpp"
#include "vlp/model.hpp"
#include "vlp/tensor_io.hpp"
#include "vlp/train.hpp"

namespace vlp {

struct ProbeOptions {
  std::size_t max_examples = 64;
  bool matched_only = true;
  bool include_specials = false;  // count [CLS]/[SEP] as language tokens
  std::size_t highlight_i = 1;    // F^{i,j} singled out in the summary
  std::size_t highlight_j = 3;
  std::uint64_t seed = 1;         // k-means seeding
  KMeansOptions kmeans;
};

struct ProbeReport {
  ImfReport imf;
  NmiProfile nmi;
  double highlighted = 0.0;
  std::size_t examples = 0;
  ProbeOptions options;
};

// Forward passes over (a subset of) the data; IMF per example averaged over
// the batch, plus the per-layer NMI profile of the fusion transformer.
inline ProbeReport probe(const ModelParams& params, const std::vector<SyntheticPair>& pairs,
                         const ProbeOptions& opt = {}) {
  const std::size_t layers = params.config.fusion_layers;
  detail::require<ConfigError>(opt.highlight_i >= 1 && opt.highlight_i <= opt.highlight_j &&
                                   opt.highlight_j <= layers,
                               "probe: layer pair (" + std::to_string(opt.highlight_i) + "," +
                                   std::to_string(opt.highlight_j) + ") outside 1.." + std::to_string(layers));
  std::vector<ImfReport> reports;
  std::vector<std::vector<Tensor>> hidden;
  std::vector<ModalityPartition> truth;
  for (const auto& group : group_by_image(pairs)) {
    if (reports.size() >= opt.max_examples) break;
    Tape tape = Tape::inference();
    VisionOutput vis = vision_forward(tape, pairs[group.front()].image, params);
    for (auto idx : group) {
      if (reports.size() >= opt.max_examples) break;
      if (opt.matched_only && !pairs[idx].matched) continue;
      FusionOutput f = multimodal_forward(tape, vis.tokens, pairs[idx].caption, params);
      const auto part = opt.include_specials ? partition_with_specials(f.layout) : f.layout.partition;
      reports.push_back(imf_profiles(f.records, part));
      hidden.push_back(f.layer_outputs);
      truth.push_back(f.layout.partition);
    }
  }
  detail::require<ContractError>(!reports.empty(), "probe: no examples selected");
  ProbeReport rep;
  rep.options = opt;
  rep.examples = reports.size();
  rep.imf = average_reports(reports);
  Rng rng(opt.seed);
  rep.nmi = nmi_profile(hidden, truth, rng, opt.kmeans);
  rep.highlighted = rep.imf.at(opt.highlight_i, opt.highlight_j);
  return rep;
}

inline nlohmann::json probe_summary(const ProbeReport& rep) {
  nlohmann::json j;
  j["examples"] = rep.examples;
  j["matched_only"] = rep.options.matched_only;
  j["include_specials"] = rep.options.include_specials;
  j["highlight"] = {{"i", rep.options.highlight_i}, {"j", rep.options.highlight_j}, {"F", rep.highlighted}};
  j["imf"] = imf_to_json(rep.imf);
  j["nmi"] = {{"mean", rep.nmi.mean}, {"std", rep.nmi.stddev}};
  return j;
}

// Writes imf.csv (i,j,F), imf_profiles.csv (layer, F^{1,j}, F^{i,i}),
// nmi.csv and summary.json into `dir`.
inline void write_probe_report(const std::filesystem::path& dir, const ProbeReport& rep) {
  std::filesystem::create_directories(dir);
  auto open = [&dir](const char* name) {
    std::ofstream os(dir / name);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    os.precision(17);
    return os;
  };
  {
    auto os = open("imf.csv");
    write_imf_csv(os, rep.imf);
  }
  {
    auto os = open("imf_profiles.csv");
    os << "layer,F_1j,F_ii\n";
    for (std::size_t l = 0; l < rep.imf.layers; ++l)
      os << (l + 1) << ',' << rep.imf.from_first[l] << ',' << rep.imf.per_layer[l] << '\n';
  }
  {
    auto os = open("nmi.csv");
    write_nmi_csv(os, rep.nmi);
  }
  {
    auto os = open("summary.json");
    os << probe_summary(rep).dump(2) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Attention dumps
// ---------------------------------------------------------------------------

struct AttentionDump {
  std::vector<Tensor> vision;  // per vision layer, m × m
  std::vector<Tensor> fusion;  // per multi-modal layer, n × n
  SequenceLayout layout;
};

// One tensor file per layer plus manifest.json carrying the partition.
inline std::vector<std::filesystem::path> dump_attention(const std::filesystem::path& dir, const ModelParams& params,
                                                         const SyntheticPair& pair) {
  std::filesystem::create_directories(dir);
  Tape tape = Tape::inference();
  VisionOutput vis = vision_forward(tape, pair.image, params);
  FusionOutput f = multimodal_forward(tape, vis.tokens, pair.caption, params);
  std::vector<std::filesystem::path> files;
  nlohmann::json manifest;
  nlohmann::json vis_files = nlohmann::json::array(), fus_files = nlohmann::json::array();
  for (const auto& r : vis.records) {
    const std::string name = "vision_layer" + std::to_string(r.layer_index) + ".tensor";
    save_tensor(dir / name, r.matrix);
    files.push_back(dir / name);
    vis_files.push_back(name);
  }
  for (const auto& r : f.records) {
    const std::string name = "fusion_layer" + std::to_string(r.layer_index) + ".tensor";
    save_tensor(dir / name, r.matrix);
    files.push_back(dir / name);
    fus_files.push_back(name);
  }
  manifest["vision_layers"] = vis_files;
  manifest["fusion_layers"] = fus_files;
  manifest["sequence_length"] = f.layout.length;
  manifest["cls"] = f.layout.cls;
  manifest["sep"] = f.layout.sep;
  manifest["partition"] = {{"vision", f.layout.partition.vision}, {"language", f.layout.partition.language}};
  manifest["matched"] = pair.matched;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(1) << '\n';
  return files;
}

inline AttentionDump load_attention_dump(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("cannot open " + (dir / "manifest.json").string());
  const auto m = nlohmann::json::parse(is);
  AttentionDump d;
  for (const auto& f : m.at("vision_layers")) d.vision.push_back(load_tensor(dir / f.get<std::string>()));
  for (const auto& f : m.at("fusion_layers")) d.fusion.push_back(load_tensor(dir / f.get<std::string>()));
  d.layout.length = m.at("sequence_length").get<std::size_t>();
  d.layout.cls = m.at("cls").get<std::size_t>();
  d.layout.sep = m.at("sep").get<std::size_t>();
  d.layout.partition.vision = m.at("partition").at("vision").get<std::vector<std::size_t>>();
  d.layout.partition.language = m.at("partition").at("language").get<std::vector<std::size_t>>();
  return d;
}

// IMF report over the multi-modal layers of a dump.
inline ImfReport imf_from_dump(const AttentionDump& d, bool include_specials = false) {
  std::vector<AttentionRecord> records;
  for (std::size_t l = 0; l < d.fusion.size(); ++l) records.push_back({l + 1, d.fusion[l]});
  return imf_profiles(records, include_specials ? partition_with_specials(d.layout) : d.layout.partition);
}

// ---------------------------------------------------------------------------
// Objective ablation
// ---------------------------------------------------------------------------

struct AblationSetting {
  std::string name;
  MfrMode mode;
};

inline std::vector<AblationSetting> ablation_settings() {
  return {{"MLM+ITM", MfrMode::kOff},
          {"MLM+ITM+MFR_Rand", MfrMode::kRandom},
          {"MLM+ITM+MFR", MfrMode::kRanked},
          {"MLM+ITM+MFR_CNN", MfrMode::kCosine}};
}

struct AblationRow {
  std::string objectives;
  std::uint64_t seed = 0;
  double f13 = 0.0;
  LossValues final_losses;  // mean of the last 10 logged steps
};

struct AblationResult {
  std::vector<AblationRow> runs;     // one per (seed, setting)
  std::vector<AblationRow> summary;  // per setting, averaged over seeds
  // Seeds on which ranked MFR reached at least the MLM+ITM F^{1,3}.
  std::size_t ranked_wins = 0;
  std::size_t seeds = 0;
};

using AblationProgress = std::function<void(const AblationRow&)>;

inline AblationResult ablate(const TrainConfig& base, std::size_t seeds, const ProbeOptions& probe_opt = {},
                             const AblationProgress& progress = {}) {
  detail::require<ConfigError>(seeds >= 1, "ablate: need at least one seed");
  AblationResult res;
  res.seeds = seeds;
  const auto settings = ablation_settings();
  std::vector<AblationRow> sums(settings.size());
  for (std::size_t s = 0; s < seeds; ++s) {
    TrainConfig cfg = base;
    cfg.seed = base.seed + s;
    const auto data = training_data(cfg);
    const auto held = held_out_data(cfg, 4 * probe_opt.max_examples);
    double f_base = 0.0, f_ranked = 0.0;
    for (std::size_t k = 0; k < settings.size(); ++k) {
      cfg.mfr_mode = settings[k].mode;
      auto trained = train(cfg, data);
      ProbeOptions po = probe_opt;
      po.highlight_i = 1;
      po.highlight_j = 3;
      AblationRow row;
      row.objectives = settings[k].name;
      row.seed = cfg.seed;
      row.f13 = probe(trained.params, held, po).highlighted;
      const std::size_t n = trained.log.rows.size();
      row.final_losses = trained.log.mean_values(n >= 10 ? n - 10 : 0, n);
      row.final_losses.has_mfr = settings[k].mode != MfrMode::kOff;
      if (settings[k].mode == MfrMode::kOff) f_base = row.f13;
      if (settings[k].mode == MfrMode::kRanked) f_ranked = row.f13;
      if (progress) progress(row);
      res.runs.push_back(row);

      auto& acc = sums[k];
      acc.objectives = row.objectives;
      acc.f13 += row.f13 / static_cast<double>(seeds);
      acc.final_losses.mlm += row.final_losses.mlm / static_cast<double>(seeds);
      acc.final_losses.itm += row.final_losses.itm / static_cast<double>(seeds);
      acc.final_losses.vla += row.final_losses.vla / static_cast<double>(seeds);
      acc.final_losses.mfr += row.final_losses.mfr / static_cast<double>(seeds);
      acc.final_losses.total += row.final_losses.total / static_cast<double>(seeds);
      acc.final_losses.has_mfr = row.final_losses.has_mfr;
    }
    if (f_ranked >= f_base) ++res.ranked_wins;
  }
  res.summary = std::move(sums);
  return res;
}

// objectives,F13,L_MLM,L_ITM,L_VLA,L_MFR,L_total; L_MFR is empty when the
// setting has no MFR term.
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows, bool with_seed) {
  os.precision(17);
  os << (with_seed ? "seed," : "") << "objectives,F13,L_MLM,L_ITM,L_VLA,L_MFR,L_total\n";
  for (const auto& r : rows) {
    if (with_seed) os << r.seed << ',';
    os << r.objectives << ',' << r.f13 << ',' << r.final_losses.mlm << ',' << r.final_losses.itm << ','
       << r.final_losses.vla << ',';
    if (r.final_losses.has_mfr) os << r.final_losses.mfr;
    os << ',' << r.final_losses.total << '\n';
  }
}

}  // namespace vlp
