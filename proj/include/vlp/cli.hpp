#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vlp/attention_flow.hpp"
#include "vlp/data.hpp"
#include "vlp/error.hpp"
#include "vlp/probe.hpp"
#include "vlp/train.hpp"

namespace vlp::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;

// Overrides the default run directory when --out is not given.
inline constexpr const char* kRunDirEnv = "VLP_RUN_DIR";

inline fs::path run_dir(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kRunDirEnv); env && *env) return fs::path(env) / fallback;
  return fs::path("runs") / fallback;
}

inline nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open config " + p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + p.string() + ": " + e.what());
  }
}

// "a.b.c=value": value parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// Flags shared by every command that needs a TrainConfig.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::size_t> steps, dataset_size, images_per_step, mfr_k, concepts;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, lambda1, lambda2, vla_weight, mfr_p;
  std::optional<std::string> mfr_mode;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file");
    app->add_option("--set", sets, "Override a config key, e.g. --set optimizer.lr=5e-4");
    app->add_option("--steps", steps, "Training steps");
    app->add_option("--seed", seed, "Root RNG seed");
    app->add_option("--dataset-size", dataset_size, "Synthetic pairs to generate");
    app->add_option("--images-per-step", images_per_step, "Images per optimizer step (4 texts each)");
    app->add_option("--concepts", concepts, "Synthetic concept count");
    app->add_option("--lr", lr, "Multi-modal learning rate");
    app->add_option("--lambda1", lambda1, "ITM weight");
    app->add_option("--lambda2", lambda2, "MFR weight");
    app->add_option("--vla-weight", vla_weight, "VLA weight inside the ITM term");
    app->add_option("--mfr-mode", mfr_mode, "ranked | random | cosine | off");
    app->add_option("--mfr-k", mfr_k, "Masked visual tokens for ranked/cosine MFR");
    app->add_option("--mfr-p", mfr_p, "Masking probability for random MFR");
  }

  TrainConfig resolve() const {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) j = read_json_file(config_path);
    if (steps) j["steps"] = *steps;
    if (seed) j["seed"] = *seed;
    if (dataset_size) j["dataset_size"] = *dataset_size;
    if (images_per_step) j["images_per_step"] = *images_per_step;
    if (concepts) j["data"]["concepts"] = *concepts;
    if (lr) j["optimizer"]["lr"] = *lr;
    if (lambda1) j["weights"]["lambda1"] = *lambda1;
    if (lambda2) j["weights"]["lambda2"] = *lambda2;
    if (vla_weight) j["weights"]["vla_weight"] = *vla_weight;
    if (mfr_mode) j["mfr_mode"] = *mfr_mode;
    if (mfr_k) j["mfr_k"] = *mfr_k;
    if (mfr_p) j["mfr_p"] = *mfr_p;
    for (const auto& s : sets) apply_override(j, s);
    TrainConfig cfg;
    try {
      j.get_to(cfg);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    cfg.validate();
    return cfg;
  }
};

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

inline std::vector<SyntheticPair> data_or_synth(const std::string& data_dir, const TrainConfig& cfg) {
  return data_dir.empty() ? training_data(cfg) : load_dataset(data_dir);
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Toy vision-language pre-training: training, attention-flow and fusion probing"};
  app.require_subcommand(1);

  // synth
  ConfigFlags synth_cfg;
  std::string synth_out;
  std::size_t synth_n = 512;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic paired dataset");
  synth_cfg.attach(synth);
  synth->add_option("--n", synth_n, "Number of image-text pairs");
  synth->add_option("--out", synth_out, "Output directory");

  // train
  ConfigFlags train_cfg;
  std::string train_out, train_data;
  std::size_t held_out = 256;
  auto* trn = app.add_subcommand("train", "Pre-train the toy model");
  train_cfg.attach(trn);
  trn->add_option("--data", train_data, "Dataset directory from `synth` (default: generate from config)");
  trn->add_option("--out", train_out, "Run directory");
  trn->add_option("--held-out", held_out, "Held-out pairs for ITM accuracy");

  // probe
  ConfigFlags probe_cfg;
  std::string probe_ckpt, probe_data, probe_out, probe_attn;
  ProbeOptions popt;
  bool all_pairs = false;
  auto* prb = app.add_subcommand("probe", "IMF and NMI profiles for a checkpoint or an attention dump");
  probe_cfg.attach(prb);
  prb->add_option("--checkpoint", probe_ckpt, "Checkpoint directory");
  prb->add_option("--attn-dir", probe_attn, "Attention dump directory (standalone IMF)");
  prb->add_option("--data", probe_data, "Dataset directory (default: held-out synthetic data)");
  prb->add_option("--out", probe_out, "Report directory");
  prb->add_option("--i", popt.highlight_i, "Source layer of the highlighted F^{i,j}");
  prb->add_option("--j", popt.highlight_j, "Target layer of the highlighted F^{i,j}");
  prb->add_option("--max-examples", popt.max_examples, "Examples averaged");
  prb->add_flag("--include-specials", popt.include_specials, "Count [CLS]/[SEP] as language tokens");
  prb->add_flag("--all-pairs", all_pairs, "Include mismatched pairs");

  // dump-attn
  std::string dump_ckpt, dump_data, dump_out;
  ConfigFlags dump_cfg;
  std::size_t dump_pair = 0;
  auto* dmp = app.add_subcommand("dump-attn", "Write per-layer attention tensors for one pair");
  dump_cfg.attach(dmp);
  dmp->add_option("--checkpoint", dump_ckpt, "Checkpoint directory")->required();
  dmp->add_option("--data", dump_data, "Dataset directory (default: held-out synthetic data)");
  dmp->add_option("--pair", dump_pair, "Pair index");
  dmp->add_option("--out", dump_out, "Output directory");

  // ablate
  ConfigFlags abl_cfg;
  std::string abl_out;
  std::size_t abl_seeds = 3;
  std::size_t abl_examples = 64;
  auto* abl = app.add_subcommand("ablate", "Train the four objective settings and tabulate F^{1,3} and losses");
  abl_cfg.attach(abl);
  abl->add_option("--out", abl_out, "Output directory");
  abl->add_option("--seeds", abl_seeds, "Consecutive seeds starting at --seed");
  abl->add_option("--max-examples", abl_examples, "Held-out examples for F^{1,3}");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      const TrainConfig cfg = synth_cfg.resolve();
      Rng rng = Rng(cfg.seed).fork(kDataStream);
      const auto pairs = synth_dataset(synth_n, ConceptBank(cfg.model, cfg.data), rng);
      const fs::path dir = run_dir(synth_out, "data");
      save_dataset(dir, pairs);
      out << "wrote " << pairs.size() << " pairs to " << dir.string() << '\n';
      return kExitOk;
    }

    if (*trn) {
      const TrainConfig cfg = train_cfg.resolve();
      const auto data = data_or_synth(train_data, cfg);
      const fs::path dir = run_dir(train_out, "train");
      fs::create_directories(dir);
      nlohmann::json cj = cfg;
      write_json(dir / "config.json", cj);
      auto res = train(cfg, data);
      {
        std::ofstream os(dir / "loss.csv");
        if (!os) throw IoError("cannot write loss.csv");
        write_loss_csv(os, res.log);
      }
      save_checkpoint(dir / "checkpoint", res.params);
      save_checkpoint(dir / "initial_checkpoint", res.initial);
      const auto held = held_out_data(cfg, held_out);
      const double acc = itm_accuracy(res.params, held);
      const std::size_t n = res.log.rows.size();
      nlohmann::json metrics = {{"steps", n},
                                {"first10_total", res.log.mean_total(0, 10)},
                                {"last10_total", res.log.mean_total(n >= 10 ? n - 10 : 0, n)},
                                {"held_out_itm_accuracy", acc}};
      write_json(dir / "metrics.json", metrics);
      out << metrics.dump() << '\n';
      return kExitOk;
    }

    if (*prb) {
      const fs::path dir = run_dir(probe_out, "probe");
      if (!probe_attn.empty()) {
        const auto dump = load_attention_dump(probe_attn);
        const auto rep = imf_from_dump(dump, popt.include_specials);
        const double hl = rep.at(popt.highlight_i, popt.highlight_j);
        fs::create_directories(dir);
        std::ofstream os(dir / "imf.csv");
        write_imf_csv(os, rep);
        auto j = imf_to_json(rep);
        j["highlight"] = {{"i", popt.highlight_i}, {"j", popt.highlight_j}, {"F", hl}};
        write_json(dir / "summary.json", j);
        out << j["highlight"].dump() << '\n';
        return kExitOk;
      }
      if (probe_ckpt.empty()) throw ConfigError("probe needs --checkpoint or --attn-dir");
      const TrainConfig cfg = probe_cfg.resolve();
      const auto params = load_checkpoint(probe_ckpt);
      const auto data = probe_data.empty() ? held_out_data(cfg, 4 * popt.max_examples) : load_dataset(probe_data);
      popt.matched_only = !all_pairs;
      popt.seed = cfg.seed;
      const auto rep = probe(params, data, popt);
      write_probe_report(dir, rep);
      out << probe_summary(rep)["highlight"].dump() << '\n';
      return kExitOk;
    }

    if (*dmp) {
      const TrainConfig cfg = dump_cfg.resolve();
      const auto params = load_checkpoint(dump_ckpt);
      const auto data = dump_data.empty() ? held_out_data(cfg, dump_pair + 1) : load_dataset(dump_data);
      if (dump_pair >= data.size()) throw ConfigError("--pair " + std::to_string(dump_pair) + " out of range");
      const fs::path dir = run_dir(dump_out, "attention");
      const auto files = dump_attention(dir, params, data[dump_pair]);
      out << "wrote " << files.size() << " attention tensors to " << dir.string() << '\n';
      return kExitOk;
    }

    if (*abl) {
      const TrainConfig cfg = abl_cfg.resolve();
      const fs::path dir = run_dir(abl_out, "ablate");
      fs::create_directories(dir);
      ProbeOptions po;
      po.max_examples = abl_examples;
      po.seed = cfg.seed;
      const auto res = ablate(cfg, abl_seeds, po, [&out](const AblationRow& r) {
        out << "seed " << r.seed << ' ' << r.objectives << " F13=" << r.f13 << " L_total=" << r.final_losses.total
            << std::endl;
      });
      {
        std::ofstream os(dir / "ablation_runs.csv");
        write_ablation_csv(os, res.runs, true);
      }
      {
        std::ofstream os(dir / "ablation.csv");
        write_ablation_csv(os, res.summary, false);
      }
      write_json(dir / "ablation_summary.json",
                 {{"seeds", res.seeds}, {"ranked_mfr_at_least_baseline", res.ranked_wins}});
      write_ablation_csv(out, res.summary, false);
      return kExitOk;
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace vlp::cli
