// Command-line surface for the visually-semantic embedding pipeline:
// synthesize planted datasets, build the visual oracle, train the learner,
// and evaluate under the ZSL / GZSL protocols.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "vsemb/checkpoint.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/evaluator.hpp"
#include "vsemb/oracle.hpp"
#include "vsemb/synthetic.hpp"
#include "vsemb/tensor_io.hpp"
#include "vsemb/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw vsemb::ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw vsemb::ConfigError(std::string("config parse error: ") + e.what());
  }
  if (!j.is_object()) throw vsemb::ConfigError("config root must be a JSON object");
  return j;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw vsemb::ConfigError(what + ": unknown key '" + it.key() + "'");
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw vsemb::ConfigError("cannot write " + path.string());
  out << text;
}

int run_synth(const std::string& out_dir, const std::string& config_path,
              const std::optional<std::uint64_t>& seed_override) {
  vsemb::SynthConfig cfg;
  if (!config_path.empty())
    cfg = vsemb::synth_config_from_json(load_json_file(config_path));
  if (seed_override) cfg.seed = *seed_override;
  auto [ds, planted] = vsemb::generate_synthetic(cfg);
  fs::create_directories(out_dir);
  vsemb::write_synthetic_dataset(ds, planted, cfg, out_dir);
  const auto counts = vsemb::class_partition_counts(ds);
  std::cout << "synth: wrote " << counts.n_images << " instances, "
            << counts.n_classes << " classes (" << counts.n_seen << " seen / "
            << counts.n_unseen << " unseen) to " << out_dir << "\n"
            << "synth: prototype separation achieved " << planted.min_separation
            << " (required " << cfg.separation * cfg.noise << ")\n";
  return 0;
}

struct OracleCliConfig {
  vsemb::OracleConfig cfg;

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k = {
        "parts", "types", "epochs", "learning_rate", "lambda", "zeta",
        "em_max_steps", "em_tol", "seed", "use_raw_parts", "permute_channels",
        "flat"};
    return k;
  }

  void apply_json(const json& j) {
    reject_unknown_keys(j, keys(), "oracle config");
    if (j.contains("parts")) cfg.parts = j["parts"].get<std::size_t>();
    if (j.contains("types")) cfg.types = j["types"].get<std::size_t>();
    if (j.contains("epochs")) cfg.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("lambda")) cfg.lambda = j["lambda"].get<double>();
    if (j.contains("zeta")) cfg.zeta = j["zeta"].get<double>();
    if (j.contains("em_max_steps")) cfg.em_max_steps = j["em_max_steps"].get<std::size_t>();
    if (j.contains("em_tol")) cfg.em_tol = j["em_tol"].get<double>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("use_raw_parts")) cfg.use_raw_parts = j["use_raw_parts"].get<bool>();
    if (j.contains("permute_channels"))
      cfg.permute_channels = j["permute_channels"].get<bool>();
    if (j.contains("flat")) cfg.flat = j["flat"].get<bool>();
  }
};

std::string training_log_csv(const std::vector<vsemb::EpochLog>& log) {
  std::string out = "epoch,l_prt,mix_nll,phi_xy,phi_sx\n";
  char buf[160];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", e.epoch,
                  e.l_prt, e.mix_nll, e.phi_xy, e.phi_sx);
    out += buf;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vsemb: visually-semantic embedding pipeline for generalized "
               "zero-shot recognition"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "Generate a planted synthetic dataset");
  std::string synth_out, synth_config;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--config", synth_config, "JSON generator config");
  auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "Generator seed");

  // ---- oracle ----
  auto* orc = app.add_subcommand("oracle", "Build and serialize the visual oracle");
  std::string orc_data, orc_out = "oracle.vseck", orc_config;
  std::string orc_emit_codebook, orc_emit_pi;
  OracleCliConfig ocfg;
  std::uint64_t orc_seed = 0;
  std::size_t orc_epochs = 0, orc_parts = 0, orc_types = 0;
  double orc_lr = 0.0;
  bool orc_flat = false, orc_raw = false, orc_no_perm = false;
  int orc_threads = 1;
  orc->add_option("--data", orc_data, "Dataset directory")->required();
  orc->add_option("--out", orc_out, "Oracle checkpoint path")
      ->capture_default_str();
  orc->add_option("--config", orc_config, "JSON oracle config");
  auto* orc_seed_opt = orc->add_option("--seed", orc_seed, "Oracle seed");
  auto* orc_epochs_opt = orc->add_option("--epochs", orc_epochs, "Fit epochs");
  auto* orc_parts_opt = orc->add_option("--parts", orc_parts, "Part count M");
  auto* orc_types_opt = orc->add_option("--types", orc_types, "Type count K");
  auto* orc_lr_opt = orc->add_option("--lr", orc_lr, "Learning rate");
  orc->add_flag("--flat", orc_flat, "Emit flattened embeddings");
  orc->add_flag("--raw-parts", orc_raw, "Fit on stored raw part features");
  orc->add_flag("--no-channel-perm", orc_no_perm,
                "Disable the channel permutation");
  orc->add_option("--threads", orc_threads, "Worker threads")->capture_default_str();
  orc->add_option("--emit-codebook", orc_emit_codebook,
                  "Also write the class-averaged visual codebook (VSEF)");
  orc->add_option("--emit-pi", orc_emit_pi,
                  "Also write per-instance supervision embeddings (VSEF)");

  // ---- train ----
  auto* trn = app.add_subcommand("train", "Train a learner checkpoint");
  std::string trn_data, trn_oracle, trn_out = "checkpoint.vseck", trn_config;
  std::string trn_mode, trn_log;
  vsemb::TrainConfig tdefaults;
  std::size_t trn_epochs = 0, trn_parts = 0, trn_types = 0, trn_hidden = 0;
  std::size_t trn_em_period = 0, trn_em_max = 0, trn_mapper_steps = 0;
  double trn_lr1 = 0.0, trn_lr2 = 0.0, trn_lambda = 0.0, trn_zeta = 0.0,
         trn_eta = 0.0, trn_em_tol = 0.0;
  std::uint64_t trn_seed = 0;
  bool trn_no_norm = false, trn_margin_on_correct = false, trn_pi_grad = false;
  int trn_threads = 1;
  trn->add_option("--data", trn_data, "Dataset directory")->required();
  trn->add_option("--mode", trn_mode,
                  "semantic | visual | visual-flat | baseline");
  trn->add_option("--oracle", trn_oracle, "Oracle checkpoint (visual modes)");
  trn->add_option("--out", trn_out, "Checkpoint path")->capture_default_str();
  trn->add_option("--config", trn_config, "JSON run config");
  trn->add_option("--log", trn_log, "Training log CSV path");
  auto* trn_epochs_opt = trn->add_option("--epochs", trn_epochs, "Epochs");
  auto* trn_lr1_opt = trn->add_option("--lr-step1", trn_lr1, "Step-1 learning rate");
  auto* trn_lr2_opt = trn->add_option("--lr-step2", trn_lr2, "Step-2 learning rate");
  auto* trn_lambda_opt = trn->add_option("--lambda", trn_lambda, "Diversity weight");
  auto* trn_zeta_opt = trn->add_option("--zeta", trn_zeta, "Diversity margin");
  auto* trn_eta_opt = trn->add_option("--eta", trn_eta, "Hinge margin");
  auto* trn_parts_opt = trn->add_option("--parts", trn_parts, "Part count M");
  auto* trn_types_opt = trn->add_option("--types", trn_types, "Type count K");
  auto* trn_hidden_opt = trn->add_option("--hidden", trn_hidden, "Mapper hidden width");
  auto* trn_em_period_opt = trn->add_option("--em-period", trn_em_period,
                                            "Epochs between EM refreshes");
  auto* trn_em_max_opt = trn->add_option("--em-max-steps", trn_em_max, "EM step cap");
  auto* trn_em_tol_opt = trn->add_option("--em-tol", trn_em_tol, "EM tolerance");
  auto* trn_mapper_opt = trn->add_option("--mapper-steps", trn_mapper_steps,
                                         "Mapper fit iterations per epoch");
  auto* trn_seed_opt = trn->add_option("--seed", trn_seed, "Training seed");
  trn->add_flag("--no-normalize-codebook", trn_no_norm,
                "Skip L2 normalization of semantic codebook vectors");
  trn->add_flag("--margin-on-correct", trn_margin_on_correct,
                "Literal hinge variant: margin on the correct-class term");
  trn->add_flag("--pi-gradients-to-prototypes", trn_pi_grad,
                "Experimental: let the visual potential update the prototypes");
  trn->add_option("--threads", trn_threads, "Worker threads")->capture_default_str();

  // ---- eval ----
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string evl_data, evl_model, evl_setting = "gzsl", evl_codebook, evl_report;
  int evl_threads = 1;
  evl->add_option("--data", evl_data, "Dataset directory")->required();
  evl->add_option("--model", evl_model, "Learner checkpoint")->required();
  evl->add_option("--setting", evl_setting, "zsl | gzsl")->capture_default_str();
  evl->add_option("--codebook", evl_codebook,
                  "Codebook path (semantic CSV or visual VSEF); defaults to the "
                  "dataset's codebook");
  evl->add_option("--report", evl_report, "Report CSV path");
  evl->add_option("--threads", evl_threads, "Worker threads")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      std::optional<std::uint64_t> seed;
      if (synth_seed_opt->count() > 0) seed = synth_seed;
      return run_synth(synth_out, synth_config, seed);
    }

    if (orc->parsed()) {
      if (!orc_config.empty()) ocfg.apply_json(load_json_file(orc_config));
      if (orc_seed_opt->count()) ocfg.cfg.seed = orc_seed;
      if (orc_epochs_opt->count()) ocfg.cfg.epochs = orc_epochs;
      if (orc_parts_opt->count()) ocfg.cfg.parts = orc_parts;
      if (orc_types_opt->count()) ocfg.cfg.types = orc_types;
      if (orc_lr_opt->count()) ocfg.cfg.learning_rate = orc_lr;
      if (orc_flat) ocfg.cfg.flat = true;
      if (orc_raw) ocfg.cfg.use_raw_parts = true;
      if (orc_no_perm) ocfg.cfg.permute_channels = false;
      ocfg.cfg.threads = orc_threads;

      const vsemb::Dataset ds = vsemb::load_dataset(orc_data);
      vsemb::OracleBuildLog log;
      const vsemb::VisualOracle oracle = vsemb::build_oracle(ds, ocfg.cfg, &log);
      vsemb::save_oracle(oracle, orc_out);

      std::cout << "oracle: fitted " << oracle.n_parts() << " parts x "
                << oracle.n_types() << " types from " << oracle.feature_source
                << " features\n";
      for (std::size_t m = 0; m < log.em_traces.size(); ++m) {
        const auto& t = log.em_traces[m];
        std::cout << "oracle: part " << m << " EM nll " << t.nll.front()
                  << " -> " << t.nll.back() << " in " << t.nll.size()
                  << " steps" << (t.converged ? "" : " (step cap)") << "\n";
      }
      if (!orc_emit_codebook.empty()) {
        const vsemb::Codebook cb = vsemb::oracle_codebook(oracle, ds, ds.classes);
        vsemb::write_visual_codebook_vsef(cb, orc_emit_codebook);
        std::cout << "oracle: wrote codebook " << orc_emit_codebook << "\n";
      }
      if (!orc_emit_pi.empty()) {
        const std::size_t n = ds.instances.size();
        const std::size_t M = oracle.n_parts(), K = oracle.n_types();
        vsemb::Tensor pis(oracle.flat
                              ? std::vector<std::size_t>{n, M * K}
                              : std::vector<std::size_t>{n, M, K});
        for (std::size_t i = 0; i < n; ++i) {
          const vsemb::PiEmbedding pi = vsemb::oracle_pi(oracle, ds.instances[i]);
          for (std::size_t j = 0; j < M * K; ++j) pis[i * M * K + j] = pi.pi[j];
        }
        vsemb::write_tensor_file(pis, orc_emit_pi);
        std::cout << "oracle: wrote supervision embeddings " << orc_emit_pi << "\n";
      }
      return 0;
    }

    if (trn->parsed()) {
      vsemb::TrainConfig cfg;
      std::string data = trn_data, oracle_path = trn_oracle, out = trn_out,
                  log_path = trn_log;
      if (!trn_config.empty()) {
        const json j = load_json_file(trn_config);
        std::set<std::string> known = vsemb::train_config_keys();
        known.insert({"data", "oracle", "checkpoint", "log", "report", "threads"});
        reject_unknown_keys(j, known, "run config");
        vsemb::train_config_apply_json(cfg, j);
        if (j.contains("data") && data.empty()) data = j["data"].get<std::string>();
        if (j.contains("oracle") && oracle_path.empty())
          oracle_path = j["oracle"].get<std::string>();
        if (j.contains("checkpoint")) out = j["checkpoint"].get<std::string>();
        if (j.contains("log") && log_path.empty()) log_path = j["log"].get<std::string>();
        if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
      }
      if (!trn_mode.empty()) cfg.mode = vsemb::train_mode_from_string(trn_mode);
      if (trn_epochs_opt->count()) cfg.epochs = trn_epochs;
      if (trn_lr1_opt->count()) cfg.lr_step1 = trn_lr1;
      if (trn_lr2_opt->count()) cfg.lr_step2 = trn_lr2;
      if (trn_lambda_opt->count()) cfg.lambda = trn_lambda;
      if (trn_zeta_opt->count()) cfg.zeta = trn_zeta;
      if (trn_eta_opt->count()) cfg.eta = trn_eta;
      if (trn_parts_opt->count()) cfg.parts = trn_parts;
      if (trn_types_opt->count()) cfg.types = trn_types;
      if (trn_hidden_opt->count()) cfg.hidden = trn_hidden;
      if (trn_em_period_opt->count()) cfg.em_period = trn_em_period;
      if (trn_em_max_opt->count()) cfg.em_max_steps = trn_em_max;
      if (trn_em_tol_opt->count()) cfg.em_tol = trn_em_tol;
      if (trn_mapper_opt->count()) cfg.mapper_steps = trn_mapper_steps;
      if (trn_seed_opt->count()) cfg.seed = trn_seed;
      if (trn_no_norm) cfg.normalize_codebook = false;
      if (trn_margin_on_correct) cfg.margin_on_correct = true;
      if (trn_pi_grad) cfg.pi_gradient_to_prototypes = true;
      if (trn->count("--threads")) cfg.threads = trn_threads;

      const vsemb::Dataset ds = vsemb::load_dataset(data);
      std::optional<vsemb::VisualOracle> oracle;
      if (!oracle_path.empty()) oracle = vsemb::load_oracle(oracle_path);

      const bool needs_oracle = cfg.mode == vsemb::TrainMode::visual ||
                                cfg.mode == vsemb::TrainMode::visual_flat;
      if (needs_oracle && !oracle)
        throw vsemb::ConfigError("train: --oracle is required for visual modes");

      const vsemb::Codebook* semantic_cb =
          ds.codebook.kind == vsemb::CodebookKind::semantic ? &ds.codebook : nullptr;
      const vsemb::Checkpoint ck =
          vsemb::train(ds, cfg, semantic_cb, oracle ? &*oracle : nullptr);
      vsemb::save_checkpoint(ck, out);
      if (!log_path.empty()) write_text_file(log_path, training_log_csv(ck.log));
      std::cout << "train: mode " << vsemb::to_string(cfg.mode) << ", "
                << cfg.epochs << " epochs, checkpoint " << out << "\n";
      if (!ck.log.empty()) {
        const auto& last = ck.log.back();
        std::cout << "train: final L_prt " << last.l_prt << ", phi_XY "
                  << last.phi_xy << ", phi_SX " << last.phi_sx << "\n";
      }
      return 0;
    }

    if (evl->parsed()) {
      const vsemb::Dataset ds = vsemb::load_dataset(evl_data);
      const vsemb::Checkpoint ck = vsemb::load_checkpoint(evl_model);
      const vsemb::Codebook cb = evl_codebook.empty()
                                     ? ds.codebook
                                     : vsemb::read_codebook_auto(evl_codebook);
      const vsemb::EvalReport report = vsemb::evaluate(
          ck, ds, cb, vsemb::eval_setting_from_string(evl_setting), evl_threads);
      std::cout << vsemb::report_table(report);
      if (!evl_report.empty()) write_text_file(evl_report, vsemb::report_csv(report));
      return 0;
    }
  } catch (const vsemb::TrainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const vsemb::EvalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const vsemb::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const vsemb::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
