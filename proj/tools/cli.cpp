#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "slpmt/experiment.hpp"

namespace slpmt::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
  if (text.empty() || text.back() != '\n') out << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  return Checkpoint::load(path);
}

SyntheticSuite load_data(const std::string& dir) {
  if (dir.empty()) throw std::invalid_argument("no data directory given (--data or paths.data)");
  if (!fs::exists(fs::path(dir) / "suite.json")) throw std::runtime_error("no synthetic suite in " + dir);
  return load_suite(dir);
}

void check_languages(const ModelConfig& model, const SyntheticSuite& suite) {
  bool ok = model.languages.size() == suite.config.languages.size() && model.vocab_size == suite.vocab.size();
  for (std::size_t k = 0; ok && k < model.languages.size(); ++k)
    ok = model.languages[k].id == suite.config.languages[k].id && model.languages[k].tier == suite.config.languages[k].tier;
  if (!ok) throw std::invalid_argument("checkpoint languages or vocabulary do not match the data directory");
}

struct Options {
  std::string config, out, data, resume, ckpt, stage, split = "dev", partition = "shared", layer = "slp-output",
                                                    kind, dir;
  std::size_t beam = 5, max_len = 0, last = 5, sentences = 50, batch_tokens = 2048;
  double length_penalty = 1.0, smoothing = 0.1;
  bool no_decode = false;
};

const std::vector<ParallelCorpus>& split_of(const SyntheticSuite& suite, const std::string& split) {
  return split == "train" ? suite.train : suite.dev;
}

int gen_data(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = load_experiment_config(o.config);
  const SyntheticSuite suite = generate_synthetic_suite(cfg.data);
  save_suite(suite, o.out);
  write_manifest(o.out, "gen-data", suite_config_to_json(cfg.data), cfg.data.seed);
  out << "wrote " << suite.train.size() << " directions to " << o.out << '\n';
  return 0;
}

int train(const Options& o, std::ostream& out) {
  ExperimentConfig cfg = load_experiment_config(o.config);
  const Stage stage = parse_stage(o.stage);
  const std::string data_dir = o.data.empty() ? cfg.data_dir : o.data;
  const std::string out_dir = o.out.empty() ? cfg.output_dir : o.out;
  if (out_dir.empty()) throw std::invalid_argument("no output directory given (--out or paths.output)");
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) resume = load_checkpoint(o.resume);
  if (stage == Stage::two && !resume)
    throw std::invalid_argument("train --stage 2 requires --resume pointing at a stage-1 checkpoint");
  const SyntheticSuite suite = load_data(data_dir);

  fs::create_directories(out_dir);
  const std::string config_text = experiment_config_to_json(cfg);
  write_text(fs::path(out_dir) / "config.json", config_text);
  std::ofstream log(fs::path(out_dir) / "train_log.jsonl",
                    resume && resume->stage == stage_name(stage) ? std::ios::app : std::ios::trunc);
  TrainingHooks hooks;
  hooks.log = &log;
  const TrainingRun run = run_training(cfg, suite, stage, resume, out_dir, hooks);
  std::map<std::string, fs::path> inputs{{"suite", fs::path(data_dir) / "suite.json"}};
  if (resume) inputs["resume"] = o.resume;
  write_manifest(out_dir, std::string("train --stage ") + stage_name(stage), config_text, cfg.train.seed, inputs);
  out << "trained " << run.epochs_trained << " epochs x " << run.steps_per_epoch << " steps; final checkpoint "
      << (fs::path(out_dir) / "final.ckpt").string() << '\n';
  return 0;
}

int evaluate_cmd(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const SyntheticSuite suite = load_data(o.data);
  check_languages(ck.config, suite);
  const ModelParams params = ck.to_params();
  EvalOptions eo;
  eo.beam = o.beam;
  eo.length_penalty = o.length_penalty;
  eo.max_len = o.max_len;
  eo.decode = !o.no_decode;
  eo.threads = thread_cap();
  const MetricsReport report = evaluate(params, split_of(suite, o.split), eo);
  write_text(fs::path(o.out) / "metrics.json", report.to_json());
  const json settings{{"beam", o.beam}, {"length_penalty", o.length_penalty}, {"max_len", o.max_len},
                      {"decode", !o.no_decode}, {"split", o.split}};
  write_manifest(o.out, "evaluate", settings.dump(), 0,
                 {{"checkpoint", o.ckpt}, {"suite", fs::path(o.data) / "suite.json"}});
  out << "hrl token accuracy " << report.high.token_accuracy << ", lrl token accuracy " << report.low.token_accuracy
      << ", bleu " << report.all.bleu << '\n';
  return 0;
}

int analyze(const Options& o, std::ostream& out) {
  const SyntheticSuite suite = load_data(o.data);
  const fs::path dir(o.out);
  json settings{{"kind", o.kind}, {"split", o.split}};
  std::map<std::string, fs::path> inputs{{"suite", fs::path(o.data) / "suite.json"}};
  std::optional<ModelParams> params;
  if (o.kind != "overlap") {
    if (o.ckpt.empty()) throw std::invalid_argument("analyze " + o.kind + " requires --ckpt");
    const Checkpoint ck = load_checkpoint(o.ckpt);
    check_languages(ck.config, suite);
    params = ck.to_params();
    inputs["checkpoint"] = o.ckpt;
  }
  const auto& corpora = split_of(suite, o.split);
  if (o.kind == "conflicts") {
    std::vector<Batch> probes;
    for (const auto& c : corpora) probes.push_back(probe_batch(c, o.batch_tokens));
    const auto selector = o.partition == "all" ? PartitionSelector::all : PartitionSelector::shared;
    write_text(dir / "conflicts.json", gradient_conflict_matrix(*params, probes, selector, o.smoothing).to_json());
    settings["partition"] = o.partition;
    settings["batch_tokens"] = o.batch_tokens;
    settings["smoothing"] = o.smoothing;
  } else if (o.kind == "overlap") {
    json j;
    j["labels"] = json::array();
    j["matrix"] = json::array();
    for (const auto& a : corpora) {
      j["labels"].push_back(a.target_language);
      json row = json::array();
      for (const auto& b : corpora) row.push_back(dictionary_overlap(a, b, suite.vocab));
      j["matrix"].push_back(row);
    }
    write_text(dir / "overlap.json", j.dump(2));
  } else if (o.kind == "selection") {
    write_text(dir / "selection.json", selection_report_json(selection_report(*params)));
  } else {
    const LayerSelector layer = LayerSelector::parse(o.layer);
    std::vector<std::vector<int>> sentences;
    for (const auto& p : corpora.at(0).pairs) {
      if (sentences.size() == o.sentences) break;
      sentences.emplace_back(p.source.begin() + 1, p.source.end());
    }
    std::ostringstream tsv;
    const std::size_t rows = export_decoder_representations(*params, sentences, layer, tsv);
    write_text(dir / "representations.tsv", tsv.str());
    settings["layer"] = layer.label();
    settings["sentences"] = o.sentences;
    out << "wrote " << rows << " rows\n";
  }
  write_manifest(dir, "analyze " + o.kind, settings.dump(), 0, inputs);
  out << "wrote " << o.kind << " analysis to " << dir.string() << '\n';
  return 0;
}

int average(const Options& o, std::ostream& out) {
  if (o.last < 1) throw std::invalid_argument("--last must be at least 1");
  fs::path dir(o.dir);
  if (fs::is_directory(dir / "checkpoints")) dir /= "checkpoints";
  if (!fs::is_directory(dir)) throw std::runtime_error("checkpoint directory not found: " + o.dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ckpt" && e.path().filename() != "final.ckpt")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.size() < o.last)
    throw std::runtime_error("asked for the last " + std::to_string(o.last) + " checkpoints but " + dir.string() +
                             " holds " + std::to_string(files.size()));
  files.erase(files.begin(), files.end() - static_cast<std::ptrdiff_t>(o.last));
  std::vector<Checkpoint> cks;
  std::map<std::string, fs::path> inputs;
  for (const auto& f : files) {
    cks.push_back(Checkpoint::load(f));
    inputs[f.filename().string()] = f;
  }
  const fs::path target(o.out);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  average_checkpoints(cks).save(target);
  // Manifest goes beside the output file.
  const json settings{{"last", o.last}};
  const fs::path manifest_dir = target.has_parent_path() ? target.parent_path() : fs::path(".");
  write_manifest(manifest_dir / (target.filename().string() + ".d"), "average-ckpts", settings.dump(), 0, inputs);
  out << "averaged " << cks.size() << " checkpoints into " << target.string() << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  tune_allocator();
  CLI::App app{"Language-specific layer selection for multilingual translation (desk scale)", "slpmt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multilingual suite");
  gen->add_option("--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train stage 1, stage 2 or the baseline");
  tr->add_option("--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  tr->add_option("--stage", o.stage, "1, 2 or baseline")->required()->check(CLI::IsMember({"1", "2", "baseline"}));
  tr->add_option("--out", o.out, "Run directory (default: paths.output)");
  tr->add_option("--data", o.data, "Suite directory (default: paths.data)");
  tr->add_option("--resume", o.resume, "Checkpoint to continue from; stage 2 needs a stage-1 checkpoint");

  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a suite split");
  ev->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  ev->add_option("--data", o.data, "Suite directory")->required();
  ev->add_option("--out", o.out, "Output directory")->required();
  ev->add_option("--beam", o.beam, "Beam size")->check(CLI::PositiveNumber);
  ev->add_option("--length-penalty", o.length_penalty, "Length normalization exponent");
  ev->add_option("--max-len", o.max_len, "Decode length cap (0: source length + 4)");
  ev->add_option("--split", o.split, "dev or train")->check(CLI::IsMember({"dev", "train"}));
  ev->add_flag("--no-decode", o.no_decode, "Teacher-forced accuracy only");

  auto* an = app.add_subcommand("analyze", "Conflict matrices, overlap, selection report, representations");
  an->add_option("kind", o.kind, "conflicts, overlap, selection or representations")
      ->required()
      ->check(CLI::IsMember({"conflicts", "overlap", "selection", "representations"}));
  an->add_option("--ckpt", o.ckpt, "Checkpoint (not needed for overlap)");
  an->add_option("--data", o.data, "Suite directory")->required();
  an->add_option("--out", o.out, "Output directory")->required();
  an->add_option("--split", o.split, "dev or train")->check(CLI::IsMember({"dev", "train"}));
  an->add_option("--partition", o.partition, "shared or all")->check(CLI::IsMember({"shared", "all"}));
  an->add_option("--batch-tokens", o.batch_tokens, "Probe batch budget")->check(CLI::PositiveNumber);
  an->add_option("--smoothing", o.smoothing, "Label smoothing of probe losses");
  an->add_option("--layer", o.layer, "Decoder layer index or slp-output");
  an->add_option("--sentences", o.sentences, "Sentences to export")->check(CLI::PositiveNumber);

  auto* avg = app.add_subcommand("average-ckpts", "Average the last N epoch checkpoints");
  avg->add_option("--last", o.last, "How many")->required();
  avg->add_option("--dir", o.dir, "Run or checkpoint directory")->required();
  avg->add_option("--out", o.out, "Output checkpoint")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "slpmt: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (gen->parsed()) return gen_data(o, out);
    if (tr->parsed()) return train(o, out);
    if (ev->parsed()) return evaluate_cmd(o, out);
    if (an->parsed()) return analyze(o, out);
    return average(o, out);
  } catch (const std::exception& e) {
    err << "slpmt: " << one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace slpmt::cli
