#include "cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "poemform/corpus.hpp"
#include "poemform/errors.hpp"
#include "poemform/evaluator.hpp"
#include "poemform/form_registry.hpp"
#include "poemform/generator.hpp"
#include "poemform/model.hpp"
#include "poemform/trainer.hpp"

namespace poemform::cli {

namespace {

struct Options {
  std::string forms;
  std::string corpus;
  std::string out;
  std::string vocab;
  std::string checkpoint;
  std::string in_file;
  std::vector<std::string> in_files;
  std::string report;
  std::string form;
  std::string title;
  std::string label;
  std::string mode = "enhanced";
  std::string stanza_label = "on";
  int min_freq = 3;
  int steps = 1000;
  int batch_size = 32;
  double lr = 2.5e-4;
  std::uint64_t seed = 0;
  int count = 1;
  int top_k = 15;
  int max_new_tokens = 0;
  double target_coverage = 0.8;

  int layers = 8;
  int heads = 8;
  int embed_dim = 512;
  int ff_dim = 1024;
  int max_seq_len = 256;
  double dropout = 0.1;
  bool tie_embeddings = false;
  int warmup_steps = 2000;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int checkpoint_every = 0;
  int report_every = 100;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write '" + path + "'");
  out << text;
}

const std::map<std::string, bool> kOnOff = {{"on", true}, {"off", false}};

int cmd_forms_validate(const Options& o, std::ostream& out) {
  const auto registry = load_registry(o.forms);
  out << "ok: " << registry.size() << " forms (" << builtin_shi_forms().size() << " built-in)\n";
  for (const auto& spec : registry.specs()) {
    out << "  " << spec.name() << "  " << to_string(spec.category()) << "  lines=" << spec.line_count()
        << "  body_length=" << spec.body_length();
    if (spec.stanza_break()) out << "  stanza_break=" << *spec.stanza_break();
    out << '\n';
  }
  return 0;
}

int cmd_preprocess(const Options& o, std::ostream& out, std::ostream& err) {
  auto samples = load_raw_corpus(o.corpus);
  if (samples.empty()) throw ValidationError("corpus '" + o.corpus + "' has no samples");
  std::optional<FormRegistry> registry;
  if (!o.forms.empty()) {
    registry = load_registry(o.forms);
    const auto filled = fill_stanza_breaks(samples, *registry);
    if (filled > 0) err << "note: took stanza breaks from the registry for " << filled << " samples\n";
    for (const auto& s : samples) serialize(s, *registry, true);
  }
  const bool label = kOnOff.at(o.stanza_label);
  const auto vocab = Vocabulary::build(samples, o.min_freq);
  const auto stream = encode_corpus(samples, vocab, label);
  vocab.save(o.vocab);
  write_encoded_corpus(o.out, stream, vocab.hash());
  out << "samples: " << samples.size() << "\nvocabulary: " << vocab.size() << " tokens ("
      << vocab.characters().size() << " characters)\ntokens: " << stream.ids.size()
      << "\nvocab hash: " << std::hex << std::setw(16) << std::setfill('0') << vocab.hash() << std::dec << '\n';
  return 0;
}

int cmd_train(const Options& o, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  const auto corpus = read_encoded_corpus(o.corpus);
  const auto vocab = Vocabulary::load(o.vocab);
  if (corpus.vocab_hash != vocab.hash()) {
    throw ValidationError("vocabulary hash mismatch: corpus '" + o.corpus + "' was not encoded with '" + o.vocab + "'");
  }
  TrainConfig tc;
  tc.mode = lm::parse_loss_mode(o.mode);
  tc.steps = o.steps;
  tc.batch_size = o.batch_size;
  tc.learning_rate = o.lr;
  tc.seed = o.seed;
  tc.warmup_steps = o.warmup_steps;
  tc.weight_decay = o.weight_decay;
  tc.grad_clip_norm = o.grad_clip;
  tc.checkpoint_every = o.checkpoint_every;
  tc.report_every = o.report_every;
  tc.validate();

  std::optional<lm::Checkpoint> start;
  if (!o.checkpoint.empty()) {
    start.emplace(lm::load_checkpoint(o.checkpoint));
    if (start->vocab_hash != vocab.hash()) {
      throw ValidationError("vocabulary hash mismatch: checkpoint '" + o.checkpoint + "' was trained with another vocabulary");
    }
    for (const char* flag : {"--layers", "--heads", "--embed-dim", "--ff-dim", "--max-seq-len", "--dropout"}) {
      if (sub.count(flag) > 0) throw ValidationError(std::string(flag) + " cannot change a resumed model");
    }
  } else {
    lm::ModelConfig mc;
    mc.layers = o.layers;
    mc.heads = o.heads;
    mc.embed_dim = o.embed_dim;
    mc.ff_dim = o.ff_dim;
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.max_seq_len = o.max_seq_len;
    mc.dropout_rate = o.dropout;
    mc.tie_embeddings = o.tie_embeddings;
    mc.validate();
    start.emplace(initial_checkpoint(mc, vocab.hash(), o.seed));
  }
  const BatchSchedule schedule(corpus.stream, tc.batch_size, start->config.max_seq_len, tc.seed);
  if (schedule.truncated_samples() > 0) {
    err << "warning: " << schedule.truncated_samples() << " samples exceed max_seq_len "
        << start->config.max_seq_len << " and will be truncated\n";
  }
  TrainHooks hooks;
  hooks.run_dir = o.out;
  hooks.on_report = [&out](const TrainReportRow& row) {
    out << "step " << row.step << "  loss " << row.loss << "  lr " << row.learning_rate << '\n';
  };
  const auto result = train(*start, corpus.stream, corpus.vocab_hash, tc, hooks);
  out << "final checkpoint: " << (std::filesystem::path(o.out) / "final.pmc").string() << " (step "
      << result.final.step << ")\n";
  return 0;
}

int cmd_generate(const Options& o, std::ostream& out) {
  const auto ckpt = lm::load_checkpoint(o.checkpoint);
  const auto vocab = Vocabulary::load(o.vocab);
  if (ckpt.vocab_hash != vocab.hash()) {
    throw ValidationError("vocabulary hash mismatch: checkpoint '" + o.checkpoint + "' does not use '" + o.vocab + "'");
  }
  if (!o.forms.empty()) load_registry(o.forms).at(o.form);
  GenerationParams gen;
  gen.top_k = o.top_k;
  gen.seed = o.seed;
  gen.count = o.count;
  const auto prompt_len = build_prompt(o.form, o.title, vocab).size();
  gen.max_new_tokens =
      o.max_new_tokens > 0 ? o.max_new_tokens : ckpt.config.max_seq_len - static_cast<int>(prompt_len);
  const auto results = generate_many(ckpt.params, vocab, o.form, o.title, gen);
  if (o.out.empty()) {
    for (const auto& r : results) out << to_json_line(r) << '\n';
  } else {
    write_generation_results(o.out, results);
  }
  return 0;
}

void print_report(const CorrectRateReport& report, std::ostream& out) {
  out << std::left << std::setw(20) << "form" << std::right << std::setw(8) << "length" << std::setw(8) << "n"
      << std::setw(8) << "correct" << std::setw(9) << "rate" << '\n';
  for (const auto& r : report.rows) {
    out << std::left << std::setw(20) << r.form << std::right << std::setw(8) << r.body_length << std::setw(8)
        << r.generated << std::setw(8) << r.correct << std::setw(8) << std::fixed << std::setprecision(1)
        << 100.0 * r.rate << "%\n";
  }
  out.unsetf(std::ios::floatfield);
}

int cmd_eval_form(const Options& o, std::ostream& out, std::ostream& err) {
  const auto registry = load_registry(o.forms);
  const auto results = read_generation_results(o.in_file);
  CheckOptions check;
  check.ignore_stanza_break = !kOnOff.at(o.stanza_label);
  const auto report = correct_rate(results, registry, o.label, check);
  write_text(o.report, report.to_csv());
  if (!o.out.empty()) write_text(o.out, report.to_json() + "\n");
  print_report(report, out);
  for (const auto& w : report.warnings) err << "warning: " << w << '\n';
  return 0;
}

CorrectRateReport read_report(const std::string& path) {
  const auto text = read_text(path);
  if (path.ends_with(".csv")) return CorrectRateReport::from_csv(text, path);
  return CorrectRateReport::from_json(text);
}

int cmd_compare(const Options& o, std::ostream& out) {
  if (o.in_files.size() != 2) throw ValidationError("compare needs exactly two --in reports");
  const auto a = read_report(o.in_files[0]);
  const auto b = read_report(o.in_files[1]);
  const auto cmp = ab_compare(a, b);
  const std::string csv = cmp.to_csv();
  if (!o.out.empty()) write_text(o.out, csv);
  out << csv << "improved " << cmp.improved << ", worsened " << cmp.worsened << ", unchanged " << cmp.unchanged
      << '\n';
  for (const auto& w : cmp.warnings) out << "warning: " << w << '\n';
  return 0;
}

int cmd_coverage(const Options& o, std::ostream& out) {
  const auto samples = load_raw_corpus(o.corpus);
  if (samples.empty()) throw ValidationError("corpus '" + o.corpus + "' has no samples");
  const auto report = coverage_report(samples);
  const auto k = report.rank_for(o.target_coverage);
  out << "forms: " << report.counts.size() << "  samples: " << report.total << '\n';
  out << "K(" << o.target_coverage << ") = " << k << '\n';
  out << "rank,form,count,cumulative\n";
  for (std::size_t r = 0; r < report.counts.size(); ++r) {
    out << r + 1 << ',' << report.counts[r].first << ',' << report.counts[r].second << ',' << report.cumulative[r]
        << '\n';
  }
  if (!o.out.empty()) {
    nlohmann::json j = {{"total", report.total}, {"target", o.target_coverage}, {"k", k}, {"ranks", nlohmann::json::array()}};
    for (std::size_t r = 0; r < report.counts.size(); ++r) {
      j["ranks"].push_back({{"form", report.counts[r].first},
                            {"count", report.counts[r].second},
                            {"cumulative", report.cumulative[r]}});
    }
    write_text(o.out, j.dump(1) + "\n");
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Form-aware classical poem toolkit", "poemform"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Config file (TOML/INI); flags override it");

  auto positive = CLI::PositiveNumber;

  auto* forms_validate = app.add_subcommand("forms-validate", "Validate a form registry file");
  forms_validate->add_option("--forms", o.forms, "Form registry (JSON Lines)")->required()->check(CLI::ExistingFile);

  auto* preprocess = app.add_subcommand("preprocess", "Normalize, serialize and encode a raw corpus");
  preprocess->add_option("--corpus", o.corpus, "Raw corpus (JSON Lines)")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--forms", o.forms, "Form registry; enables form-name validation")->check(CLI::ExistingFile);
  preprocess->add_option("--out", o.out, "Encoded corpus output (PMF1)")->required();
  preprocess->add_option("--vocab", o.vocab, "Vocabulary output (JSON)")->required();
  preprocess->add_option("--min-freq", o.min_freq, "Minimum character frequency")->capture_default_str()->check(positive);
  preprocess->add_option("--stanza-label", o.stanza_label, "Emit '&' at stanza breaks")
      ->capture_default_str()->check(CLI::IsMember({"on", "off"}));

  auto* train_cmd = app.add_subcommand("train", "Train a model on an encoded corpus");
  train_cmd->add_option("--corpus", o.corpus, "Encoded corpus (PMF1)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--vocab", o.vocab, "Vocabulary (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", o.out, "Run directory")->required();
  train_cmd->add_option("--checkpoint", o.checkpoint, "Resume from this checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--mode", o.mode, "Loss weighting")->capture_default_str()->check(CLI::IsMember({"basic", "enhanced"}));
  train_cmd->add_option("--steps", o.steps, "Total optimizer steps")->capture_default_str()->check(positive);
  train_cmd->add_option("--batch-size", o.batch_size, "Samples per batch")->capture_default_str()->check(positive);
  train_cmd->add_option("--lr", o.lr, "Peak learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--seed", o.seed, "Seed for initialization, shuffling and dropout")->capture_default_str();
  train_cmd->add_option("--layers", o.layers, "Transformer blocks")->capture_default_str()->check(positive);
  train_cmd->add_option("--heads", o.heads, "Attention heads")->capture_default_str()->check(positive);
  train_cmd->add_option("--embed-dim", o.embed_dim, "Embedding width")->capture_default_str()->check(positive);
  train_cmd->add_option("--ff-dim", o.ff_dim, "Feed-forward width")->capture_default_str()->check(positive);
  train_cmd->add_option("--max-seq-len", o.max_seq_len, "Longest sequence")->capture_default_str()->check(CLI::Range(2, 1 << 16));
  train_cmd->add_option("--dropout", o.dropout, "Dropout rate during training")->capture_default_str()->check(CLI::Range(0.0, 0.99));
  train_cmd->add_flag("--tie-embeddings", o.tie_embeddings, "Share input and output embeddings");
  train_cmd->add_option("--warmup-steps", o.warmup_steps, "Linear warmup steps")->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--weight-decay", o.weight_decay, "Decoupled weight decay")->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--grad-clip", o.grad_clip, "Global gradient norm clip")->capture_default_str()->check(positive);
  train_cmd->add_option("--checkpoint-every", o.checkpoint_every, "Checkpoint period in steps (0 = off)")->capture_default_str()->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--report-every", o.report_every, "Report period in steps")->capture_default_str()->check(positive);

  auto* generate_cmd = app.add_subcommand("generate", "Sample poems from a checkpoint");
  generate_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint (PMC1)")->required()->check(CLI::ExistingFile);
  generate_cmd->add_option("--vocab", o.vocab, "Vocabulary (JSON)")->required()->check(CLI::ExistingFile);
  generate_cmd->add_option("--forms", o.forms, "Form registry; rejects unknown --form")->check(CLI::ExistingFile);
  generate_cmd->add_option("--form", o.form, "Form name")->required();
  generate_cmd->add_option("--title", o.title, "Title (may be empty)");
  generate_cmd->add_option("--count", o.count, "Number of poems")->capture_default_str()->check(CLI::NonNegativeNumber);
  generate_cmd->add_option("--top-k", o.top_k, "Top-k sampling")->capture_default_str()->check(positive);
  generate_cmd->add_option("--max-new-tokens", o.max_new_tokens, "Token budget (default: fill max_seq_len)")->check(positive);
  generate_cmd->add_option("--seed", o.seed, "Sampling seed")->capture_default_str();
  generate_cmd->add_option("--out", o.out, "Output JSON Lines (default stdout)");

  auto* eval_cmd = app.add_subcommand("eval-form", "Correct-rate-in-form report for generated poems");
  eval_cmd->add_option("--in", o.in_file, "Generated poems (JSON Lines)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--forms", o.forms, "Form registry")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--report", o.report, "CSV report output")->required();
  eval_cmd->add_option("--out", o.out, "JSON report output");
  eval_cmd->add_option("--label", o.label, "Label stored in the JSON report");
  eval_cmd->add_option("--stanza-label", o.stanza_label, "off: ignore stanza breaks when checking")
      ->capture_default_str()->check(CLI::IsMember({"on", "off"}));

  auto* compare_cmd = app.add_subcommand("compare", "Per-form rate deltas between two reports");
  compare_cmd->add_option("--in", o.in_files, "Two reports (JSON or CSV): baseline, then candidate")
      ->required()->expected(2)->check(CLI::ExistingFile);
  compare_cmd->add_option("--out", o.out, "CSV output");

  auto* coverage_cmd = app.add_subcommand("coverage", "Form frequency and top-K coverage of a raw corpus");
  coverage_cmd->add_option("--corpus", o.corpus, "Raw corpus (JSON Lines)")->required()->check(CLI::ExistingFile);
  coverage_cmd->add_option("--target-coverage", o.target_coverage, "Coverage target for K")
      ->capture_default_str()->check(CLI::Range(0.0, 1.0));
  coverage_cmd->add_option("--out", o.out, "JSON output");

  // --config is a top-level option; hoist it so it may also follow the subcommand.
  std::vector<std::string> ordered;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      ordered.push_back(args[i]);
      ordered.push_back(args[++i]);
    } else if (args[i].starts_with("--config=")) {
      ordered.push_back(args[i]);
    } else {
      rest.push_back(args[i]);
    }
  }
  ordered.insert(ordered.end(), rest.begin(), rest.end());
  std::vector<std::string> reversed(ordered.rbegin(), ordered.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (forms_validate->parsed()) return cmd_forms_validate(o, out);
    if (preprocess->parsed()) return cmd_preprocess(o, out, err);
    if (train_cmd->parsed()) return cmd_train(o, *train_cmd, out, err);
    if (generate_cmd->parsed()) return cmd_generate(o, out);
    if (eval_cmd->parsed()) return cmd_eval_form(o, out, err);
    if (compare_cmd->parsed()) return cmd_compare(o, out);
    if (coverage_cmd->parsed()) return cmd_coverage(o, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace poemform::cli
