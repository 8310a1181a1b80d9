#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "medthink/annotate.hpp"
#include "medthink/annotate_json.hpp"
#include "medthink/errors.hpp"
#include "medthink/evalmetrics.hpp"
#include "medthink/service.hpp"
#include "medthink/training.hpp"

namespace medthink::cli {

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string strategy = "explanation";
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::vector<std::string> manifests;
  std::string checkpoint;
  std::string out;
  int port = 8080;
  std::string generator_url;
  bool generator_mock = false;

  // Subcommand flags.
  std::size_t n_items = 1250;
  double open_fraction = 0.0;
  std::string dataset_name = "dataset";
  std::size_t max_len = 0;
  std::string kv;
  std::string id;
  std::string question;
  std::string host = "127.0.0.1";
  std::string log;
  std::string mode = "strict";
  std::string generator_model = "default";
};

std::string quote(const std::string& s) {
  if (!s.empty() && s.find_first_of(" \t\"'\\$") == std::string::npos) return s;
  std::ostringstream q;
  q << std::quoted(s, '\'', '\\');
  return q.str();
}

std::string num(double v) {
  char buf[32];
  return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}

class Echo {
 public:
  explicit Echo(const std::string& command) : line_("config: medthink " + command) {}
  Echo& flag(const std::string& name, const std::string& value) {
    line_ += " --" + name + " " + quote(value);
    return *this;
  }
  Echo& flag(const std::string& name) {
    line_ += " --" + name;
    return *this;
  }
  void print(std::ostream& err) const { err << line_ << '\n'; }

 private:
  std::string line_;
};

const std::string& single_manifest(const Options& o) {
  if (o.manifests.size() != 1) throw ContractError("this command takes exactly one --manifest");
  return o.manifests.front();
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ContractError(std::string("missing required flag --") + flag);
}

std::vector<VqaSample> split_of(const std::vector<VqaSample>& samples, Split split) {
  std::vector<VqaSample> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(s);
  return out;
}

std::string stage_path(const std::string& checkpoint, int stage) {
  return checkpoint + ".stage" + std::to_string(stage);
}

std::unique_ptr<GeneratorClient> make_client(const Options& o, std::uint64_t seed) {
  if (!o.generator_url.empty() && o.generator_mock)
    throw ContractError("--generator-url and --generator-mock are mutually exclusive");
  if (!o.generator_url.empty()) {
    HttpGeneratorOptions h;
    h.url = o.generator_url;
    h.model = o.generator_model;
    if (const char* token = std::getenv(kGeneratorTokenEnv)) h.token = token;
    return std::make_unique<HttpGenerator>(h);
  }
  if (o.generator_mock) return std::make_unique<MockGenerator>(seed);
  return nullptr;
}

void add_generator_echo(Echo& echo, const Options& o, std::uint64_t seed) {
  if (!o.generator_url.empty()) echo.flag("generator-url", o.generator_url).flag("generator-model", o.generator_model);
  if (o.generator_mock) echo.flag("generator-mock").flag("seed", std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_synth(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.out, "out");
  const std::uint64_t seed = o.seed.value_or(0);
  Echo("synth")
      .flag("seed", std::to_string(seed))
      .flag("n-items", std::to_string(o.n_items))
      .flag("open-fraction", num(o.open_fraction))
      .flag("out", o.out)
      .print(err);
  SynthOptions so;
  so.open_fraction = o.open_fraction;
  const auto samples = synth_generate(seed, o.n_items, {}, so);
  save_manifest(o.out, samples);
  out << "wrote " << samples.size() << " items to " << o.out << '\n';
  return kOk;
}

int cmd_stats(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.manifests.empty()) throw ContractError("missing required flag --manifest");
  Echo echo("stats");
  for (const auto& m : o.manifests) echo.flag("manifest", m);
  echo.flag("dataset-name", o.dataset_name).print(err);
  std::vector<VqaSample> all;
  for (const auto& m : o.manifests) {
    auto part = load_manifest(m);
    all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  out << format_stats_table(dataset_stats(all, o.dataset_name));
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const std::string& manifest = single_manifest(o);
  require(o.checkpoint, "checkpoint");
  const Strategy strategy = parse_strategy(o.strategy);
  TrainConfig tc = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
  if (o.seed) tc.seed = *o.seed;
  if (o.epochs) tc.epochs = *o.epochs;
  if (o.lr) tc.learning_rate = *o.lr;
  if (o.batch_size) tc.batch_size = *o.batch_size;
  tc.validate();

  Echo echo("train");
  echo.flag("manifest", manifest).flag("strategy", strategy_name(strategy));
  if (!o.config.empty()) echo.flag("config", o.config);
  echo.flag("seed", std::to_string(tc.seed))
      .flag("epochs", std::to_string(tc.epochs))
      .flag("lr", num(tc.learning_rate))
      .flag("batch-size", std::to_string(tc.batch_size))
      .flag("checkpoint", o.checkpoint)
      .print(err);

  const auto train = split_of(load_manifest(manifest), Split::kTrain);
  if (train.empty()) throw DatasetError("manifest '" + manifest + "' has no training items");
  const Vocab vocab = build_vocab(train);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.seed = tc.seed;
  out << "strategy: " << strategy_label(strategy) << '\n';
  out << "train items: " << train.size() << ", vocabulary: " << vocab.size() << '\n';
  const auto report_epoch = [&](std::size_t epoch, double loss) {
    out << "epoch " << epoch << " loss " << std::setprecision(6) << std::fixed << loss << std::defaultfloat << '\n';
  };

  if (strategy == Strategy::kTwoStageReasoning) {
    MedThinkModel stage1(mc);
    ModelConfig mc2 = mc;
    mc2.seed = tc.seed + 1;
    MedThinkModel stage2(mc2);
    TrainConfig c1 = tc, c2 = stage2_config(tc);
    c1.checkpoint = stage_path(o.checkpoint, 1);
    c2.checkpoint = stage_path(o.checkpoint, 2);
    out << "stage 1: lr " << num(c1.learning_rate) << ", epochs " << c1.epochs << '\n';
    out << "stage 2: lr " << num(c2.learning_rate) << ", epochs " << c2.epochs << '\n';
    const auto [r1, r2] = fit_two_stage(stage1, stage2, vocab, train, c1, c2, report_epoch);
    out << "saved " << r1.checkpoint_path << " and " << r2.checkpoint_path << '\n';
  } else {
    MedThinkModel model(mc);
    tc.checkpoint = o.checkpoint;
    const TrainReport r = fit(model, vocab, train, strategy, tc, report_epoch);
    out << "saved " << r.checkpoint_path << '\n';
  }
  return kOk;
}

struct Loaded {
  std::optional<Checkpoint> single, stage1, stage2;
  const Vocab& vocab() const { return single ? single->vocab : stage1->vocab; }
  std::size_t n_max() const { return single ? single->model.config().n_max : stage2->model.config().n_max; }
};

Loaded load_models(const Options& o, Strategy strategy) {
  require(o.checkpoint, "checkpoint");
  Loaded l;
  if (strategy == Strategy::kTwoStageReasoning) {
    l.stage1 = load_checkpoint(stage_path(o.checkpoint, 1));
    l.stage2 = load_checkpoint(stage_path(o.checkpoint, 2));
    if (!(l.stage1->vocab == l.stage2->vocab))
      throw CheckpointError("stage checkpoints were trained with different vocabularies");
  } else {
    l.single = load_checkpoint(o.checkpoint);
  }
  return l;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const std::string& manifest = single_manifest(o);
  const Strategy strategy = parse_strategy(o.strategy);
  const Loaded models = load_models(o, strategy);
  const std::size_t max_len = o.max_len ? o.max_len : models.n_max();
  Echo echo("eval");
  echo.flag("manifest", manifest)
      .flag("strategy", strategy_name(strategy))
      .flag("checkpoint", o.checkpoint)
      .flag("max-len", std::to_string(max_len));
  if (!o.kv.empty()) echo.flag("kv", o.kv);
  echo.print(err);

  const auto all = load_manifest(manifest);
  const auto test = split_of(all, Split::kTest);
  if (test.empty()) throw DatasetError("manifest '" + manifest + "' has no test items");
  const auto outputs =
      strategy == Strategy::kTwoStageReasoning
          ? predict_two_stage(models.stage1->model, models.stage2->model, models.vocab(), test, max_len)
          : predict(models.single->model, models.vocab(), strategy, test, max_len);
  EvalReport report = evaluate(outputs, test, strategy);
  report.item_count["train"] = all.size() - test.size();
  out << format_eval_table(report);
  if (!o.kv.empty()) {
    std::ofstream kv(o.kv);
    if (!kv) throw NotFoundError("cannot write '" + o.kv + "'");
    kv << format_eval_kv(report);
  }
  return kOk;
}

int cmd_generate(const Options& o, std::ostream& out, std::ostream& err) {
  const std::string& manifest = single_manifest(o);
  require(o.id, "id");
  const Strategy strategy = parse_strategy(o.strategy);
  const Loaded models = load_models(o, strategy);
  const std::size_t max_len = o.max_len ? o.max_len : models.n_max();
  Echo echo("generate");
  echo.flag("manifest", manifest)
      .flag("id", o.id)
      .flag("strategy", strategy_name(strategy))
      .flag("checkpoint", o.checkpoint)
      .flag("max-len", std::to_string(max_len));
  if (!o.question.empty()) echo.flag("question", o.question);
  echo.print(err);

  const auto all = load_manifest(manifest);
  const auto it = std::find_if(all.begin(), all.end(), [&](const VqaSample& s) { return s.id == o.id; });
  if (it == all.end()) throw NotFoundError("no item '" + o.id + "' in " + manifest);
  const std::string question = o.question.empty() ? it->question : o.question;
  out << "question: " << question << '\n';
  GenerationOutput g;
  if (strategy == Strategy::kTwoStageReasoning) {
    const TwoStageOutput t =
        two_stage_generate(models.stage1->model, models.stage2->model, models.vocab(), question, it->image, max_len);
    out << "stage 2 input: " << t.stage2_input.text << '\n';
    g = t.result;
  } else {
    g = generate(models.single->model, models.vocab(), strategy, question, it->image, max_len);
  }
  out << "answer: " << g.answer << '\n';
  if (g.rationale) out << "rationale: " << *g.rationale << '\n';
  out << "raw: " << g.raw << '\n';
  if (!g.parse_ok) out << "parse: failed\n";
  return kOk;
}

int cmd_annotate_clean(const Options& o, std::ostream& out, std::ostream& err) {
  const std::string& manifest = single_manifest(o);
  const std::uint64_t seed = o.seed.value_or(0);
  Echo echo("annotate-clean");
  echo.flag("manifest", manifest);
  add_generator_echo(echo, o, seed);
  if (!o.out.empty()) echo.flag("out", o.out);
  echo.print(err);

  const auto client = make_client(o, seed);
  const CleaningReport report =
      detect_inconsistencies(group_by_image(load_manifest(manifest)), default_antonym_rules(), client.get());
  for (const auto& c : report.conflicts) {
    std::string reasons;
    for (const auto& r : c.reasons) reasons += (reasons.empty() ? "" : ",") + r;
    out << "conflict " << c.first_id << " " << c.second_id << " [" << reasons << "]: \"" << c.first_question
        << "\" -> " << c.first_answer << " | \"" << c.second_question << "\" -> " << c.second_answer << '\n';
  }
  if (report.degraded) out << "degraded: heuristics only (" << report.degraded_reason << ")\n";
  out << report.conflicts.size() << " conflicts\n";
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw NotFoundError("cannot write '" + o.out + "'");
    f << to_json(report).dump(2) << '\n';
  }
  return kOk;
}

int cmd_serve(const Options& o, std::ostream& out, std::ostream& err) {
  const std::string& manifest = single_manifest(o);
  const std::uint64_t seed = o.seed.value_or(0);
  Echo echo("serve");
  echo.flag("manifest", manifest).flag("host", o.host).flag("port", std::to_string(o.port));
  if (!o.log.empty()) echo.flag("log", o.log);
  if (!o.out.empty()) echo.flag("out", o.out);
  add_generator_echo(echo, o, seed);
  echo.print(err);

  const auto client = make_client(o, seed);
  if (!client) throw ContractError("serve needs --generator-url or --generator-mock");
  AnnotationStore store(load_manifest(manifest), o.log);
  ServiceOptions so;
  so.export_path = o.out;
  AnnotationService service(store, *client, so);
  const int port = service.bind(o.host, o.port);
  out << "listening on http://" << o.host << ":" << port << std::endl;
  service.listen();
  return kOk;
}

int cmd_export(const Options& o, std::ostream& out, std::ostream& err) {
  const std::string& manifest = single_manifest(o);
  require(o.log, "log");
  require(o.out, "out");
  const ExportMode mode = parse_export_mode(o.mode);
  Echo("export").flag("manifest", manifest).flag("log", o.log).flag("mode", o.mode).flag("out", o.out).print(err);
  if (!std::filesystem::exists(o.log)) throw NotFoundError("event log '" + o.log + "' does not exist");
  const AnnotationStore store(load_manifest(manifest), o.log);
  const ExportResult r = store.export_manifest(mode);
  save_manifest(o.out, r.samples);
  out << "exported " << r.samples.size() << " items to " << o.out << '\n';
  for (const auto& id : r.skipped) out << "skipped " << id << '\n';
  return kOk;
}

int exit_code(const Error& e) {
  const std::string& k = e.kind();
  if (k == "contract") return kUsage;
  if (k == "not_found") return kNotFound;
  if (k == "config") return kConfig;
  if (k == "divergence") return kDivergence;
  if (k == "checkpoint") return kCheckpoint;
  if (k == "conflict" || k == "export") return kConflict;
  if (k == "transport") return kTransport;
  if (k == "parse" || k == "dataset" || k == "integrity" || k == "vocabulary" || k == "length" || k == "geometry")
    return kData;
  return kFailure;
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"MedThink: multimodal VQA with rationale generation and annotation.", "medthink"};
  app.fallthrough();
  app.require_subcommand(1);
  app.get_formatter()->column_width(34);

  app.add_option("--config", o.config, "Training config file (key = value lines)")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Random seed");
  app.add_option("--strategy", o.strategy, "none, explanation, reasoning or two-stage")->capture_default_str();
  app.add_option("--epochs", o.epochs, "Training epochs")->check(CLI::PositiveNumber);
  app.add_option("--lr", o.lr, "Learning rate")->check(CLI::PositiveNumber);
  app.add_option("--batch-size", o.batch_size, "Batch size")->check(CLI::PositiveNumber);
  app.add_option("--manifest", o.manifests, "Manifest file (JSON lines); stats accepts several");
  app.add_option("--checkpoint", o.checkpoint, "Checkpoint path (two-stage uses PATH.stage1 and PATH.stage2)");
  app.add_option("--out", o.out, "Output file");
  app.add_option("--port", o.port, "Service port (0 picks a free port)")->capture_default_str()->check(CLI::Range(0, 65535));
  app.add_option("--generator-url", o.generator_url,
                 std::string("Chat-completions endpoint; token read from ") + kGeneratorTokenEnv);
  app.add_flag("--generator-mock", o.generator_mock, "Use the offline mock generator");

  auto* synth = app.add_subcommand("synth", "Write a synthetic manifest");
  synth->add_option("--n-items", o.n_items, "Number of items")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--open-fraction", o.open_fraction, "Fraction of open-end items")->capture_default_str()->check(CLI::Range(0.0, 1.0));

  auto* stats = app.add_subcommand("stats", "Print image and question counts per dataset");
  stats->add_option("--dataset-name", o.dataset_name, "Name for items without a dataset field")->capture_default_str();

  app.add_subcommand("train", "Train a model with a generation strategy");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--max-len", o.max_len, "Generation length cap (default: model n_max)");
  eval->add_option("--kv", o.kv, "Also write key=value metrics here");

  auto* gen = app.add_subcommand("generate", "Answer one manifest item");
  gen->add_option("--id", o.id, "Item id")->required();
  gen->add_option("--question", o.question, "Question override");
  gen->add_option("--max-len", o.max_len, "Generation length cap (default: model n_max)");

  auto* clean = app.add_subcommand("annotate-clean", "List contradictory question-answer pairs per image");
  clean->add_option("--generator-model", o.generator_model, "Model name sent to the generator")->capture_default_str();

  auto* serve = app.add_subcommand("serve", "Run the annotation HTTP service");
  serve->add_option("--host", o.host, "Bind address")->capture_default_str();
  serve->add_option("--log", o.log, "Event log (replayed on start, appended to)");
  serve->add_option("--generator-model", o.generator_model, "Model name sent to the generator")->capture_default_str();

  auto* exp = app.add_subcommand("export", "Write the annotated manifest from an event log");
  exp->add_option("--log", o.log, "Event log")->required();
  exp->add_option("--mode", o.mode, "strict or permissive")->capture_default_str()->check(CLI::IsMember({"strict", "permissive"}));

  for (auto* sub : app.get_subcommands({})) sub->footer("Global options from 'medthink --help' are accepted here too.");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << '\n';
    return kUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "synth") return cmd_synth(o, out, err);
    if (command == "stats") return cmd_stats(o, out, err);
    if (command == "train") return cmd_train(o, out, err);
    if (command == "eval") return cmd_eval(o, out, err);
    if (command == "generate") return cmd_generate(o, out, err);
    if (command == "annotate-clean") return cmd_annotate_clean(o, out, err);
    if (command == "serve") return cmd_serve(o, out, err);
    return cmd_export(o, out, err);
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << '\n';
    return kFailure;
  }
}

}  // namespace medthink::cli
