#include "medthink/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "medthink/errors.hpp"

namespace medthink {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!value.empty() && value[0] == '-') throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + value + "'");
  }
  in >> out;
  if (!in || !in.eof()) throw ConfigError("config key '" + key + "': malformed value '" + value + "'");
  return out;
}

std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ContractError("learning_rate must be > 0, got " + format_double(learning_rate));
  if (!(stage2_learning_rate > 0.0) || !std::isfinite(stage2_learning_rate))
    throw ContractError("stage2_learning_rate must be > 0");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ContractError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ContractError("adam_eps must be > 0");
  if (clip_norm < 0.0) throw ContractError("clip_norm must be >= 0");
}

std::size_t epoch_preset(const std::string& dataset) {
  if (dataset == "R-SLAKE") return 300;
  if (dataset == "R-RAD") return 150;
  if (dataset == "R-Path" || dataset == "R-PathVQA") return 50;
  throw ConfigError("no epoch preset for dataset '" + dataset + "' (expected R-RAD, R-SLAKE or R-Path)");
}

void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "learning_rate") c.learning_rate = parse_number<double>(key, value);
  else if (key == "epochs") c.epochs = parse_number<std::size_t>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "stage2_learning_rate") c.stage2_learning_rate = parse_number<double>(key, value);
  else if (key == "stage2_epochs") c.stage2_epochs = parse_number<std::size_t>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "beta1") c.beta1 = parse_number<double>(key, value);
  else if (key == "beta2") c.beta2 = parse_number<double>(key, value);
  else if (key == "adam_eps") c.adam_eps = parse_number<double>(key, value);
  else if (key == "clip_norm") c.clip_norm = parse_number<double>(key, value);
  else if (key == "checkpoint") c.checkpoint = value;
  else if (key == "epoch_preset") c.epochs = epoch_preset(value);
  else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig read_train_config(std::istream& in, TrainConfig base) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    apply_config_entry(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open config file " + path.string());
  return read_train_config(in, std::move(base));
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "learning_rate = " << format_double(c.learning_rate) << '\n'
      << "epochs = " << c.epochs << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "stage2_learning_rate = " << format_double(c.stage2_learning_rate) << '\n'
      << "stage2_epochs = " << c.stage2_epochs << '\n'
      << "seed = " << c.seed << '\n'
      << "beta1 = " << format_double(c.beta1) << '\n'
      << "beta2 = " << format_double(c.beta2) << '\n'
      << "adam_eps = " << format_double(c.adam_eps) << '\n'
      << "clip_norm = " << format_double(c.clip_norm) << '\n'
      << "checkpoint = " << c.checkpoint << '\n';
  return out.str();
}

TrainConfig stage2_config(const TrainConfig& c) {
  TrainConfig s = c;
  s.learning_rate = c.stage2_learning_rate;
  s.epochs = c.stage2_epochs;
  return s;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(const MedThinkModel& model, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (std::size_t i = 0; i < model.tensor_count(); ++i) {
    m_.emplace_back(model.param(i).shape(), 0.0);
    v_.emplace_back(model.param(i).shape(), 0.0);
    names_.push_back(model.param_name(i));
  }
}

void Adam::step(MedThinkModel& model) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    Tensor& p = model.param(i);
    if (!p.has_grad()) continue;
    const auto g = std::as_const(p).grad();
    auto& w = p.storage();
    auto& m = m_[i].storage();
    auto& v = v_[i].storage();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void Adam::save(TensorArchive& archive) const {
  archive.meta.emplace_back("adam.steps", std::to_string(steps_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    archive.tensors.emplace_back("adam.m." + names_[i], m_[i]);
    archive.tensors.emplace_back("adam.v." + names_[i], v_[i]);
  }
}

void Adam::load(const TensorArchive& archive) {
  const std::string* steps = archive.find_meta("adam.steps");
  if (!steps) throw CheckpointError("trainer state is missing adam.steps");
  steps_ = std::stoull(*steps);
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const Tensor* m = archive.find("adam.m." + names_[i]);
    const Tensor* v = archive.find("adam.v." + names_[i]);
    if (!m || !v || m->shape() != m_[i].shape() || v->shape() != v_[i].shape())
      throw CheckpointError("trainer state has missing or misshapen moments for '" + names_[i] + "'");
    m_[i] = *m;
    v_[i] = *v;
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

BatchLoss batch_loss(MedThinkModel& model, std::span<const Example> examples, std::span<const std::size_t> indices,
                     bool with_grad) {
  if (indices.empty()) throw ContractError("batch_loss: empty batch");
  BatchLoss total;
  std::vector<std::size_t> counts;
  counts.reserve(indices.size());
  for (std::size_t i : indices) {
    const Example& ex = examples[i];
    std::size_t n = ex.target.size() - 1;
    for (std::size_t k = 1; k < ex.target.size(); ++k)
      if (ex.target[k] == Vocab::kPad) --n;
    counts.push_back(n);
    total.count += n;
  }
  if (total.count == 0) throw DegenerateBatchError("batch has no non-pad target positions");
  if (with_grad) model.zero_grad();
  Tape tape(with_grad);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const Example& ex = examples[indices[j]];
    tape.reset();
    const auto b = model.bind(tape);
    const NllResult r = model.sequence_loss(b, ex.input, *ex.image, ex.target);
    total.sum_loss += r.sum_loss;
    if (with_grad) {
      tape.backward(r.mean, static_cast<double>(r.count) / static_cast<double>(total.count));
      b.accumulate_into(model);
    }
  }
  return total;
}

Trainer::Trainer(MedThinkModel& model, std::vector<Example> examples, const TrainConfig& config)
    : model_(&model),
      examples_(std::move(examples)),
      config_(config),
      adam_(model, config.learning_rate, config.beta1, config.beta2, config.adam_eps) {
  config_.validate();
  if (examples_.empty()) throw ContractError("training set is empty");
}

BatchLoss Trainer::step(std::span<const std::size_t> indices) {
  BatchLoss loss = batch_loss(*model_, examples_, indices, true);
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < model_->tensor_count(); ++i)
      if (model_->param(i).has_grad())
        for (double g : std::as_const(model_->param(i)).grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) {
      const double f = config_.clip_norm / norm;
      for (std::size_t i = 0; i < model_->tensor_count(); ++i)
        if (model_->param(i).has_grad())
          for (double& g : model_->param(i).grad()) g *= f;
    }
  }
  adam_.step(*model_);
  return loss;
}

std::vector<std::size_t> Trainer::permutation(std::size_t epoch) const {
  std::vector<std::size_t> order(examples_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit bound so the order does not depend on the
  // standard library's distribution implementation.
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

double Trainer::run_epoch() {
  const auto order = permutation(epoch_);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t n = std::min(config_.batch_size, order.size() - start);
    const BatchLoss loss = step(std::span(order).subspan(start, n));
    sum += loss.sum_loss;
    count += loss.count;
  }
  ++epoch_;
  const double mean = sum / static_cast<double>(count);
  if (!std::isfinite(mean)) throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch_));
  return mean;
}

void Trainer::save_state(const std::filesystem::path& path) const {
  TensorArchive archive = model_->to_archive();
  archive.meta.emplace_back("trainer.epoch", std::to_string(epoch_));
  archive.meta.emplace_back("trainer.seed", std::to_string(config_.seed));
  adam_.save(archive);
  save_archive(path, archive);
}

void Trainer::load_state(const std::filesystem::path& path) {
  const TensorArchive archive = load_archive(path);
  MedThinkModel restored = MedThinkModel::from_archive(archive);
  if (!(restored.config() == model_->config()))
    throw CheckpointError("trainer state was saved for a different model configuration");
  const std::string* epoch = archive.find_meta("trainer.epoch");
  if (!epoch) throw CheckpointError("trainer state is missing trainer.epoch");
  adam_.load(archive);
  *model_ = std::move(restored);
  epoch_ = std::stoull(*epoch);
}

namespace {

TrainReport run(MedThinkModel& model, const Vocab& vocab, std::vector<Example> examples, const TrainConfig& config,
                const EpochCallback& on_epoch) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.seed = config.seed;
  report.learning_rate = config.learning_rate;
  report.config = config;
  Trainer trainer(model, std::move(examples), config);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double loss = trainer.run_epoch();
    report.epoch_losses.push_back(loss);
    if (on_epoch) on_epoch(e + 1, loss);
  }
  if (!config.checkpoint.empty()) {
    save_checkpoint(config.checkpoint, model, vocab);
    report.checkpoint_path = config.checkpoint;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void check_dataset(const MedThinkModel& model, const Vocab& vocab, const std::vector<VqaSample>& dataset) {
  if (dataset.empty()) throw ContractError("training dataset is empty");
  if (model.config().vocab_size != vocab.size())
    throw CheckpointError("model vocabulary size " + std::to_string(model.config().vocab_size) +
                          " does not match tokenizer size " + std::to_string(vocab.size()));
}

}  // namespace

TrainReport fit(MedThinkModel& model, const Vocab& vocab, const std::vector<VqaSample>& dataset, Strategy strategy,
                const TrainConfig& config, const EpochCallback& on_epoch) {
  if (strategy == Strategy::kTwoStageReasoning)
    throw ContractError("fit: two-stage reasoning is trained with fit_two_stage");
  config.validate();
  check_dataset(model, vocab, dataset);
  auto examples = build_examples(dataset, strategy, Stage::kSingle, vocab, model.config().n_max);
  return run(model, vocab, std::move(examples), config, on_epoch);
}

std::pair<TrainReport, TrainReport> fit_two_stage(MedThinkModel& stage1, MedThinkModel& stage2, const Vocab& vocab,
                                                  const std::vector<VqaSample>& dataset,
                                                  const TrainConfig& stage1_config,
                                                  const TrainConfig& stage2_config, const EpochCallback& on_epoch) {
  if (&stage1 == &stage2) throw ContractError("fit_two_stage: stage models must be distinct");
  stage1_config.validate();
  stage2_config.validate();
  check_dataset(stage1, vocab, dataset);
  check_dataset(stage2, vocab, dataset);
  auto ex1 = build_examples(dataset, Strategy::kTwoStageReasoning, Stage::kRationale, vocab, stage1.config().n_max);
  auto ex2 = build_examples(dataset, Strategy::kTwoStageReasoning, Stage::kAnswer, vocab, stage2.config().n_max);
  TrainReport r1 = run(stage1, vocab, std::move(ex1), stage1_config, on_epoch);
  TrainReport r2 = run(stage2, vocab, std::move(ex2), stage2_config, on_epoch);
  return {std::move(r1), std::move(r2)};
}

}  // namespace medthink
