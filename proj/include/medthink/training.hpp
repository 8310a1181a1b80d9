#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "medthink/model.hpp"
#include "medthink/strategies.hpp"

namespace medthink {

struct TrainConfig {
  double learning_rate = 5e-4;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double stage2_learning_rate = 5e-5;
  std::size_t stage2_epochs = 20;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
  std::string checkpoint;  // final checkpoint path; empty skips saving

  void validate() const;  // ContractError
  bool operator==(const TrainConfig&) const = default;
};

// Dataset-named epoch presets: R-RAD 300, R-SLAKE 150, R-Path 50.
std::size_t epoch_preset(const std::string& dataset);

// key = value lines; '#' starts a comment. Keys match the TrainConfig field
// names. Unknown keys and malformed values raise ConfigError.
void apply_config_entry(TrainConfig& config, const std::string& key, const std::string& value);
TrainConfig read_train_config(std::istream& in, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
std::string format_train_config(const TrainConfig& config);

// Stage-2 settings: stage2_learning_rate for stage2_epochs.
TrainConfig stage2_config(const TrainConfig& config);

struct TrainReport {
  std::vector<double> epoch_losses;  // token-weighted mean loss per epoch
  std::string checkpoint_path;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  double learning_rate = 0.0;
  TrainConfig config;
};

class Adam {
 public:
  Adam(const MedThinkModel& model, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Applies one bias-corrected update from the model's grad slots.
  void step(MedThinkModel& model);
  std::size_t steps() const { return steps_; }
  double learning_rate() const { return lr_; }

  void save(TensorArchive& archive) const;
  void load(const TensorArchive& archive);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
  std::vector<Tensor> m_, v_;
  std::vector<std::string> names_;
};

struct BatchLoss {
  double sum_loss = 0.0;
  std::size_t count = 0;
  double mean() const { return sum_loss / static_cast<double>(count); }
};

// Teacher-forced loss of the examples at `indices`; fills the model's grad
// slots with the gradient of the token-level mean when `with_grad` is set.
BatchLoss batch_loss(MedThinkModel& model, std::span<const Example> examples, std::span<const std::size_t> indices,
                     bool with_grad);

class Trainer {
 public:
  Trainer(MedThinkModel& model, std::vector<Example> examples, const TrainConfig& config);

  // One optimizer step; returns the pre-step batch loss.
  BatchLoss step(std::span<const std::size_t> indices);
  // One pass over a seeded permutation; returns the token-weighted mean loss.
  double run_epoch();
  std::size_t epoch() const { return epoch_; }
  std::vector<std::size_t> permutation(std::size_t epoch) const;

  const MedThinkModel& model() const { return *model_; }
  const Adam& optimizer() const { return adam_; }

  // Parameters, optimizer moments, step and epoch counters.
  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  MedThinkModel* model_;
  std::vector<Example> examples_;
  TrainConfig config_;
  Adam adam_;
  std::size_t epoch_ = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

TrainReport fit(MedThinkModel& model, const Vocab& vocab, const std::vector<VqaSample>& dataset, Strategy strategy,
                const TrainConfig& config, const EpochCallback& on_epoch = {});

// Stage 1 learns (T, I) -> "Rationale: R"; stage 2 learns
// ("Question: T Rationale: R", I) -> "Answer: A" with gold rationales.
std::pair<TrainReport, TrainReport> fit_two_stage(MedThinkModel& stage1, MedThinkModel& stage2, const Vocab& vocab,
                                                  const std::vector<VqaSample>& dataset,
                                                  const TrainConfig& stage1_config,
                                                  const TrainConfig& stage2_config,
                                                  const EpochCallback& on_epoch = {});

}  // namespace medthink
