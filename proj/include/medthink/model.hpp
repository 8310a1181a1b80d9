#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "medthink/autograd.hpp"
#include "medthink/data.hpp"
#include "medthink/grad_check.hpp"
#include "medthink/tensor_io.hpp"

namespace medthink {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d = 32;
  std::size_t n_max = 32;     // longest encoder input / decoder sequence
  std::size_t m = 4;          // image patches, a perfect square
  std::size_t enc_layers = 1;
  std::size_t dec_layers = 1;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t image_height = 8;
  std::size_t image_width = 8;
  double pixel_scale = 1.0 / kMaxPixel;
  std::uint64_t seed = 0;

  std::size_t patch_grid() const;    // patches per side
  std::size_t patch_pixels() const;
  // Throws ContractError / GeometryError on an inconsistent configuration.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Intermediate values of the cross-attention + gated-fusion block.
struct FusionTrace {
  Tensor text;       // F_T      [n x d]
  Tensor image;      // F_I      [m x d]
  Tensor attention;  // weights  [n x m]
  Tensor attended;   // H_attn   [n x d]
  Tensor gate;       // lambda   [n x d]
  Tensor fused;      // F_fuse   [n x d]
};

struct NllResult {
  Var mean;                 // differentiable mean over non-pad positions
  double sum_loss = 0.0;    // -sum log p over non-pad positions
  double mean_loss = 0.0;
  std::size_t count = 0;
};

// Negative log-likelihood of `targets` under row-wise softmax(logits).
// sum_loss is reported as mean_loss * count so the two agree exactly.
NllResult nll_loss(Var logits, std::span<const int> targets, const std::vector<bool>& pad_mask);

class MedThinkModel {
 public:
  // Parameters drawn from N(0, 0.02^2) seeded by config.seed; layer-norm gains
  // start at 1 and all biases at 0.
  explicit MedThinkModel(ModelConfig config);

  MedThinkModel(const MedThinkModel&) = default;
  MedThinkModel& operator=(const MedThinkModel&) = default;
  MedThinkModel(MedThinkModel&&) = default;
  MedThinkModel& operator=(MedThinkModel&&) = default;

  const ModelConfig& config() const { return config_; }

  std::size_t parameter_count() const;
  static std::size_t expected_parameter_count(const ModelConfig& config);
  std::size_t tensor_count() const { return params_.size(); }
  const std::string& param_name(std::size_t i) const { return params_[i].first; }
  Tensor& param(std::size_t i) { return params_[i].second; }
  const Tensor& param(std::size_t i) const { return params_[i].second; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  std::vector<NamedParam> named_parameters();
  void zero_grad();
  std::uint64_t fingerprint() const;

  // Parameter leaves of this model on one tape.
  class Bound {
   public:
    Bound(const MedThinkModel& model, Tape& tape);
    // Reuses leaves already created for this model's parameters, in
    // named_parameters() order.
    Bound(const MedThinkModel& model, Tape& tape, std::span<const Var> leaves);
    Tape& tape() const { return *tape_; }
    Var operator[](std::size_t i) const { return leaves_[i]; }
    std::span<const Var> leaves() const { return leaves_; }
    // Adds every leaf gradient into the model's grad slots.
    void accumulate_into(MedThinkModel& model) const;

   private:
    Tape* tape_;
    std::vector<Var> leaves_;
  };

  Bound bind(Tape& tape) const { return Bound(*this, tape); }
  Bound bind(Tape& tape, std::span<const Var> leaves) const { return Bound(*this, tape, leaves); }

  Var encode_text(const Bound& b, std::span<const int> token_ids) const;
  Var encode_image(const Bound& b, const Image& image) const;
  // Single-head scaled dot-product attention of text queries over patches.
  // Returns {H_attn, weights}.
  std::pair<Var, Var> cross_attention(const Bound& b, Var text, Var image) const;
  // Returns {F_fuse, lambda}.
  std::pair<Var, Var> gated_fusion(const Bound& b, Var text, Var attended) const;
  Var decode_logits(const Bound& b, Var fused, std::span<const int> prefix) const;

  // encode_text -> encode_image -> cross_attention -> gated_fusion.
  Var fuse(const Bound& b, std::span<const int> token_ids, const Image& image) const;

  // Teacher-forced loss on target = [bos, ..., eos]: positions 0..L-2 predict
  // positions 1..L-1.
  NllResult sequence_loss(const Bound& b, std::span<const int> input_ids, const Image& image,
                          std::span<const int> target_ids) const;

  // Non-recording conveniences.
  Tensor encode_text(std::span<const int> token_ids) const;
  Tensor encode_image(const Image& image) const;
  FusionTrace trace(std::span<const int> token_ids, const Image& image) const;
  FusionTrace trace(const Tensor& text, const Tensor& image) const;
  Tensor decode_logits(const Tensor& fused, std::span<const int> prefix) const;

  TensorArchive to_archive() const;
  // Validates every tensor name and shape against `config`.
  static MedThinkModel from_archive(const TensorArchive& archive);

 private:
  struct Attention {
    std::size_t wq, wk, wv, wo;
  };
  struct FeedForward {
    std::size_t w1, b1, w2, b2;
  };
  struct Norm {
    std::size_t gain, bias;
  };
  struct EncoderBlock {
    Norm ln1, ln2;
    Attention attn;
    FeedForward ffn;
  };
  struct DecoderBlock {
    Norm ln1, ln2, ln3;
    Attention self_attn, cross_attn;
    FeedForward ffn;
  };

  std::size_t add_param(std::string name, Shape shape, double fill);
  std::size_t add_random(std::string name, Shape shape);
  Attention add_attention(const std::string& prefix);
  FeedForward add_ffn(const std::string& prefix);
  Norm add_norm(const std::string& prefix);
  void build();

  Var attend(const Bound& b, const Attention& a, Var queries, Var memory, bool causal) const;
  Var feed_forward(const Bound& b, const FeedForward& f, Var x) const;
  Var norm(const Bound& b, const Norm& n, Var x) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;

  std::size_t tok_emb_ = 0, pos_emb_ = 0, patch_proj_ = 0, patch_bias_ = 0, patch_pos_ = 0;
  std::vector<EncoderBlock> encoder_;
  Norm enc_final_{};
  std::size_t fusion_q_ = 0, fusion_k_ = 0, fusion_v_ = 0, gate_text_ = 0, gate_visual_ = 0;
  std::vector<DecoderBlock> decoder_;
  Norm dec_final_{};
  std::size_t out_proj_ = 0;
};

// Config record stored in checkpoint meta lines.
void write_config_meta(const ModelConfig& config, TensorArchive& archive);
ModelConfig read_config_meta(const TensorArchive& archive);

struct Checkpoint {
  MedThinkModel model;
  Vocab vocab;
};

void save_checkpoint(const std::filesystem::path& path, const MedThinkModel& model, const Vocab& vocab);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace medthink
