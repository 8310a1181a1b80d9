#include "medthink/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "medthink/errors.hpp"

namespace medthink {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::size_t ModelConfig::patch_grid() const {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(m))));
  return g;
}

std::size_t ModelConfig::patch_pixels() const {
  const std::size_t g = patch_grid();
  return (image_height / g) * (image_width / g);
}

void ModelConfig::validate() const {
  if (vocab_size < Vocab::kReservedCount)
    throw ContractError("vocab_size must cover the reserved tokens");
  if (d == 0 || heads == 0 || d % heads != 0)
    throw ContractError("hidden size d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                        std::to_string(heads));
  if (n_max < 2) throw ContractError("n_max must be >= 2");
  if (m < 1) throw ContractError("m must be >= 1");
  if (enc_layers < 1 || dec_layers < 1) throw ContractError("layer counts must be >= 1");
  if (ffn_mult < 1) throw ContractError("ffn_mult must be >= 1");
  const std::size_t g = patch_grid();
  if (g * g != m) throw GeometryError("m=" + std::to_string(m) + " is not a square patch count");
  if (image_height == 0 || image_width == 0 || image_height % g || image_width % g)
    throw GeometryError("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                        " does not split into " + std::to_string(m) + " equal patches");
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

NllResult nll_loss(Var logits, std::span<const int> targets, const std::vector<bool>& pad_mask) {
  if (targets.size() != logits.value().rows() || pad_mask.size() != targets.size())
    throw DimensionError("nll_loss: " + std::to_string(logits.value().rows()) + " logit rows, " +
                         std::to_string(targets.size()) + " targets, " + std::to_string(pad_mask.size()) +
                         " mask entries");
  std::size_t count = 0;
  for (bool keep : pad_mask) count += keep ? 1 : 0;
  if (count == 0) throw DegenerateBatchError("nll_loss: every position is padding");
  const Var total = ops::nll_sum(logits, targets, pad_mask);
  NllResult r;
  r.count = count;
  r.mean = ops::scale(total, 1.0 / static_cast<double>(count));
  r.mean_loss = r.mean.value()[0];
  r.sum_loss = r.mean_loss * static_cast<double>(count);
  return r;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

MedThinkModel::MedThinkModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  build();
}

std::size_t MedThinkModel::add_param(std::string name, Shape shape, double fill) {
  params_.emplace_back(std::move(name), Tensor(std::move(shape), fill));
  return params_.size() - 1;
}

std::size_t MedThinkModel::add_random(std::string name, Shape shape) {
  const std::size_t idx = add_param(std::move(name), std::move(shape), 0.0);
  std::mt19937_64 rng(config_.seed ^ (0x9E3779B97F4A7C15ull * (idx + 1)));
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& v : params_[idx].second.data()) v = normal(rng);
  return idx;
}

MedThinkModel::Attention MedThinkModel::add_attention(const std::string& prefix) {
  const std::size_t d = config_.d;
  return {add_random(prefix + ".wq", {d, d}), add_random(prefix + ".wk", {d, d}),
          add_random(prefix + ".wv", {d, d}), add_random(prefix + ".wo", {d, d})};
}

MedThinkModel::FeedForward MedThinkModel::add_ffn(const std::string& prefix) {
  const std::size_t d = config_.d, f = config_.d * config_.ffn_mult;
  FeedForward ff;
  ff.w1 = add_random(prefix + ".w1", {d, f});
  ff.b1 = add_param(prefix + ".b1", {f}, 0.0);
  ff.w2 = add_random(prefix + ".w2", {f, d});
  ff.b2 = add_param(prefix + ".b2", {d}, 0.0);
  return ff;
}

MedThinkModel::Norm MedThinkModel::add_norm(const std::string& prefix) {
  return {add_param(prefix + ".gain", {config_.d}, 1.0), add_param(prefix + ".bias", {config_.d}, 0.0)};
}

void MedThinkModel::build() {
  const std::size_t d = config_.d;
  tok_emb_ = add_random("embed.tokens", {config_.vocab_size, d});
  pos_emb_ = add_random("embed.positions", {config_.n_max, d});
  patch_proj_ = add_random("vision.patch_proj", {config_.patch_pixels(), d});
  patch_bias_ = add_param("vision.patch_bias", {d}, 0.0);
  patch_pos_ = add_random("vision.patch_positions", {config_.m, d});
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    EncoderBlock blk;
    blk.ln1 = add_norm(p + ".ln1");
    blk.attn = add_attention(p + ".attn");
    blk.ln2 = add_norm(p + ".ln2");
    blk.ffn = add_ffn(p + ".ffn");
    encoder_.push_back(blk);
  }
  enc_final_ = add_norm("encoder.final");
  fusion_q_ = add_random("fusion.wq", {d, d});
  fusion_k_ = add_random("fusion.wk", {d, d});
  fusion_v_ = add_random("fusion.wv", {d, d});
  gate_text_ = add_random("gate.wl", {d, d});
  gate_visual_ = add_random("gate.wv", {d, d});
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    DecoderBlock blk;
    blk.ln1 = add_norm(p + ".ln1");
    blk.self_attn = add_attention(p + ".self_attn");
    blk.ln2 = add_norm(p + ".ln2");
    blk.cross_attn = add_attention(p + ".cross_attn");
    blk.ln3 = add_norm(p + ".ln3");
    blk.ffn = add_ffn(p + ".ffn");
    decoder_.push_back(blk);
  }
  dec_final_ = add_norm("decoder.final");
  out_proj_ = add_random("output.proj", {d, config_.vocab_size});
}

std::size_t MedThinkModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

std::size_t MedThinkModel::expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d, f = c.d * c.ffn_mult, v = c.vocab_size;
  const std::size_t attention = 4 * d * d;
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t norm = 2 * d;
  const std::size_t embed = v * d + c.n_max * d;
  const std::size_t vision = c.patch_pixels() * d + d + c.m * d;
  const std::size_t encoder = c.enc_layers * (2 * norm + attention + ffn) + norm;
  const std::size_t fusion = 5 * d * d;
  const std::size_t decoder = c.dec_layers * (3 * norm + 2 * attention + ffn) + norm;
  return embed + vision + encoder + fusion + decoder + d * v;
}

Tensor& MedThinkModel::param(const std::string& name) {
  for (auto& [n, t] : params_)
    if (n == name) return t;
  throw CheckpointError("no parameter named '" + name + "'");
}

const Tensor& MedThinkModel::param(const std::string& name) const {
  return const_cast<MedThinkModel*>(this)->param(name);
}

std::vector<NamedParam> MedThinkModel::named_parameters() {
  std::vector<NamedParam> out;
  for (auto& [n, t] : params_) out.push_back({n, &t});
  return out;
}

void MedThinkModel::zero_grad() {
  for (auto& [n, t] : params_) t.zero_grad();
}

std::uint64_t MedThinkModel::fingerprint() const {
  std::vector<const Tensor*> ts;
  for (const auto& [n, t] : params_) ts.push_back(&t);
  return medthink::fingerprint(ts);
}

MedThinkModel::Bound::Bound(const MedThinkModel& model, Tape& tape) : tape_(&tape) {
  leaves_.reserve(model.params_.size());
  for (const auto& [n, t] : model.params_) leaves_.push_back(tape.parameter(t));
}

MedThinkModel::Bound::Bound(const MedThinkModel& model, Tape& tape, std::span<const Var> leaves)
    : tape_(&tape), leaves_(leaves.begin(), leaves.end()) {
  if (leaves_.size() != model.params_.size())
    throw ContractError("bind: got " + std::to_string(leaves_.size()) + " leaves for " +
                        std::to_string(model.params_.size()) + " parameters");
}

void MedThinkModel::Bound::accumulate_into(MedThinkModel& model) const {
  for (std::size_t i = 0; i < leaves_.size(); ++i) tape_->accumulate_into(leaves_[i], model.params_[i].second);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Var MedThinkModel::norm(const Bound& b, const Norm& n, Var x) const {
  return ops::layer_norm(x, b[n.gain], b[n.bias]);
}

Var MedThinkModel::feed_forward(const Bound& b, const FeedForward& f, Var x) const {
  Var h = ops::gelu(ops::add_row(ops::matmul(x, b[f.w1]), b[f.b1]));
  return ops::add_row(ops::matmul(h, b[f.w2]), b[f.b2]);
}

Var MedThinkModel::attend(const Bound& b, const Attention& a, Var queries, Var memory, bool causal) const {
  const std::size_t heads = config_.heads, dh = config_.d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = ops::matmul(queries, b[a.wq]);
  Var k = ops::matmul(memory, b[a.wk]);
  Var v = ops::matmul(memory, b[a.wv]);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ops::slice_cols(q, h * dh, dh);
    Var kh = heads == 1 ? k : ops::slice_cols(k, h * dh, dh);
    Var vh = heads == 1 ? v : ops::slice_cols(v, h * dh, dh);
    Var w = ops::softmax_rows(ops::scale(ops::matmul_nt(qh, kh), scale), causal);
    outs.push_back(ops::matmul(w, vh));
  }
  Var joined = heads == 1 ? outs.front() : ops::concat_cols(outs);
  return ops::matmul(joined, b[a.wo]);
}

Var MedThinkModel::encode_text(const Bound& b, std::span<const int> token_ids) const {
  const std::size_t n = token_ids.size();
  if (n == 0) throw ContractError("encode_text: empty input");
  if (n > config_.n_max)
    throw LengthError("encode_text: length " + std::to_string(n) + " exceeds n_max " + std::to_string(config_.n_max));
  for (int id : token_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw VocabularyError("encode_text: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(config_.vocab_size));
  std::vector<int> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
  Var x = ops::add(ops::gather_rows(b[tok_emb_], token_ids), ops::gather_rows(b[pos_emb_], positions));
  for (const auto& blk : encoder_) {
    Var h = norm(b, blk.ln1, x);
    x = ops::add(x, attend(b, blk.attn, h, h, false));
    x = ops::add(x, feed_forward(b, blk.ffn, norm(b, blk.ln2, x)));
  }
  return norm(b, enc_final_, x);
}

Var MedThinkModel::encode_image(const Bound& b, const Image& image) const {
  if (image.is_file())
    throw GeometryError("encode_image: file-referenced images carry no pixels (" + image.file + ")");
  if (image.height != config_.image_height || image.width != config_.image_width)
    throw GeometryError("encode_image: expected " + std::to_string(config_.image_height) + "x" +
                        std::to_string(config_.image_width) + " image, got " + std::to_string(image.height) +
                        "x" + std::to_string(image.width));
  const std::size_t g = config_.patch_grid();
  const std::size_t ph = image.height / g, pw = image.width / g;
  Tensor patches({config_.m, ph * pw});
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      const std::size_t k = pr * g + pc;
      for (std::size_t r = 0; r < ph; ++r)
        for (std::size_t c = 0; c < pw; ++c)
          patches.at(k, r * pw + c) = image.at(pr * ph + r, pc * pw + c) * config_.pixel_scale;
    }
  Tape& tape = b.tape();
  Var projected = ops::add_row(ops::matmul(tape.constant(std::move(patches)), b[patch_proj_]), b[patch_bias_]);
  return ops::add(projected, b[patch_pos_]);
}

std::pair<Var, Var> MedThinkModel::cross_attention(const Bound& b, Var text, Var image) const {
  const std::size_t d = config_.d;
  if (text.value().rank() != 2 || text.value().cols() != d || image.value().rank() != 2 || image.value().cols() != d)
    throw DimensionError("cross_attention: expected [n x " + std::to_string(d) + "] and [m x " + std::to_string(d) +
                         "], got " + shape_string(text.shape()) + " and " + shape_string(image.shape()));
  Var q = ops::matmul(text, b[fusion_q_]);
  Var k = ops::matmul(image, b[fusion_k_]);
  Var v = ops::matmul(image, b[fusion_v_]);
  Var weights = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d))));
  return {ops::matmul(weights, v), weights};
}

std::pair<Var, Var> MedThinkModel::gated_fusion(const Bound& b, Var text, Var attended) const {
  if (text.shape() != attended.shape() || text.value().cols() != config_.d)
    throw DimensionError("gated_fusion: shapes " + shape_string(text.shape()) + " and " +
                         shape_string(attended.shape()) + " must both be [n x " + std::to_string(config_.d) + "]");
  Var gate = ops::sigmoid(ops::add(ops::matmul(text, b[gate_text_]), ops::matmul(attended, b[gate_visual_])));
  return {ops::lerp(text, attended, gate), gate};
}

Var MedThinkModel::decode_logits(const Bound& b, Var fused, std::span<const int> prefix) const {
  if (prefix.empty()) throw ContractError("decode_logits: empty prefix");
  if (prefix.front() != Vocab::kBegin) throw ContractError("decode_logits: prefix must start with the begin token");
  if (prefix.size() > config_.n_max)
    throw LengthError("decode_logits: prefix length " + std::to_string(prefix.size()) + " exceeds n_max " +
                      std::to_string(config_.n_max));
  for (int id : prefix)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw VocabularyError("decode_logits: token id " + std::to_string(id) + " outside vocabulary");
  std::vector<int> positions(prefix.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  Var y = ops::add(ops::gather_rows(b[tok_emb_], prefix), ops::gather_rows(b[pos_emb_], positions));
  for (const auto& blk : decoder_) {
    Var h = norm(b, blk.ln1, y);
    y = ops::add(y, attend(b, blk.self_attn, h, h, true));
    y = ops::add(y, attend(b, blk.cross_attn, norm(b, blk.ln2, y), fused, false));
    y = ops::add(y, feed_forward(b, blk.ffn, norm(b, blk.ln3, y)));
  }
  return ops::matmul(norm(b, dec_final_, y), b[out_proj_]);
}

Var MedThinkModel::fuse(const Bound& b, std::span<const int> token_ids, const Image& image) const {
  Var text = encode_text(b, token_ids);
  Var img = encode_image(b, image);
  auto [attended, weights] = cross_attention(b, text, img);
  return gated_fusion(b, text, attended).first;
}

NllResult MedThinkModel::sequence_loss(const Bound& b, std::span<const int> input_ids, const Image& image,
                                       std::span<const int> target_ids) const {
  if (target_ids.size() < 2) throw ContractError("sequence_loss: target needs at least begin and one token");
  Var fused = fuse(b, input_ids, image);
  Var logits = decode_logits(b, fused, target_ids.first(target_ids.size() - 1));
  const auto next = target_ids.subspan(1);
  std::vector<bool> mask(next.size());
  for (std::size_t i = 0; i < next.size(); ++i) mask[i] = next[i] != Vocab::kPad;
  return nll_loss(logits, next, mask);
}

Tensor MedThinkModel::encode_text(std::span<const int> token_ids) const {
  Tape tape(false);
  return encode_text(bind(tape), token_ids).value();
}

Tensor MedThinkModel::encode_image(const Image& image) const {
  Tape tape(false);
  return encode_image(bind(tape), image).value();
}

FusionTrace MedThinkModel::trace(const Tensor& text, const Tensor& image) const {
  Tape tape(false);
  const Bound b = bind(tape);
  Var t = tape.constant(text);
  Var i = tape.constant(image);
  auto [attended, weights] = cross_attention(b, t, i);
  auto [fused, gate] = gated_fusion(b, t, attended);
  return {text, image, weights.value(), attended.value(), gate.value(), fused.value()};
}

FusionTrace MedThinkModel::trace(std::span<const int> token_ids, const Image& image) const {
  return trace(encode_text(token_ids), encode_image(image));
}

Tensor MedThinkModel::decode_logits(const Tensor& fused, std::span<const int> prefix) const {
  Tape tape(false);
  const Bound b = bind(tape);
  return decode_logits(b, tape.constant(fused), prefix).value();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void write_config_meta(const ModelConfig& c, TensorArchive& archive) {
  auto put = [&](const char* key, auto value) {
    std::ostringstream s;
    s.precision(17);
    s << value;
    archive.meta.emplace_back(key, s.str());
  };
  put("config.vocab_size", c.vocab_size);
  put("config.d", c.d);
  put("config.n_max", c.n_max);
  put("config.m", c.m);
  put("config.enc_layers", c.enc_layers);
  put("config.dec_layers", c.dec_layers);
  put("config.heads", c.heads);
  put("config.ffn_mult", c.ffn_mult);
  put("config.image_height", c.image_height);
  put("config.image_width", c.image_width);
  put("config.pixel_scale", c.pixel_scale);
  put("config.seed", c.seed);
}

ModelConfig read_config_meta(const TensorArchive& archive) {
  auto get = [&](const char* key) -> const std::string& {
    const std::string* v = archive.find_meta(key);
    if (!v) throw CheckpointError(std::string("checkpoint is missing config field ") + key);
    return *v;
  };
  auto get_size = [&](const char* key) { return static_cast<std::size_t>(std::stoull(get(key))); };
  ModelConfig c;
  try {
    c.vocab_size = get_size("config.vocab_size");
    c.d = get_size("config.d");
    c.n_max = get_size("config.n_max");
    c.m = get_size("config.m");
    c.enc_layers = get_size("config.enc_layers");
    c.dec_layers = get_size("config.dec_layers");
    c.heads = get_size("config.heads");
    c.ffn_mult = get_size("config.ffn_mult");
    c.image_height = get_size("config.image_height");
    c.image_width = get_size("config.image_width");
    c.pixel_scale = std::stod(get("config.pixel_scale"));
    c.seed = std::stoull(get("config.seed"));
  } catch (const std::logic_error& e) {
    throw CheckpointError(std::string("malformed checkpoint config: ") + e.what());
  }
  return c;
}

TensorArchive MedThinkModel::to_archive() const {
  TensorArchive archive;
  write_config_meta(config_, archive);
  for (const auto& [name, t] : params_) {
    Tensor copy(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    archive.tensors.emplace_back("param." + name, std::move(copy));
  }
  return archive;
}

MedThinkModel MedThinkModel::from_archive(const TensorArchive& archive) {
  MedThinkModel model(read_config_meta(archive));
  for (auto& [name, t] : model.params_) {
    const Tensor* stored = archive.find("param." + name);
    if (!stored) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (stored->shape() != t.shape())
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_string(stored->shape()) +
                            ", config expects " + shape_string(t.shape()));
    t = *stored;
  }
  std::size_t stored_params = 0;
  for (const auto& [name, t] : archive.tensors)
    if (name.rfind("param.", 0) == 0) ++stored_params;
  if (stored_params != model.params_.size())
    throw CheckpointError("checkpoint holds " + std::to_string(stored_params) + " parameter tensors, config expects " +
                          std::to_string(model.params_.size()));
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const MedThinkModel& model, const Vocab& vocab) {
  TensorArchive archive = model.to_archive();
  std::string tokens;
  for (std::size_t i = Vocab::kReservedCount; i < vocab.size(); ++i) {
    if (!tokens.empty()) tokens.push_back(' ');
    tokens += vocab.token(static_cast<int>(i));
  }
  archive.meta.emplace_back("vocab", tokens);
  save_archive(path, archive);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive archive = load_archive(path);
  const std::string* tokens = archive.find_meta("vocab");
  if (!tokens) throw CheckpointError("checkpoint " + path.string() + " carries no vocabulary");
  std::vector<std::string> words;
  std::istringstream in(*tokens);
  for (std::string w; in >> w;) words.push_back(w);
  Vocab vocab(words);
  MedThinkModel model = MedThinkModel::from_archive(archive);
  if (vocab.size() != model.config().vocab_size)
    throw CheckpointError("checkpoint vocabulary has " + std::to_string(vocab.size()) + " tokens, config expects " +
                          std::to_string(model.config().vocab_size));
  return {std::move(model), std::move(vocab)};
}

}  // namespace medthink
