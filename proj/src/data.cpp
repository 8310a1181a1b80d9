#include "medthink/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "medthink/errors.hpp"

namespace medthink {

using ojson = nlohmann::ordered_json;

std::string to_string(QType q) { return q == QType::kClosed ? "closed" : "open"; }
std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

QType parse_qtype(const std::string& s) {
  if (s == "closed") return QType::kClosed;
  if (s == "open") return QType::kOpen;
  throw DatasetError("unknown qtype '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw DatasetError("unknown split '" + s + "'");
}

std::string Image::key() const {
  if (is_file()) return "file:" + file;
  std::string k = "grid:" + std::to_string(height) + "x" + std::to_string(width) + ":";
  for (int p : pixels) {
    k += std::to_string(p);
    k += ',';
  }
  return k;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string> kKnownFields{"schema_version", "id",     "dataset", "image",
                                         "question",       "answer", "rationale", "qtype",
                                         "split",          "category"};

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw ParseError("manifest line " + std::to_string(line) + ": " + what);
}

std::string require_string(const ojson& rec, const char* field, std::size_t line) {
  if (!rec.contains(field)) fail(line, std::string("missing field '") + field + "'");
  const auto& v = rec.at(field);
  if (!v.is_string()) fail(line, std::string("field '") + field + "' must be a string");
  auto s = v.get<std::string>();
  if (s.empty()) fail(line, std::string("field '") + field + "' is empty");
  return s;
}

std::optional<std::string> optional_string(const ojson& rec, const char* field, std::size_t line) {
  if (!rec.contains(field) || rec.at(field).is_null()) return std::nullopt;
  if (!rec.at(field).is_string()) fail(line, std::string("field '") + field + "' must be a string");
  return rec.at(field).get<std::string>();
}

Image parse_image(const ojson& rec, std::size_t line) {
  if (!rec.contains("image")) fail(line, "missing field 'image'");
  const auto& img = rec.at("image");
  if (!img.is_object()) fail(line, "field 'image' must be an object");
  Image out;
  if (img.contains("file")) {
    if (!img.at("file").is_string() || img.at("file").get<std::string>().empty())
      fail(line, "image.file must be a non-empty string");
    out.file = img.at("file").get<std::string>();
    return out;
  }
  if (!img.contains("grid") || !img.at("grid").is_array() || img.at("grid").empty())
    fail(line, "image must carry 'file' or a non-empty 'grid'");
  const auto& grid = img.at("grid");
  out.height = grid.size();
  for (const auto& row : grid) {
    if (!row.is_array() || row.empty()) fail(line, "image.grid rows must be non-empty arrays");
    if (out.width == 0) out.width = row.size();
    if (row.size() != out.width) fail(line, "image.grid is not rectangular");
    for (const auto& px : row) {
      if (!px.is_number_integer()) fail(line, "image.grid entries must be integers");
      out.pixels.push_back(px.get<int>());
    }
  }
  return out;
}

VqaSample parse_record(const std::string& text, std::size_t line, const ManifestOptions& options) {
  ojson rec;
  try {
    rec = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(line, std::string("invalid JSON: ") + e.what());
  }
  if (!rec.is_object()) fail(line, "record must be a JSON object");
  for (const auto& [key, value] : rec.items())
    if (!kKnownFields.count(key)) fail(line, "unknown field '" + key + "'");
  if (!rec.contains("schema_version") || !rec.at("schema_version").is_number_integer())
    fail(line, "missing field 'schema_version'");
  if (rec.at("schema_version").get<int>() != kManifestSchemaVersion)
    fail(line, "unsupported schema_version " + rec.at("schema_version").dump());

  VqaSample s;
  s.id = require_string(rec, "id", line);
  s.dataset = optional_string(rec, "dataset", line);
  s.image = parse_image(rec, line);
  s.question = require_string(rec, "question", line);
  s.answer = require_string(rec, "answer", line);
  s.rationale = optional_string(rec, "rationale", line);
  try {
    s.qtype = parse_qtype(require_string(rec, "qtype", line));
    s.split = parse_split(require_string(rec, "split", line));
  } catch (const DatasetError& e) {
    fail(line, e.what());
  }
  s.category = optional_string(rec, "category", line);
  if (s.qtype == QType::kClosed && !options.closed_answers.count(normalize_text(s.answer)))
    fail(line, "closed-end answer '" + s.answer + "' is not in the declared answer set");
  return s;
}

}  // namespace

std::vector<VqaSample> read_manifest(std::istream& in, const ManifestOptions& options) {
  std::vector<VqaSample> out;
  std::set<std::string> ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    VqaSample s = parse_record(text, line, options);
    if (!ids.insert(s.id).second)
      throw IntegrityError("manifest line " + std::to_string(line) + ": duplicate id '" + s.id + "'");
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<VqaSample> load_manifest(const std::filesystem::path& path, const ManifestOptions& options) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open manifest " + path.string());
  return read_manifest(in, options);
}

std::string manifest_line(const VqaSample& s) {
  ojson rec;
  rec["schema_version"] = kManifestSchemaVersion;
  rec["id"] = s.id;
  if (s.dataset) rec["dataset"] = *s.dataset;
  ojson img = ojson::object();
  if (s.image.is_file()) {
    img["file"] = s.image.file;
  } else {
    ojson grid = ojson::array();
    for (std::size_t r = 0; r < s.image.height; ++r) {
      ojson row = ojson::array();
      for (std::size_t c = 0; c < s.image.width; ++c) row.push_back(s.image.at(r, c));
      grid.push_back(std::move(row));
    }
    img["grid"] = std::move(grid);
  }
  rec["image"] = std::move(img);
  rec["question"] = s.question;
  rec["answer"] = s.answer;
  if (s.rationale) rec["rationale"] = *s.rationale;
  rec["qtype"] = to_string(s.qtype);
  rec["split"] = to_string(s.split);
  if (s.category) rec["category"] = *s.category;
  return rec.dump();
}

void write_manifest(std::ostream& out, const std::vector<VqaSample>& samples) {
  for (const auto& s : samples) out << manifest_line(s) << '\n';
}

void save_manifest(const std::filesystem::path& path, const std::vector<VqaSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NotFoundError("cannot open " + path.string() + " for writing");
  write_manifest(out, samples);
}

// ---------------------------------------------------------------------------
// Tokenizer / vocabulary
// ---------------------------------------------------------------------------

bool is_keyword(const std::string& word) {
  return word == kAnswerKeyword || word == kRationaleKeyword || word == kQuestionKeyword;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream words(text);
  std::string word;
  while (words >> word) {
    if (is_keyword(word)) {
      out.push_back(word);
      continue;
    }
    std::string cur;
    for (unsigned char c : word) {
      if (std::isalnum(c)) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  return out;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  for (const auto& w : tokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(const std::vector<std::string>& words) {
  tokens_ = {kPadToken, kBeginToken, kEndToken, kUnknownToken,
             kAnswerKeyword, kRationaleKeyword, kQuestionKeyword};
  for (const auto& w : words) {
    if (std::find(tokens_.begin(), tokens_.begin() + kReservedCount, w) != tokens_.begin() + kReservedCount)
      continue;
    tokens_.push_back(w);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw VocabularyError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

EncodedText Vocab::encode(const std::string& text, std::size_t n_max) const {
  if (n_max < 3) throw ContractError("encode: n_max must be at least 3, got " + std::to_string(n_max));
  const auto words = tokenize(text);
  EncodedText enc;
  enc.ids.assign(n_max, kPad);
  enc.mask.assign(n_max, false);
  std::size_t pos = 0;
  enc.ids[pos++] = kBegin;
  for (const auto& w : words) {
    if (pos + 1 >= n_max) break;
    enc.ids[pos++] = id(w);
  }
  enc.ids[pos++] = kEnd;
  enc.length = pos;
  std::fill(enc.mask.begin(), enc.mask.begin() + static_cast<long>(pos), true);
  return enc;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kEnd) break;
    if (id == kPad || id == kBegin) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

Vocab build_vocab(const std::vector<VqaSample>& samples, std::size_t min_count) {
  if (min_count < 1) throw ContractError("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  auto add = [&](const std::string& text) {
    for (const auto& w : tokenize(text))
      if (!is_keyword(w)) ++counts[w];
  };
  for (const auto& s : samples) {
    add(s.question);
    add(s.answer);
    if (s.rationale) add(*s.rationale);
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (const auto& [w, c] : ranked)
    if (c >= min_count) words.push_back(w);
  return Vocab(words);
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

const StatsRow* StatsReport::find(const std::string& dataset, QType qtype) const {
  for (const auto& r : rows)
    if (r.dataset == dataset && r.qtype == qtype) return &r;
  return nullptr;
}

std::size_t StatsReport::total_questions() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.train + r.test;
  return n;
}

StatsReport dataset_stats(const std::vector<VqaSample>& samples, const std::string& default_dataset) {
  StatsReport report;
  std::vector<std::set<std::string>> images;
  for (const auto& s : samples) {
    const std::string ds = s.dataset.value_or(default_dataset);
    std::size_t idx = report.rows.size();
    for (std::size_t i = 0; i < report.rows.size(); ++i)
      if (report.rows[i].dataset == ds && report.rows[i].qtype == s.qtype) idx = i;
    if (idx == report.rows.size()) {
      report.rows.push_back(StatsRow{ds, s.qtype});
      images.emplace_back();
    }
    auto& row = report.rows[idx];
    images[idx].insert(s.image.key());
    row.images = images[idx].size();
    (s.split == Split::kTrain ? row.train : row.test) += 1;
  }
  return report;
}

std::string format_stats_table(const StatsReport& report) {
  std::ostringstream out;
  out << std::left << std::setw(24) << "Dataset" << std::right << std::setw(8) << "Images"
      << std::setw(14) << "Training set" << std::setw(10) << "Test set" << '\n';
  bool path_alias = false;
  for (const auto& r : report.rows) {
    const std::string label = r.dataset + " (" + (r.qtype == QType::kClosed ? "closed" : "open") + "-end)";
    out << std::left << std::setw(24) << label << std::right << std::setw(8) << r.images
        << std::setw(14) << r.train << std::setw(10) << r.test << '\n';
    path_alias = path_alias || r.dataset == "R-Path";
  }
  if (path_alias) out << "note: R-Path is also labelled R-PathVQA\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

const std::vector<std::string>& region_names() {
  static const std::vector<std::string> names{"upper left", "upper right", "lower left", "lower right"};
  return names;
}

namespace {

std::pair<std::size_t, std::size_t> random_cell_in(std::size_t region, GridSize g, std::mt19937_64& rng) {
  const std::size_t hr = g.rows / 2, hc = g.cols / 2;
  std::uniform_int_distribution<std::size_t> rr(0, hr - 1), cc(0, hc - 1);
  return {(region / 2) * hr + rr(rng), (region % 2) * hc + cc(rng)};
}

}  // namespace

std::vector<VqaSample> synth_generate(std::uint64_t seed, std::size_t n_items, GridSize grid,
                                      const SynthOptions& options) {
  if (n_items < 1) throw ContractError("synth_generate: n_items must be >= 1");
  if (grid.rows < 2 || grid.cols < 2 || grid.rows % 2 || grid.cols % 2)
    throw GeometryError("synth_generate: grid dimensions must be even and >= 2, got " +
                        std::to_string(grid.rows) + "x" + std::to_string(grid.cols));
  if (options.lesion_size < 1 || options.lesion_size > std::min(grid.rows, grid.cols) / 2)
    throw GeometryError("synth_generate: lesion_size " + std::to_string(options.lesion_size) +
                        " does not fit in a quadrant");
  const auto& regions = region_names();
  std::vector<VqaSample> out;
  out.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> pick_region(0, 3);

    Image img;
    img.height = grid.rows;
    img.width = grid.cols;
    img.pixels.assign(grid.rows * grid.cols, 0);
    // Background tissue: up to two marks per quadrant, colours 1..3.
    std::uniform_int_distribution<int> tissue_count(0, 2), tissue_colour(1, 3);
    for (std::size_t q = 0; q < 4; ++q)
      for (int k = tissue_count(rng); k > 0; --k) {
        auto [r, c] = random_cell_in(q, grid, rng);
        img.pixels[r * grid.cols + c] = tissue_colour(rng);
      }
    std::optional<std::size_t> lesion;
    if (unit(rng) >= options.lesion_free_fraction) {
      lesion = static_cast<std::size_t>(pick_region(rng));
      const std::size_t k = options.lesion_size, hr = grid.rows / 2, hc = grid.cols / 2;
      std::uniform_int_distribution<std::size_t> rr(0, hr - k), cc(0, hc - k);
      const std::size_t top = (*lesion / 2) * hr + rr(rng), left = (*lesion % 2) * hc + cc(rng);
      for (std::size_t r = top; r < top + k; ++r)
        for (std::size_t c = left; c < left + k; ++c) img.pixels[r * grid.cols + c] = kLesionPixel;
    }

    VqaSample s;
    char idbuf[64];
    std::snprintf(idbuf, sizeof idbuf, "synth-%llu-%06zu", static_cast<unsigned long long>(seed), i);
    s.id = idbuf;
    s.image = std::move(img);
    s.split = fnv1a(s.id) % 5 == 0 ? Split::kTest : Split::kTrain;

    const std::string where = lesion ? regions[*lesion] : std::string();
    if (unit(rng) < options.open_fraction) {
      s.qtype = QType::kOpen;
      s.question = "Where is the lesion located?";
      s.answer = lesion ? where : "nowhere";
      s.rationale = lesion ? "the lesion marker appears in the " + where + " region"
                           : "no lesion marker appears anywhere in the image";
      s.category = lesion ? where : "none";
      out.push_back(std::move(s));
      continue;
    }

    // Ask about the lesion's own quadrant half of the time.
    std::size_t asked = static_cast<std::size_t>(pick_region(rng));
    if (lesion && unit(rng) < 0.5) asked = *lesion;
    const std::string& region = regions[asked];
    const bool inside = lesion && *lesion == asked;
    const int tmpl = std::uniform_int_distribution<int>(0, 2)(rng);
    s.qtype = QType::kClosed;
    s.category = region;
    static const char* const kTemplates[] = {"Is the lesion in the %s region?", "Is there a lesion in the %s region?",
                                             "Does the %s region contain a lesion?"};
    char qbuf[128];
    std::snprintf(qbuf, sizeof qbuf, kTemplates[tmpl], region.c_str());
    s.question = qbuf;
    s.answer = inside ? "yes" : "no";
    if (inside)
      s.rationale = "the lesion marker appears in the " + region + " region, therefore yes";
    else if (lesion)
      s.rationale = "the lesion marker appears in the " + where + " region, not the " + region +
                    " region, therefore no";
    else
      s.rationale = "no lesion marker appears anywhere in the image, therefore no";
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace medthink
