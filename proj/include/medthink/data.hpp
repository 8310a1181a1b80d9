#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace medthink {

// ---------------------------------------------------------------------------
// Samples and manifests
// ---------------------------------------------------------------------------

enum class QType { kClosed, kOpen };
enum class Split { kTrain, kTest };

std::string to_string(QType q);
std::string to_string(Split s);
QType parse_qtype(const std::string& s);
Split parse_split(const std::string& s);

// Integer pixel grid, or a reference to an external file. Synthetic data is
// always inline.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> pixels;  // row-major, height * width
  std::string file;         // non-empty for file references

  bool is_file() const { return !file.empty(); }
  int at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  // Identity used when counting distinct images.
  std::string key() const;
  bool operator==(const Image&) const = default;
};

struct VqaSample {
  std::string id;
  Image image;
  std::string question;
  std::string answer;
  std::optional<std::string> rationale;
  QType qtype = QType::kClosed;
  Split split = Split::kTrain;
  std::optional<std::string> category;
  std::optional<std::string> dataset;

  bool operator==(const VqaSample&) const = default;
};

inline constexpr int kManifestSchemaVersion = 1;

struct ManifestOptions {
  // Normalized answers allowed for closed-end items.
  std::set<std::string> closed_answers{"yes", "no"};
};

// One JSON object per line; blank lines are skipped. Throws ParseError
// (with line number) on schema violations and IntegrityError on duplicate ids.
std::vector<VqaSample> read_manifest(std::istream& in, const ManifestOptions& options = {});
std::vector<VqaSample> load_manifest(const std::filesystem::path& path,
                                     const ManifestOptions& options = {});
// Canonical form: fixed key order, compact JSON, '\n' line endings.
void write_manifest(std::ostream& out, const std::vector<VqaSample>& samples);
void save_manifest(const std::filesystem::path& path, const std::vector<VqaSample>& samples);
std::string manifest_line(const VqaSample& sample);

// ---------------------------------------------------------------------------
// Tokenizer and vocabulary
// ---------------------------------------------------------------------------

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBeginToken = "<bos>";
inline constexpr const char* kEndToken = "<eos>";
inline constexpr const char* kUnknownToken = "<unk>";
inline constexpr const char* kAnswerKeyword = "Answer:";
inline constexpr const char* kRationaleKeyword = "Rationale:";
inline constexpr const char* kQuestionKeyword = "Question:";

bool is_keyword(const std::string& word);

// Whitespace split; keywords pass through verbatim, every other word is
// lowercased and punctuation becomes a separator.
std::vector<std::string> tokenize(const std::string& text);
// tokenize() joined with single spaces.
std::string normalize_text(const std::string& text);

struct EncodedText {
  std::vector<int> ids;     // exactly n_max entries
  std::vector<bool> mask;   // true for non-pad positions
  std::size_t length = 0;   // non-pad prefix length

  std::vector<int> active() const { return {ids.begin(), ids.begin() + static_cast<long>(length)}; }
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBegin = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnknown = 3;
  static constexpr int kAnswer = 4;
  static constexpr int kRationale = 5;
  static constexpr int kQuestion = 6;
  static constexpr int kReservedCount = 7;

  Vocab();
  // Reserved tokens followed by `words` in the given order.
  explicit Vocab(const std::vector<std::string>& words);

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;  // kUnknown when absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Begin, word ids, end; truncated to n_max keeping begin/end; padded.
  EncodedText encode(const std::string& text, std::size_t n_max) const;
  // Drops pad/begin/end, stops at the first end token.
  std::string decode(const std::vector<int>& ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Words from questions, answers and rationales with count >= min_count,
// ordered by descending frequency then lexicographically.
Vocab build_vocab(const std::vector<VqaSample>& samples, std::size_t min_count = 1);

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct StatsRow {
  std::string dataset;
  QType qtype = QType::kClosed;
  std::size_t images = 0;
  std::size_t train = 0;
  std::size_t test = 0;
};

struct StatsReport {
  std::vector<StatsRow> rows;  // in first-appearance order of (dataset, qtype)

  const StatsRow* find(const std::string& dataset, QType qtype) const;
  std::size_t total_questions() const;
};

// Samples without a dataset tag are grouped under `default_dataset`.
StatsReport dataset_stats(const std::vector<VqaSample>& samples,
                          const std::string& default_dataset = "dataset");
std::string format_stats_table(const StatsReport& report);

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct GridSize {
  std::size_t rows = 8;
  std::size_t cols = 8;
};

struct SynthOptions {
  // Fraction of open-end ("where is the lesion") items.
  double open_fraction = 0.0;
  // Fraction of images without any lesion marker.
  double lesion_free_fraction = 0.15;
  // Side of the square lesion marker, placed wholly inside one quadrant.
  std::size_t lesion_size = 2;
};

inline constexpr int kLesionPixel = 9;
inline constexpr int kMaxPixel = 9;

// Quadrant names in patch order (row-major 2x2).
const std::vector<std::string>& region_names();

// Deterministic given (seed, n_items, grid, options). Grid dimensions must be
// even. Split is 80/20 by a hash of the id.
std::vector<VqaSample> synth_generate(std::uint64_t seed, std::size_t n_items,
                                      GridSize grid = {}, const SynthOptions& options = {});

std::uint64_t fnv1a(const std::string& s);

}  // namespace medthink
