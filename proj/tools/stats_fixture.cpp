#include "stats_fixture.hpp"

#include <cstdio>

namespace medthink::cli {

const std::vector<StatsFixtureRow>& stats_fixture_rows() {
  static const std::vector<StatsFixtureRow> rows{
      {"R-RAD", QType::kClosed, 300, 1823, 272},    {"R-RAD", QType::kOpen, 267, 1241, 179},
      {"R-SLAKE", QType::kClosed, 545, 1943, 416},  {"R-SLAKE", QType::kOpen, 545, 2976, 645},
      {"R-Path", QType::kClosed, 3361, 9806, 3391}, {"R-Path", QType::kOpen, 3425, 9933, 3364},
  };
  return rows;
}

std::vector<VqaSample> stats_fixture_samples(const std::string& dataset) {
  std::vector<VqaSample> out;
  for (const auto& row : stats_fixture_rows()) {
    if (row.dataset != dataset) continue;
    const bool closed = row.qtype == QType::kClosed;
    const std::string kind = closed ? "closed" : "open";
    for (std::size_t k = 0; k < row.train + row.test; ++k) {
      char buf[96];
      VqaSample s;
      std::snprintf(buf, sizeof buf, "%s-%s-%05zu", dataset.c_str(), kind.c_str(), k);
      s.id = buf;
      std::snprintf(buf, sizeof buf, "%s/%s/img_%05zu.jpg", dataset.c_str(), kind.c_str(), k % row.images);
      s.image.file = buf;
      s.dataset = dataset;
      s.qtype = row.qtype;
      s.split = k < row.train ? Split::kTrain : Split::kTest;
      if (closed) {
        s.question = "Is finding " + std::to_string(k % 7) + " present?";
        s.answer = k % 2 ? "yes" : "no";
      } else {
        s.question = "Which finding is shown?";
        s.answer = "finding " + std::to_string(k % 7);
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<std::filesystem::path> write_stats_fixtures(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (const auto& [name, file] : {std::pair{"R-RAD", "r-rad.jsonl"}, std::pair{"R-SLAKE", "r-slake.jsonl"},
                                   std::pair{"R-Path", "r-path.jsonl"}}) {
    paths.push_back(dir / file);
    save_manifest(paths.back(), stats_fixture_samples(name));
  }
  return paths;
}

}  // namespace medthink::cli
