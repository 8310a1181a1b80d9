#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "medthink/data.hpp"

namespace medthink::cli {

struct StatsFixtureRow {
  std::string dataset;
  QType qtype;
  std::size_t images, train, test;
};

// Image and question counts of the R-RAD, R-SLAKE and R-Path datasets.
const std::vector<StatsFixtureRow>& stats_fixture_rows();

// Placeholder items with exactly those counts: questions are spread over the
// row's images round-robin, image files are references only.
std::vector<VqaSample> stats_fixture_samples(const std::string& dataset);

// Writes r-rad.jsonl, r-slake.jsonl and r-path.jsonl; returns their paths.
std::vector<std::filesystem::path> write_stats_fixtures(const std::filesystem::path& dir);

}  // namespace medthink::cli
