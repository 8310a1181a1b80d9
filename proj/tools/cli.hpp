#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace medthink::cli {

// Exit statuses. Every failure also prints one line "error: <kind>: <message>".
enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kNotFound = 3,
  kConfig = 4,
  kDivergence = 5,
  kData = 6,
  kCheckpoint = 7,
  kConflict = 8,
  kTransport = 9,
};

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace medthink::cli
