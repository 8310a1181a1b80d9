#include <exception>
#include <iostream>

#include "stats_fixture.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_stats_fixtures DIR\n";
    return 2;
  }
  try {
    for (const auto& p : medthink::cli::write_stats_fixtures(argv[1])) std::cout << p.string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
