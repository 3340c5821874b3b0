#include <string>
#include <vector>

#include "patchbank/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return patchbank::cli::run(args);
}
