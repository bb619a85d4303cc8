#include <iostream>
#include <string>
#include <vector>

#include "lteode/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return lteode::cli::run(args, std::cout, std::cerr);
}
