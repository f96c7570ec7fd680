#include <iostream>
#include <string>
#include <vector>

#include "trajguide/commands.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return trajguide::cli_main(args, std::cout, std::cerr);
}
