#include <iostream>
#include <string>
#include <vector>

#include "squeeze10/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return squeeze10::run_cli(args, std::cout, std::cerr);
}
