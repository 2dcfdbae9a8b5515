#include <iostream>

#include "effiseg/cli.hpp"

int main(int argc, char** argv) {
  return effiseg::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
