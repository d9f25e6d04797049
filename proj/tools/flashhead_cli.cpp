#include <iostream>

#include "flashhead/cli.hpp"

int main(int argc, char** argv) {
  return flashhead::run_cli(argc, argv, std::cout, std::cerr);
}
