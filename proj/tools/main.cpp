#include <iostream>

#include "scenemixer/cli.hpp"

int main(int argc, char** argv) {
  return scenemixer::cli::run(argc, argv, std::cout, std::cerr);
}
