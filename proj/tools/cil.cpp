#include <iostream>

#include "cil/cli.hpp"

int main(int argc, char** argv) {
  cil::retain_freed_memory();
  return cil::cli::run_main(argc, argv, std::cout, std::cerr);
}
