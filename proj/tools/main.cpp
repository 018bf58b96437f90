#include <iostream>
#include <string>
#include <vector>

#include "xattn/harness.hpp"

int main(int argc, char** argv) {
  return xattn::run_command(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
