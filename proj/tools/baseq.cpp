#include <iostream>
#include <malloc.h>
#include <string>
#include <vector>

#include "baseq/cli.hpp"

int main(int argc, char** argv) {
  // Large short-lived tensors otherwise round-trip through mmap on every step.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return baseq::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
