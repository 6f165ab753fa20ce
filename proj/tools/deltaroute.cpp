#include <iostream>

#include "deltaroute/cli.hpp"
#include "deltaroute/runtime.hpp"

int main(int argc, char** argv) {
  deltaroute::tune_allocator();
  return deltaroute::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
