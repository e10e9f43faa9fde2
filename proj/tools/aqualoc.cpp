#include "aqualoc/harness.hpp"

#include <iostream>

int main(int argc, char** argv) { return aqualoc::cli_main(argc, argv, std::cout, std::cerr); }
