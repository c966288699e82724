#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return refsplat::run_cli(argc, argv, std::cout, std::cerr); }
