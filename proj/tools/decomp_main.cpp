#include <iostream>

#include "decomp/cli.hpp"

int main(int argc, char** argv) { return decomp::cli::run(argc, argv, std::cout, std::cerr); }
