#include <iostream>

#include "mrg/cli.hpp"

int main(int argc, char** argv) { return mrg::cli::run(argc, argv, std::cout, std::cerr); }
