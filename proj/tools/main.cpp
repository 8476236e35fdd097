#include <iostream>

#include "medpo/cli.hpp"

int main(int argc, char** argv) { return medpo::cli::run(argc, argv, std::cout, std::cerr); }
