#include <iostream>

#include "jde/cli.hpp"

int main(int argc, char** argv) { return jde::cli::run(argc, argv, std::cout, std::cerr); }
