#include <iostream>

#include "skillloop/cli.hpp"

int main(int argc, char** argv) { return skillloop::cli::run(argc, argv, std::cout, std::cerr); }
