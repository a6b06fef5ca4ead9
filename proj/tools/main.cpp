#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return mvlfmm::cli::run(argc, argv, std::cout, std::cerr); }
