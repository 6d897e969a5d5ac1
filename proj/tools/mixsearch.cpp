#include <iostream>

#include "mixsearch/cli.hpp"

int main(int argc, char** argv) { return mixsearch::cli::run(argc, argv, std::cout, std::cerr); }
