#include <iostream>

#include "polygonizer/cli.hpp"

int main(int argc, char** argv) { return polygonizer::run_cli(argc, argv, std::cout, std::cerr); }
