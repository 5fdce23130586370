#include <iostream>

#include "uvit/cli.hpp"

int main(int argc, char** argv) { return uvit::run_cli(argc, argv, std::cout, std::cerr); }
