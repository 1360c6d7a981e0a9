#include <iostream>

#include "volab/cli.hpp"

int main(int argc, char** argv) { return volab::run_cli(argc, argv, std::cout, std::cerr); }
