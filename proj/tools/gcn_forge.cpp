#include <iostream>

#include "gcnforge/cli.hpp"

int main(int argc, char** argv) { return gcnforge::run_cli(argc, argv, std::cout, std::cerr); }
