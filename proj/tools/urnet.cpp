#include <iostream>

#include "urnet/cli.hpp"

int main(int argc, char** argv) { return urnet::run_cli(argc, argv, std::cout, std::cerr); }
