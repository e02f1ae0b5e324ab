#include <iostream>

#include "eegdg/cli.hpp"

int main(int argc, char** argv) { return eegdg::run_cli(argc, argv, std::cout, std::cerr); }
