#include <iostream>

#include "embsformer/cli.hpp"

int main(int argc, char** argv) { return embs::cli_main(argc, argv, std::cout, std::cerr); }
