#include <iostream>

#include "esnet/cli.hpp"

int main(int argc, char** argv) {
    return esnet::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
