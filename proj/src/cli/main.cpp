#include <iostream>

#include "mmld/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return mmld::cli::run(args, std::cout, std::cerr);
}
