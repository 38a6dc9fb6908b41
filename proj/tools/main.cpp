#include <vector>

#include "hyperlab/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return hyperlab::cli::run(args);
}
