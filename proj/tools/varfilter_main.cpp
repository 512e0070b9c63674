#include <vector>

#include "varfilter/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return varfilter::run_cli(args);
}
