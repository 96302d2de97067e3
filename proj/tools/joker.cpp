#include "joker/cli.hpp"

int main(int argc, char** argv) {
    return joker::run_cli(argc, argv);
}
