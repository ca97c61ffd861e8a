#include "echolab/cli.hpp"

int main(int argc, char** argv) { return echolab::cli::run(argc, argv); }
