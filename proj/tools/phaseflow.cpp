#include "phaseflow/cli.hpp"

int main(int argc, char** argv) { return phaseflow::cli::run_cli(argc, argv); }
