#include "mpatch/cli.hpp"

int main(int argc, char** argv) { return mpatch::cli::run_cli(argc, argv); }
