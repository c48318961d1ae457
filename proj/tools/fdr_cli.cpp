#include "fdr/cli.hpp"

int main(int argc, char** argv) { return fdr::cli::run_cli(argc, argv); }
