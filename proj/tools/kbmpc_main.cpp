#include "kbmpc/cli.hpp"

int main(int argc, char** argv) { return kbmpc::cli::run_cli(argc, argv); }
