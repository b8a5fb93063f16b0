#include "bhn/cli.hpp"

int main(int argc, char** argv) { return bhn::run_cli(argc, argv); }
