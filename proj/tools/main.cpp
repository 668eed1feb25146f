#include "advdiff/cli.hpp"

int main(int argc, char** argv) { return advdiff::cli_main(argc, argv); }
