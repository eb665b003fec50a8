#include "mkdiff/cli.hpp"

int main(int argc, char** argv) { return mkdiff::run_command(argc, argv); }
