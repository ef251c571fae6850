#include "uniref/cli.hpp"

int main(int argc, char** argv) { return uniref::run_cli(argc, argv); }
