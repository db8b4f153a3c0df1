#include "prgp/cli.hpp"

int main(int argc, char** argv) { return prgp::run_cli(argc, argv); }
