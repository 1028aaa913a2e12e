#include "hica/cli.hpp"

int main(int argc, char** argv) { return hica::run_cli(argc, argv); }
