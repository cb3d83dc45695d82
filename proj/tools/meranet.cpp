#include "meranet/cli.hpp"

int main(int argc, char** argv) { return meranet::run_cli(argc, argv); }
