#include "anapred/cli.hpp"

int main(int argc, char** argv) { return anapred::run_cli(argc, argv); }
