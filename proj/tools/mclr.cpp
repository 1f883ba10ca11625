#include "mclr/cli.hpp"

int main(int argc, char** argv) { return mclr::run_cli(argc, argv); }
