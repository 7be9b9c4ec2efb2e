#include "segda/cli.hpp"

int main(int argc, char** argv) { return segda::cli_main(argc, argv); }
