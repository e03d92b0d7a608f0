#include "tisc/cli.hpp"

int main(int argc, char** argv) { return tisc::cli::run(argc, argv); }
