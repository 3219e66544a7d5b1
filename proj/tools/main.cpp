#include "cli.hpp"

int main(int argc, char** argv) { return squads::cli::run(argc, argv); }
