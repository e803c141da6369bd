#include "odeest/cli.hpp"

int main(int argc, char** argv) { return odeest::cli::run(argc, argv); }
