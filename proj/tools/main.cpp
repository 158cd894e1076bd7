#include "osvit/cli.hpp"

int main(int argc, char** argv) { return osvit::cli::run(argc, argv); }
