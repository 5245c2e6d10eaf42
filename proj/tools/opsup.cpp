#include "opsup/cli.hpp"

int main(int argc, char** argv) { return opsup::cli::run(argc, argv); }
