#include "mirror/cli.hpp"

int main(int argc, char** argv) { return mirror::cli::run(argc, argv); }
