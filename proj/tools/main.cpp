#include "lifemap/cli.hpp"

int main(int argc, char** argv) { return lifemap::cli::run(argc, argv); }
