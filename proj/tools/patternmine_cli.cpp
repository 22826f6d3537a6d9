#include "patternmine/cli.hpp"

int main(int argc, char** argv) { return patternmine::cli::run(argc, argv); }
