#include "droppatch/cli.hpp"

int main(int argc, char** argv) { return droppatch::cli::run(argc, argv); }
