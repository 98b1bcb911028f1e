#include "dualnorm/cli.hpp"

int main(int argc, char** argv) { return dualnorm::run_cli(argc, argv); }
