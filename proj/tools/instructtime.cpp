#include "instructtime/cli.hpp"

int main(int argc, char** argv) { return instructtime::cli_run(argc, argv); }
