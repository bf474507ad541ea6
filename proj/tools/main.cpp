#include "distillkit/cli.hpp"

int main(int argc, char** argv) { return distillkit::cli_main(argc, argv); }
