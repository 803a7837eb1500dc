#include "vlp/cli.hpp"

int main(int argc, char** argv) { return vlp::cli::run(argc, argv); }
