#include "rgbd/cli.hpp"

int main(int argc, char** argv) { return rgbd::cli_run(argc, argv); }
