#include "mcsc/cli.hpp"

int main(int argc, char** argv) { return mcsc::cli::run(argc, argv); }
