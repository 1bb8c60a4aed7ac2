#include "adlab/experiment.hpp"

int main(int argc, char** argv) { return adlab::run_cli(argc, argv); }
