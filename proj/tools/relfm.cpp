#include "relfm/cli.hpp"

int main(int argc, char** argv) { return relfm::cli::dispatch(argc, argv); }
