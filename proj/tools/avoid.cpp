#include "avoid/cli.hpp"

int main(int argc, char** argv) { return avoid::cli::dispatch(argc, argv); }
