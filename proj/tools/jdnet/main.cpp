#include "jdnet/commands.hpp"

int main(int argc, char** argv) { return jdnet::cli::run(argc, argv); }
