#include "ebds/cli.hpp"

int main(int argc, char **argv) { return ebds::parse_and_dispatch(argc, argv); }
