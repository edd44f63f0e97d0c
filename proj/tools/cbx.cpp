#include "circuitbox/workbench.hpp"

int main(int argc, char** argv) { return circuitbox::cli_main(argc, argv); }
