#include "hacsurv/cli.hpp"

int main(int argc, char** argv) { return hacsurv::cli::run(argc, argv); }
