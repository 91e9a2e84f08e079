#include "webreplay/cli.hpp"

int main(int argc, char** argv) { return webreplay::run(argc, argv); }
