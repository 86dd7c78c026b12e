#include <iostream>

#include "msunlearn/cli.hpp"

int main(int argc, char** argv) { return msu::cli::run(argc, argv, std::cout, std::cerr); }
