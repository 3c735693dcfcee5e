#include "afvae/cli.hpp"

int main(int argc, char** argv) { return afvae::cli::run(argc, argv); }
