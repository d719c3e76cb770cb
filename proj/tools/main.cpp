#include <newton_cnn/cli.hpp>

int main(int argc, char** argv) { return newton_cnn::run_cli(argc, argv); }
