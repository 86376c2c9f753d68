#include "dabdu_cli.hpp"

int main(int argc, char** argv) {
  dabdu::tune_allocator();
  return dabdu::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
