#include <csignal>
#include <iostream>
#include <vector>

#include "edgeflow/cli.hpp"

int main(int argc, char** argv) {
  // A client hanging up mid-response must not kill a serving tier.
  std::signal(SIGPIPE, SIG_IGN);
  std::vector<std::string> args(argv + 1, argv + argc);
  int rc = edgeflow::cli_main(std::move(args), std::cout, std::cerr);
  std::cout.flush();
  return rc;
}
