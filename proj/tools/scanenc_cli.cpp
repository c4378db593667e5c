// Command-line front end. Subcommands are registered here and implemented
// against the library; see README for usage.

#include <CLI11.hpp>

#include <cstdio>

int main(int argc, char** argv) {
  CLI::App app{"sequence encoder toolkit"};
  app.require_subcommand(1);
  CLI11_PARSE(app, argc, argv);
  return 0;
}
