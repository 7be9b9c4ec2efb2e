#include "segda/cli.hpp"

#include <cstdio>

namespace segda {

int cli_main(int, char**) {
  std::fprintf(stderr, "segda: not wired up yet\n");
  return 1;
}

}  // namespace segda
