#pragma once

namespace segda {

// Entry point behind the segda binary. Exit codes: 0 success, 1 usage or
// validation error, 2 runtime failure.
int cli_main(int argc, char** argv);

}  // namespace segda
