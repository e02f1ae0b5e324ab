#pragma once

#include <ostream>

namespace eegdg {

// Entry point of the `eegdg` command line tool. Returns the process exit
// code: 0 on success, 2 for usage and configuration errors, 3 for I/O errors,
// 4 for malformed files, 5 for numeric failures, 1 otherwise. Failures print
// one JSON object on a single line to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace eegdg
