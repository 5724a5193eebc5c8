#pragma once

#include <exception>
#include <iosfwd>
#include <string>
#include <vector>

namespace strokenext::cli {

// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitUsage = 2,        // bad flags or configuration
  kExitIo = 3,           // unreadable/unwritable files, malformed inputs
  kExitNumerical = 4,    // non-finite loss
  kExitFingerprint = 5,  // checkpoint does not match the requested model/dataset
  kExitMismatch = 6,     // prediction logs cover different samples
  kExitOom = 7,
};

int exit_code_for(const std::exception& e);

// Runs one command; args excludes the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace strokenext::cli
