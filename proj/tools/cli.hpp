#pragma once

// The `avatar` command-line tool: one binary, one subcommand per workflow.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace av::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kInternal = 1;  // unexpected failure
inline constexpr int kUsage = 2;     // unknown flag, missing or malformed argument
inline constexpr int kInvalid = 3;   // config or document fails its schema or validation
inline constexpr int kMissing = 4;   // missing or unreadable file, I/O failure
inline constexpr int kDiverged = 5;  // training produced non-finite values

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Long flag names per subcommand, "" for the top level, as registered with
// the parser. Used to keep the help text and the README honest.
std::map<std::string, std::vector<std::string>> flag_registry();

}  // namespace av::cli
