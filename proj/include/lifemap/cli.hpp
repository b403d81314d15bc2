#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lifemap::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kPipelineFailure = 3 };

/// Runs one `lifemap` command. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// `key = value` lines, `#` comments. Keys may use '_' or '-'.
std::vector<std::pair<std::string, std::string>> parse_config(const std::string& text, const std::string& source);

}  // namespace lifemap::cli
