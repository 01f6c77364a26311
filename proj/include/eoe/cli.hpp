// SPDX-License-Identifier: Apache-2.0
//
// `eoe` command line: prepare, train, eval, inspect.
// Exit codes: 0 success, 1 runtime failure, 2 usage or format error.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace eoe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace eoe
