#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dfm::cli {

// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
// Progress lines ("iter=<i> obj=<v>") and diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args);

}  // namespace dfm::cli
