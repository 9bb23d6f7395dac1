#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace edgeflow::kv {

struct Line {
  int number = 0;  // 1-based source line
  std::string key;
  std::string value;
};

// Shared reader for the flat "key: value" format used by template files and
// scenario configs. Blank lines and lines starting with '#' are skipped.
// Throws Err::Syntax for lines without a colon and for empty keys or values
// (an explicitly empty value is not the same thing as an absent key).
std::vector<Line> parse_lines(std::string_view content);

std::string trim(std::string_view s);

}  // namespace edgeflow::kv
