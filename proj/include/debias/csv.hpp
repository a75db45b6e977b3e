#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace debias::csv {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One record per row, fields unescaped. RFC 4180: comma separated, optional
// double-quoting, "" escapes a quote inside a quoted field, CRLF or LF.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  // 1-based line number of each data row (header is line 1), for diagnostics.
  std::vector<std::size_t> line_numbers;
};

Table read(std::istream& in, const std::string& source_name);
Table read_file(const std::string& path);

// Quotes a field only when it contains comma, quote or newline.
std::string escape_field(const std::string& field);
void write_row(std::ostream& out, const std::vector<std::string>& fields);

}  // namespace debias::csv
