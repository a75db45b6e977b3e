#include "debias/csv.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace debias::csv {

namespace {

// Splits one physical stream into logical records, honoring quoted newlines.
struct Reader {
  std::istream& in;
  const std::string& source;
  std::size_t line = 0;

  // Returns false on EOF. Throws ParseError on malformed quoting.
  bool next_record(std::vector<std::string>& fields, std::size_t& record_line) {
    fields.clear();
    int c = in.get();
    if (c == EOF) return false;
    ++line;
    record_line = line;
    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;
    for (;;) {
      if (c == EOF) {
        if (in_quotes)
          throw ParseError(source + ":" + std::to_string(record_line) +
                           ": unterminated quoted field");
        fields.push_back(field);
        return true;
      }
      char ch = static_cast<char>(c);
      if (in_quotes) {
        if (ch == '"') {
          if (in.peek() == '"') {
            in.get();
            field.push_back('"');
          } else {
            in_quotes = false;
          }
        } else {
          if (ch == '\n') ++line;
          field.push_back(ch);
        }
      } else if (ch == '"') {
        if (!field.empty() || field_was_quoted)
          throw ParseError(source + ":" + std::to_string(line) +
                           ": quote inside unquoted field");
        in_quotes = true;
        field_was_quoted = true;
      } else if (ch == ',') {
        fields.push_back(field);
        field.clear();
        field_was_quoted = false;
      } else if (ch == '\n') {
        if (!field.empty() && field.back() == '\r') field.pop_back();
        fields.push_back(field);
        return true;
      } else {
        field.push_back(ch);
      }
      c = in.get();
    }
  }
};

}  // namespace

Table read(std::istream& in, const std::string& source_name) {
  Table t;
  Reader reader{in, source_name};
  std::vector<std::string> fields;
  std::size_t record_line = 0;
  if (!reader.next_record(fields, record_line))
    throw ParseError(source_name + ": empty file, expected a header row");
  t.header = fields;
  while (reader.next_record(fields, record_line)) {
    if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
    if (fields.size() != t.header.size())
      throw ParseError(source_name + ":" + std::to_string(record_line) + ": expected " +
                       std::to_string(t.header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    t.rows.push_back(fields);
    t.line_numbers.push_back(record_line);
  }
  return t;
}

Table read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open file");
  return read(in, path);
}

std::string escape_field(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

void write_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.put(',');
    out << escape_field(fields[i]);
  }
  out.put('\n');
}

}  // namespace debias::csv
