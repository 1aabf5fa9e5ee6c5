#pragma once

// Minimal RFC 4180 CSV reading/writing: quoted fields, doubled quotes,
// CRLF tolerated.

#include <istream>
#include <string>
#include <string_view>
#include <vector>

namespace schoolmap::csv {

using Row = std::vector<std::string>;

// Reads one logical record. Returns false at end of input.
inline bool read_row(std::istream& in, Row& row) {
  row.clear();
  if (in.peek() == EOF) return false;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (int ch = in.get(); ch != EOF; ch = in.get()) {
    any = true;
    const char c = static_cast<char>(ch);
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  if (!any) return false;
  row.push_back(std::move(field));
  return true;
}

inline std::string escape(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace schoolmap::csv
