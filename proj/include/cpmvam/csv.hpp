#pragma once

// Minimal RFC 4180 CSV reading and writing: quoted fields, doubled-quote
// escapes, CRLF tolerance. Quoted fields may span lines.

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "cpmvam/types.hpp"

namespace cpmvam {

class CsvReader {
 public:
  explicit CsvReader(std::istream& in) : in_(in) {}

  /// Reads one record; returns false at end of input. Throws Error on an
  /// unterminated quoted field.
  bool next(std::vector<std::string>& fields) {
    fields.clear();
    int ch = in_.get();
    if (ch == std::istream::traits_type::eof()) return false;
    ++record_no_;
    std::string field;
    bool in_quotes = false;
    bool quoted_field = false;
    while (true) {
      if (ch == std::istream::traits_type::eof()) {
        if (in_quotes)
          throw Error("csv: unterminated quoted field in record " +
                      std::to_string(record_no_));
        fields.push_back(std::move(field));
        return true;
      }
      const char c = static_cast<char>(ch);
      if (in_quotes) {
        if (c == '"') {
          if (in_.peek() == '"') {
            in_.get();
            field.push_back('"');
          } else {
            in_quotes = false;
          }
        } else {
          field.push_back(c);
        }
      } else if (c == '"' && field.empty() && !quoted_field) {
        in_quotes = true;
        quoted_field = true;
      } else if (c == ',') {
        fields.push_back(std::move(field));
        field.clear();
        quoted_field = false;
      } else if (c == '\n') {
        if (!field.empty() && field.back() == '\r') field.pop_back();
        fields.push_back(std::move(field));
        return true;
      } else {
        field.push_back(c);
      }
      ch = in_.get();
    }
  }

  int record_no() const { return record_no_; }

 private:
  std::istream& in_;
  int record_no_ = 0;
};

inline std::string csv_escape(const std::string& s) {
  bool need = false;
  for (char c : s)
    if (c == ',' || c == '"' || c == '\n' || c == '\r') need = true;
  if (!need) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

inline void write_csv_record(std::ostream& out,
                             const std::vector<std::string>& fields) {
  for (size_t k = 0; k < fields.size(); ++k) {
    if (k) out << ',';
    out << csv_escape(fields[k]);
  }
  out << '\n';
}

}  // namespace cpmvam
