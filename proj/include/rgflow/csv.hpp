#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rgflow {

// RFC 4180: quote a field when it holds a comma, quote, CR or LF.
std::string csv_field(const std::string& s);
void write_csv_row(std::ostream& os, const std::vector<std::string>& fields);
// Splits one record; handles quoted fields and doubled quotes.
std::vector<std::string> parse_csv_line(const std::string& line);

// Shortest text that round-trips a double ("%.17g").
std::string format_double(double v);

// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

}  // namespace rgflow
