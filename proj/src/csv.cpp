#include "ach/csv.hpp"

#include <charconv>
#include <cmath>

#include "ach/version.hpp"

namespace ach {

void CsvWriter::comment(const std::string& text) { os_ << "# " << text << "\n"; }

void CsvWriter::meta(std::uint64_t seed) {
  os_ << "# " << kToolName << " " << kVersion << " seed=" << seed << "\n";
}

void CsvWriter::header(const std::vector<std::string>& cols) { line(cols); }

void CsvWriter::row(const std::vector<std::string>& cells) { line(cells); }

void CsvWriter::line(const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) os_ << ",";
    os_ << cells[i];
  }
  os_ << "\n";
}

std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_num(std::int64_t v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_hex(std::uint64_t v) {
  char buf[24];
  buf[0] = '0';
  buf[1] = 'x';
  const auto res = std::to_chars(buf + 2, buf + sizeof(buf), v, 16);
  return std::string(buf, res.ptr);
}

}  // namespace ach
