#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace ach {

// Minimal CSV emitter. Every artifact starts with a '#' comment line carrying
// the tool version and seed, then a header row. Numbers are rendered with
// std::to_chars (shortest round-trip), so identical inputs give identical
// bytes.
class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& os) : os_(os) {}

  void comment(const std::string& text);
  void meta(std::uint64_t seed);
  void header(const std::vector<std::string>& cols);
  void row(const std::vector<std::string>& cells);

 private:
  void line(const std::vector<std::string>& cells);
  std::ostream& os_;
};

std::string csv_num(double v);
std::string csv_num(std::int64_t v);
std::string csv_hex(std::uint64_t v);

}  // namespace ach
