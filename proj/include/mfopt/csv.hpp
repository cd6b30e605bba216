#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mfopt/errors.hpp"

namespace mfopt {

// RFC-4180 CSV writer: CRLF line endings, quoting only where required,
// fixed-precision numeric formatting so identical data gives identical bytes.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot write csv: " + path);
  }

  CsvWriter& field(const std::string& s) {
    sep();
    if (s.find_first_of(",\"\r\n") != std::string::npos) {
      os_ << '"';
      for (char c : s) {
        if (c == '"') os_ << '"';
        os_ << c;
      }
      os_ << '"';
    } else {
      os_ << s;
    }
    return *this;
  }

  CsvWriter& field(const char* s) { return field(std::string(s)); }

  CsvWriter& field(int v) {
    sep();
    os_ << v;
    return *this;
  }

  CsvWriter& field(long v) {
    sep();
    os_ << v;
    return *this;
  }

  CsvWriter& field(size_t v) {
    sep();
    os_ << v;
    return *this;
  }

  CsvWriter& field(double v, int precision = 6) {
    sep();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    os_ << buf;
    return *this;
  }

  void endrow() {
    os_ << "\r\n";
    first_ = true;
  }

  void row(const std::vector<std::string>& fields) {
    for (const auto& f : fields) field(f);
    endrow();
  }

 private:
  void sep() {
    if (!first_) os_ << ',';
    first_ = false;
  }

  std::ofstream os_;
  bool first_ = true;
};

}  // namespace mfopt
