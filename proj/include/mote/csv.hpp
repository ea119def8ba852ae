// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include "mote/error.hpp"

namespace mote {

/// Shortest round-trippable decimal form used for all emitted floats:
/// 17 significant digits.
inline std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Line-oriented CSV writer with deterministic formatting.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("csv: cannot write '" + path + "'");
  }

  void raw_line(const std::string& line) { out_ << line << '\n'; }

  void close() {
    out_.flush();
    if (!out_) throw IoError("csv: write failed for '" + path_ + "'");
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace mote
