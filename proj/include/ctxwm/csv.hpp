#pragma once

// CSV artifacts. Every file begins with a format line `# format: ctxwm.<kind>.v1`
// followed by a header row; readers reject unknown kinds/versions.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"

namespace ctxwm {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_g(float v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", double(v));
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& kind, const std::vector<std::string>& header)
      : out_(path), cols_(header.size()) {
    check(out_.good(), Errc::io, "cannot open '" + path + "' for writing");
    out_ << "# format: ctxwm." << kind << ".v1\n";
    write_row(header);
  }

  void row(const std::vector<std::string>& cells) {
    check(cells.size() == cols_, Errc::dimension, "csv row has wrong column count");
    write_row(cells);
  }

  void flush() { out_.flush(); }

 private:
  void write_row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  std::ofstream out_;
  size_t cols_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  static CsvTable read(const std::string& path, const std::string& kind) {
    std::ifstream in(path);
    check(in.good(), Errc::io, "cannot open '" + path + "'");
    std::string line;
    check(bool(std::getline(in, line)), Errc::io, "'" + path + "' is empty");
    std::string want = "# format: ctxwm." + kind + ".v1";
    check(line == want, Errc::io,
          "'" + path + "' has format line '" + line + "', expected '" + want + "'");
    CsvTable t;
    check(bool(std::getline(in, line)), Errc::io, "'" + path + "' is missing a header");
    t.header = split(line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto cells = split(line);
      check(cells.size() == t.header.size(), Errc::io, "'" + path + "' has a ragged row");
      t.rows.push_back(std::move(cells));
    }
    return t;
  }

  int col(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    fail(Errc::io, "csv column '" + name + "' not found");
  }

  static std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  }

  static double num(const std::string& s) {
    try {
      size_t pos = 0;
      double v = std::stod(s, &pos);
      check(pos == s.size(), Errc::io, "trailing characters in numeric cell '" + s + "'");
      return v;
    } catch (const Error&) {
      throw;
    } catch (...) {
      fail(Errc::io, "cannot parse numeric cell '" + s + "'");
    }
  }
};

}  // namespace ctxwm
