#include "loma/serialize.hpp"

#include <fstream>
#include <sstream>

#include "loma/errors.hpp"

namespace loma {

std::string mask_to_csv(const MaskMat& m) {
  std::string out;
  out.reserve(static_cast<std::size_t>(m.rows()) * (static_cast<std::size_t>(m.cols()) * 2 + 1));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out.push_back(',');
      out.push_back(m(i, j) ? '1' : '0');
    }
    out.push_back('\n');
  }
  return out;
}

namespace {

void append_runs(std::string& out, const int* begin, std::size_t n) {
  std::size_t i = 0;
  bool first = true;
  while (i < n) {
    std::size_t j = i;
    while (j < n && begin[j] == begin[i]) ++j;
    if (!first) out.push_back(' ');
    first = false;
    out += std::to_string(j - i) + "x" + std::to_string(begin[i]);
    i = j;
  }
}

}  // namespace

std::string mask_to_rle(const MaskMat& m) {
  std::string out = std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
  std::vector<int> row(static_cast<std::size_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    append_runs(out, row.data(), row.size());
    out.push_back('\n');
  }
  return out;
}

MaskMat mask_from_csv(const std::string& text) {
  std::vector<std::vector<std::uint8_t>> rows;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::uint8_t> row;
    for (char ch : line) {
      if (ch == '0' || ch == '1') row.push_back(static_cast<std::uint8_t>(ch - '0'));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("mask_from_csv: empty input");
  MaskMat m(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw IoError("mask_from_csv: ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    }
  }
  return m;
}

std::string ints_to_csv(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out.push_back(',');
    out += std::to_string(v[i]);
  }
  out.push_back('\n');
  return out;
}

std::string ints_to_rle(const std::vector<int>& v) {
  std::string out = std::to_string(v.size()) + "\n";
  append_runs(out, v.data(), v.size());
  out.push_back('\n');
  return out;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("write failed for " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t hash_file(const std::string& path) { return fnv1a(read_text_file(path)); }

}  // namespace loma
