#pragma once

#include <string>
#include <vector>

#include "loma/structuring.hpp"

namespace loma {

// mask-dump text formats used for golden-file comparisons.
//
// CSV: one mask row per line, comma-separated 0/1. Run-length: a header line
// "rows cols", then per row space-separated "<count>x<value>" runs.
std::string mask_to_csv(const MaskMat& m);
std::string mask_to_rle(const MaskMat& m);
MaskMat mask_from_csv(const std::string& text);

std::string ints_to_csv(const std::vector<int>& v);
std::string ints_to_rle(const std::vector<int>& v);

void write_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// FNV-1a over raw bytes; used by the determinism checks.
std::uint64_t fnv1a(const std::string& bytes);
std::uint64_t hash_file(const std::string& path);

}  // namespace loma
