#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tide {

/// Reads a corpus: a directory (one document per regular file, sorted by
/// file name) or a single file (one document per non-empty line).
std::vector<std::string> load_corpus(const std::filesystem::path& path);

std::uint64_t corpus_digest(const std::vector<std::string>& documents);

}  // namespace tide
