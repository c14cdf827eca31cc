#include "tide/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tide/rng.hpp"

namespace tide {

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw std::runtime_error("corpus path does not exist: " + path.string());

  std::vector<std::string> docs;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::string text = read_text(f);
      if (!text.empty()) docs.push_back(std::move(text));
    }
  } else {
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) docs.push_back(std::move(line));
    }
  }
  return docs;
}

std::uint64_t corpus_digest(const std::vector<std::string>& documents) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& d : documents) {
    h = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(d.data()), d.size()), h);
    const unsigned char sep = 0;
    h = fnv1a64(std::span(&sep, 1), h);
  }
  return h;
}

}  // namespace tide
