#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace demosynth::io {

// Throws IoError.
std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it over `path`, so readers never
// observe a partial file. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Deterministic gzip (no timestamp, no file name).
std::string gzip_compress(std::string_view bytes);
// Throws CorruptDataset on a damaged stream.
std::string gzip_decompress(std::string_view bytes);

// Exclusive advisory lock on <dir>/.lock for the lifetime of the object.
// Throws IoError if another process holds it.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace demosynth::io
