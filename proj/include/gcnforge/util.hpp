#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

namespace gcnforge {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// Runs fn(i) for i in [0, n). Work is split into contiguous blocks, one per
// thread, so callers that write results by index stay deterministic no
// matter how many threads run. threads <= 1 runs inline.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// Thread count from GCN_FORGE_THREADS, or 1 when unset or invalid.
std::size_t default_threads();

}  // namespace gcnforge
