#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>

#include "tido/error.hpp"

namespace tido::io {

using ReadObserver = std::function<void(const std::filesystem::path&)>;

inline ReadObserver& read_observer() {
  static ReadObserver observer;
  return observer;
}

/// Installs a callback invoked before every file read performed by the
/// library. Test harnesses use it as an access tripwire; the callback may
/// throw to abort the read.
inline void set_read_observer(ReadObserver observer) {
  read_observer() = std::move(observer);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  if (auto& obs = read_observer()) obs(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out << contents;
  if (!out) throw InvalidArgument("write failed for " + path.string());
}

}  // namespace tido::io
