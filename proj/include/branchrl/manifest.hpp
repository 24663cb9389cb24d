#pragma once

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "branchrl/rng.hpp"

namespace branchrl {

inline std::string timestamp_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_checksum_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checksum: cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  }
  return hex64(h);
}

/// Written atomically at run end; partial runs carry a failure record.
struct RunManifest {
  std::string config_hash;
  std::string code_version = "branchrl 0.1.0";
  std::string started_at;
  std::string finished_at;
  std::string status = "ok";  // ok | failed
  std::string error;
  std::vector<std::string> warnings;
  std::map<std::string, std::string> output_checksums;  // relative path -> fnv1a64
  std::map<std::string, std::string> notes;

  void checksum_outputs(const std::filesystem::path& dir,
                        const std::vector<std::string>& relative_paths) {
    for (const auto& rel : relative_paths)
      if (std::filesystem::exists(dir / rel))
        output_checksums[rel] = file_checksum_hex(dir / rel);
  }
};

inline void write_manifest_atomic(const std::filesystem::path& dir, const RunManifest& manifest) {
  nlohmann::json j;
  j["config_hash"] = manifest.config_hash;
  j["code_version"] = manifest.code_version;
  j["started_at"] = manifest.started_at;
  j["finished_at"] = manifest.finished_at;
  j["status"] = manifest.status;
  if (!manifest.error.empty()) j["error"] = manifest.error;
  j["warnings"] = manifest.warnings;
  j["output_checksums"] = manifest.output_checksums;
  j["notes"] = manifest.notes;
  const auto tmp = dir / "manifest.json.tmp";
  const auto final_path = dir / "manifest.json";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("manifest: cannot write " + tmp.string());
    out << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, final_path);
}

}  // namespace branchrl
