// SPDX-License-Identifier: Apache-2.0
//
// Run directories. Layout:
//
//   <out>/<command>-<UTC timestamp>/
//     report.json       metrics body, no timestamps
//     config.json       resolved configuration
//     checkpoints.json  SHA-256 of every checkpoint used
//     <extra files>     e.g. trace.csv, table.tsv, structures.txt
//     manifest.json     SHA-256 of every file above, plus the creation time
#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moltenflow/checkpoint.hpp"
#include "moltenflow/error.hpp"

namespace moltenflow {

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

/// Deterministic JSON text: sorted keys (nlohmann objects are ordered maps), two-space indent.
inline std::string canonical_dump(const json& j) { return j.dump(2) + "\n"; }

struct RunArtifacts {
  std::string command;
  json report;
  json config;
  std::vector<std::string> checkpoints;       // paths to digest
  std::map<std::string, std::string> files;  // extra name -> contents
};

inline std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  return out.str();
}

/// Writes the bundle under a fresh directory in `out_root` and returns its path.
inline std::string write_run(const std::string& out_root, const RunArtifacts& a) {
  namespace fs = std::filesystem;
  const std::string stamp = utc_stamp();
  fs::path dir = fs::path(out_root) / (a.command + "-" + stamp);
  for (int n = 1; fs::exists(dir); ++n) dir = fs::path(out_root) / (a.command + "-" + stamp + "-" + std::to_string(n));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory: " + ec.message(), dir.string());

  std::map<std::string, std::string> files = a.files;
  files["report.json"] = canonical_dump(a.report);
  files["config.json"] = canonical_dump(a.config);
  json ck = json::object();
  for (const auto& p : a.checkpoints) ck[fs::path(p).filename().string()] = sha256_file(p);
  files["checkpoints.json"] = canonical_dump(ck);

  json manifest{{"created_utc", stamp}, {"command", a.command}, {"files", json::object()}};
  for (const auto& [name, body] : files) {
    write_file((dir / name).string(), body);
    manifest["files"][name] = sha256_hex(body);
  }
  write_file((dir / "manifest.json").string(), canonical_dump(manifest));
  return dir.string();
}

/// Files whose digest does not match the manifest (missing files included).
inline std::vector<std::string> verify_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("manifest missing", mpath.string());
  json manifest;
  try {
    manifest = json::parse(read_file(mpath.string()));
  } catch (const json::parse_error&) {
    throw IoError("manifest is not valid JSON", mpath.string());
  }
  if (!manifest.contains("files") || !manifest["files"].is_object()) throw IoError("manifest has no file list", mpath.string());
  std::vector<std::string> bad;
  for (const auto& [name, digest] : manifest["files"].items()) {
    const fs::path p = fs::path(dir) / name;
    if (!fs::exists(p) || sha256_file(p.string()) != digest.get<std::string>()) bad.push_back(name);
  }
  return bad;
}

}  // namespace moltenflow
