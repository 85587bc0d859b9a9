#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace pngen {

// Flat key-value run configuration parsed from a small sectioned text format:
//
//   [pae]
//   c_z = 16
//   trunk = 16,32,64,64
//
// Keys are addressed as "section.key". Unknown keys are rejected at parse
// time. The fingerprint is a content hash of the canonical (sorted)
// serialization, so key order in the file never matters.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_file(const std::filesystem::path& path);
    static RunConfig from_string(const std::string& text);

    static const std::set<std::string>& known_keys();

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_real(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const;

    // Set/override one entry (CLI flags take this path; flags win).
    void set(const std::string& key, const std::string& value);

    const std::map<std::string, std::string>& entries() const { return kv_; }

    // Sorted "key = value" lines grouped by section.
    std::string canonical() const;
    std::string fingerprint() const;

    void save(const std::filesystem::path& path) const;

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace pngen
