#pragma once

#include <map>
#include <string>
#include <vector>

#include "metamorph/errors.hpp"

// Flat `key = value` configuration files. Lines starting with '#' and blank
// lines are ignored; whitespace around keys and values is trimmed.

namespace metamorph {

class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse(const std::string& text);
    static KvConfig load(const std::string& path);
    std::string serialize() const;  // canonical: sorted keys, "key = value\n"
    void save(const std::string& path) const;

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::string require_str(const std::string& key) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set_int(const std::string& key, int64_t v);
    void set_double(const std::string& key, double v);
    void set_bool(const std::string& key, bool v);
    void set_int_list(const std::string& key, const std::vector<int>& v);

    const std::map<std::string, std::string>& values() const { return values_; }

    // hex SHA-1 of the canonical serialization; identifies a run's inputs
    std::string content_hash() const;

private:
    std::map<std::string, std::string> values_;
};

namespace io {
std::string sha1_hex(const uint8_t* data, size_t size);
}

}  // namespace metamorph
