#pragma once

// Sectioned key = value text. Order of sections and keys is preserved so
// serialize(parse(text)) reproduces canonical text byte for byte.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ebt::ini {

struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;

    void set(const std::string& key, std::string value);
    std::optional<std::string> get(const std::string& key) const;
};

struct Document {
    std::vector<Section> sections;

    Section& section(const std::string& name);  // creates when missing
    const Section* find(const std::string& name) const;
};

Document parse(const std::string& text);
std::string serialize(const Document& doc);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);
double parse_double(const std::string& key, const std::string& text);
std::int64_t parse_int(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);

}  // namespace ebt::ini
