#pragma once

// Artifact serialization. Writing is done by a purpose-built emitter rather
// than a library dump: key order is insertion order, floats are printed with
// 17 significant digits (round-trip exact for IEEE-754 doubles), and the byte
// stream is fully deterministic. Parsing uses nlohmann::json, whose number
// reader restores the exact double.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace poisonlab {

std::string format_double(double v);  // %.17g; throws on non-finite input

class JsonWriter {
  public:
    JsonWriter& obj_open();
    JsonWriter& obj_close();
    JsonWriter& arr_open();
    JsonWriter& arr_close();
    JsonWriter& key(std::string_view k);
    JsonWriter& num(double v);
    JsonWriter& num(std::int64_t v);
    JsonWriter& num(std::uint64_t v);  // also binds std::size_t on this platform
    JsonWriter& num(int v) { return num(static_cast<std::int64_t>(v)); }
    JsonWriter& boolean(bool v);
    JsonWriter& str(std::string_view v);

    JsonWriter& kv(std::string_view k, double v) { return key(k).num(v); }
    JsonWriter& kv(std::string_view k, std::int64_t v) { return key(k).num(v); }
    JsonWriter& kv(std::string_view k, std::uint64_t v) { return key(k).num(v); }
    JsonWriter& kv(std::string_view k, int v) { return key(k).num(v); }
    JsonWriter& kv(std::string_view k, bool v) { return key(k).boolean(v); }
    JsonWriter& kv(std::string_view k, std::string_view v) { return key(k).str(v); }
    // Keeps string literals out of the bool overload.
    JsonWriter& kv(std::string_view k, const char* v) { return key(k).str(v); }

    JsonWriter& arr_doubles(std::span<const double> v);
    JsonWriter& arr_ints(std::span<const std::int32_t> v);
    JsonWriter& arr_sizes(std::span<const std::size_t> v);

    const std::string& text() const;  // validates that nesting is closed

  private:
    void element_prefix_();
    std::string out_;
    std::vector<char> stack_;      // '{' or '['
    std::vector<bool> has_items_;
    bool key_pending_ = false;
};

// Filesystem helpers: parent directories are created, writes are whole-file.
void write_text_file(const std::string& path, std::string_view content);
std::string read_text_file(const std::string& path);
nlohmann::json parse_json_file(const std::string& path);

}  // namespace poisonlab
