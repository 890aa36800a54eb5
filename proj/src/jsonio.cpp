#include "poisonlab/jsonio.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace poisonlab {

std::string format_double(double v) {
    if (!std::isfinite(v)) throw std::runtime_error("refusing to serialize non-finite float");
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

JsonWriter& JsonWriter::obj_open() {
    element_prefix_();
    out_ += '{';
    stack_.push_back('{');
    has_items_.push_back(false);
    return *this;
}

JsonWriter& JsonWriter::obj_close() {
    if (stack_.empty() || stack_.back() != '{' || key_pending_)
        throw std::logic_error("json writer: mismatched object close");
    out_ += '}';
    stack_.pop_back();
    has_items_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::arr_open() {
    element_prefix_();
    out_ += '[';
    stack_.push_back('[');
    has_items_.push_back(false);
    return *this;
}

JsonWriter& JsonWriter::arr_close() {
    if (stack_.empty() || stack_.back() != '[')
        throw std::logic_error("json writer: mismatched array close");
    out_ += ']';
    stack_.pop_back();
    has_items_.pop_back();
    return *this;
}

JsonWriter& JsonWriter::key(std::string_view k) {
    if (stack_.empty() || stack_.back() != '{' || key_pending_)
        throw std::logic_error("json writer: key outside object");
    if (has_items_.back()) out_ += ',';
    has_items_.back() = true;
    out_ += '"';
    out_ += k;  // keys are ASCII identifiers in every artifact schema
    out_ += "\":";
    key_pending_ = true;
    return *this;
}

void JsonWriter::element_prefix_() {
    if (key_pending_) {
        key_pending_ = false;
        return;
    }
    if (!stack_.empty()) {
        if (stack_.back() != '[') throw std::logic_error("json writer: value without key in object");
        if (has_items_.back()) out_ += ',';
        has_items_.back() = true;
    }
}

JsonWriter& JsonWriter::num(double v) {
    element_prefix_();
    out_ += format_double(v);
    return *this;
}

JsonWriter& JsonWriter::num(std::int64_t v) {
    element_prefix_();
    out_ += std::to_string(v);
    return *this;
}

JsonWriter& JsonWriter::num(std::uint64_t v) {
    element_prefix_();
    out_ += std::to_string(v);
    return *this;
}

JsonWriter& JsonWriter::boolean(bool v) {
    element_prefix_();
    out_ += v ? "true" : "false";
    return *this;
}

JsonWriter& JsonWriter::str(std::string_view v) {
    element_prefix_();
    out_ += '"';
    for (char c : v) {
        switch (c) {
            case '"': out_ += "\\\""; break;
            case '\\': out_ += "\\\\"; break;
            case '\n': out_ += "\\n"; break;
            case '\t': out_ += "\\t"; break;
            case '\r': out_ += "\\r"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out_ += buf;
                } else {
                    out_ += c;
                }
        }
    }
    out_ += '"';
    return *this;
}

JsonWriter& JsonWriter::arr_doubles(std::span<const double> v) {
    arr_open();
    for (double x : v) num(x);
    return arr_close();
}

JsonWriter& JsonWriter::arr_ints(std::span<const std::int32_t> v) {
    arr_open();
    for (std::int32_t x : v) num(static_cast<std::int64_t>(x));
    return arr_close();
}

JsonWriter& JsonWriter::arr_sizes(std::span<const std::size_t> v) {
    arr_open();
    for (std::size_t x : v) num(static_cast<std::uint64_t>(x));
    return arr_close();
}

const std::string& JsonWriter::text() const {
    if (!stack_.empty() || key_pending_) throw std::logic_error("json writer: unclosed structure");
    return out_;
}

void write_text_file(const std::string& path, std::string_view content) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

nlohmann::json parse_json_file(const std::string& path) {
    return nlohmann::json::parse(read_text_file(path));
}

}  // namespace poisonlab
