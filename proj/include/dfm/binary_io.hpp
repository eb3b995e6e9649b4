#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace dfm::io {

// Little-endian encoder for the model containers.
class Writer {
public:
    void bytes(std::string_view s) { buf_.append(s); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v);
    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }

    const std::string& str() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

// Bounds-checked decoder; throws DataError on truncation.
class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    void expect(std::string_view magic, const char* what);
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64();
    bool at_end() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::uint64_t get(int n);
    std::string_view data_;
    std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);

// Writes to "<path>.tmp" and renames over `path`.
void write_file_atomic(const std::string& path, std::string_view contents);

}  // namespace dfm::io
