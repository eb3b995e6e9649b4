#include "dfm/binary_io.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "dfm/errors.hpp"

namespace dfm::io {

void Writer::f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }

void Reader::expect(std::string_view magic, const char* what) {
    if (data_.substr(pos_, magic.size()) != magic)
        throw DataError(std::string("not a ") + what + " file (bad magic)");
    pos_ += magic.size();
}

double Reader::f64() { return std::bit_cast<double>(get(8)); }

std::uint64_t Reader::get(int n) {
    if (remaining() < static_cast<std::size_t>(n)) throw DataError("truncated model file");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::string& path, std::string_view contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) throw DataError("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw DataError("cannot rename " + tmp + " to " + path + ": " + ec.message());
    }
}

}  // namespace dfm::io
