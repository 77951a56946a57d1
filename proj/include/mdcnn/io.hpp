#pragma once

// Little-endian binary encoding shared by the dataset and parameter formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "mdcnn/errors.hpp"

namespace mdcnn::io {

class ByteWriter {
public:
    template <class T>
        requires std::is_arithmetic_v<T>
    void put(T v) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big)
            for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        bytes_.insert(bytes_.end(), b, b + sizeof(T));
    }

    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    const std::vector<unsigned char>& bytes() const { return bytes_; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DomainError("cannot open '" + path + "' for writing");
        f.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
        if (!f) throw DomainError("write to '" + path + "' failed");
    }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

    static ByteReader from_file(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DomainError("cannot open '" + path + "' for reading");
        return ByteReader(std::vector<unsigned char>(std::istreambuf_iterator<char>(f), {}));
    }

    std::uint64_t offset() const { return pos_; }
    std::uint64_t remaining() const { return bytes_.size() - pos_; }
    bool at_end() const { return pos_ == bytes_.size(); }

    template <class T>
        requires std::is_arithmetic_v<T>
    T get(const char* what) {
        require(sizeof(T), what);
        unsigned char b[sizeof(T)];
        std::memcpy(b, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big)
            for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        T v;
        std::memcpy(&v, b, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_bytes(std::uint64_t n, const char* what) {
        require(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void expect_magic(std::string_view magic) {
        const std::uint64_t at = pos_;
        if (remaining() < magic.size() || std::string_view(reinterpret_cast<const char*>(bytes_.data() + pos_), magic.size()) != magic)
            throw FormatError("bad magic, expected '" + std::string(magic) + "'", at);
        pos_ += magic.size();
    }

private:
    void require(std::uint64_t n, const char* what) {
        if (remaining() < n)
            throw FormatError(std::string("truncated input while reading ") + what, pos_);
    }

    std::vector<unsigned char> bytes_;
    std::uint64_t pos_ = 0;
};

}  // namespace mdcnn::io
