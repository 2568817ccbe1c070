#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "aq/error.hpp"

namespace aq {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
    uLong c = ::crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = ::crc32(c, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

/// Little-endian byte sink.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v)); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(std::string_view s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void f64s(const std::vector<double>& v) {
        u64(v.size());
        for (double d : v) f64(d);
    }
    void raw(std::string_view s) { bytes(s.data(), s.size()); }

    /// Appends the CRC32 of everything written so far.
    void seal() { u32(crc32_of(buf_.data(), buf_.size())); }

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    template <class T>
    void put_le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source; every read is bounds-checked and reports its offset.
class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& data, std::string what) : data_(&data), what_(std::move(what)) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get_le<std::uint8_t>()); }
    std::uint32_t u32() { return get_le<std::uint32_t>(); }
    std::uint64_t u64() { return get_le<std::uint64_t>(); }
    std::int64_t i64() { return static_cast<std::int64_t>(get_le<std::uint64_t>()); }
    double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_->data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::vector<double> f64s() {
        const std::uint64_t n = u64();
        need(n * 8);
        std::vector<double> v(n);
        for (auto& d : v) d = f64();
        return v;
    }

    void expect_magic(std::string_view magic) {
        need(magic.size());
        if (std::memcmp(data_->data() + pos_, magic.data(), magic.size()) != 0) {
            throw FormatError(what_ + ": bad magic at byte 0 (expected '" + std::string(magic) + "')");
        }
        pos_ += magic.size();
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return limit_ - pos_; }
    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(what_ + ": " + msg + " at byte " + std::to_string(pos_));
    }

    /// Checks the trailing CRC32 and excludes it from further reads.
    void verify_crc() {
        if (data_->size() < 4) throw FormatError(what_ + ": file too short for a checksum (" +
                                                 std::to_string(data_->size()) + " bytes)");
        const std::size_t body = data_->size() - 4;
        std::uint32_t stored = 0;
        for (std::size_t i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>((*data_)[body + i]) << (8 * i);
        if (crc32_of(data_->data(), body) != stored) {
            throw FormatError(what_ + ": checksum mismatch (trailer at byte " + std::to_string(body) + ")");
        }
        limit_ = body;
    }

    void expect_end() const {
        if (pos_ != limit_) {
            throw FormatError(what_ + ": " + std::to_string(limit_ - pos_) + " trailing bytes at byte " +
                              std::to_string(pos_));
        }
    }

private:
    void need(std::uint64_t n) const {
        if (n > limit_ - pos_) {
            throw FormatError(what_ + ": truncated, need " + std::to_string(n) + " bytes at byte " +
                              std::to_string(pos_) + " of " + std::to_string(limit_));
        }
    }

    template <class T>
    T get_le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>((*data_)[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return v;
    }

    const std::vector<std::uint8_t>* data_;
    std::string what_;
    std::size_t pos_ = 0;
    std::size_t limit_ = data_->size();
};

inline std::vector<std::uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// Writes `bytes` to `path` via a temporary file in the same directory and a rename.
inline void atomic_write(const std::string& path, const void* bytes, std::size_t n) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = fs::path(path + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp.string() + "'");
        out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
        out.flush();
        if (!out) {
            out.close();
            std::error_code ec;
            fs::remove(tmp, ec);
            throw Error("write failed for '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw Error("cannot move '" + tmp.string() + "' into place: " + ec.message());
    }
}

inline void atomic_write(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    atomic_write(path, bytes.data(), bytes.size());
}

inline void atomic_write(const std::string& path, std::string_view text) {
    atomic_write(path, text.data(), text.size());
}

}  // namespace aq
