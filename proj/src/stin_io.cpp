#include "standin/stin_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "standin/errors.hpp"

namespace standin {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'I', 'N'};
constexpr char kArchiveMagic[8] = {'S', 'T', 'I', 'N', 'A', 'R', 'C', 'H'};
constexpr std::uint32_t kMaxRank = 16;

template <typename T>
void put_le(std::ostream& os, T value) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    unsigned char bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw DataError("stin: truncated stream");
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
    return value;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    put_le<std::uint32_t>(os, kStinVersion);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(os, d);
    put_le<std::uint32_t>(os, kDtypeFloat32);
    for (float v : t.values()) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    if (!os) throw DataError("stin: write failed");
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("stin: bad magic");
    const auto version = get_le<std::uint32_t>(is);
    if (version != kStinVersion) throw DataError("stin: unsupported version " + std::to_string(version));
    const auto ndim = get_le<std::uint32_t>(is);
    if (ndim > kMaxRank) throw DataError("stin: rank " + std::to_string(ndim) + " too large");
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(is));
    const auto dtype = get_le<std::uint32_t>(is);
    if (dtype != kDtypeFloat32) throw DataError("stin: unsupported dtype " + std::to_string(dtype));
    Tensor t(shape);
    for (auto& v : t.values()) v = std::bit_cast<float>(get_le<std::uint32_t>(is));
    return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    try {
        return read_tensor(is);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

const Tensor* NamedTensors::find(const std::string& name) const {
    for (const auto& [n, t] : entries) {
        if (n == name) return &t;
    }
    return nullptr;
}

void save_archive(const std::filesystem::path& path, const NamedTensors& archive) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os.write(kArchiveMagic, 8);
    put_le<std::uint32_t>(os, kStinVersion);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(archive.header.size()));
    os.write(archive.header.data(), static_cast<std::streamsize>(archive.header.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(archive.entries.size()));
    for (const auto& [name, t] : archive.entries) {
        put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, t);
    }
    if (!os) throw DataError("write failed: " + path.string());
}

NamedTensors load_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    try {
        char magic[8];
        if (!is.read(magic, 8) || std::memcmp(magic, kArchiveMagic, 8) != 0) {
            throw DataError("bad archive magic");
        }
        const auto version = get_le<std::uint32_t>(is);
        if (version != kStinVersion) throw DataError("unsupported archive version");
        NamedTensors archive;
        archive.header.resize(get_le<std::uint32_t>(is));
        if (!is.read(archive.header.data(), static_cast<std::streamsize>(archive.header.size()))) {
            throw DataError("truncated header");
        }
        const auto count = get_le<std::uint32_t>(is);
        archive.entries.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string name(get_le<std::uint32_t>(is), '\0');
            if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) {
                throw DataError("truncated entry name");
            }
            archive.entries.emplace_back(std::move(name), read_tensor(is));
        }
        return archive;
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

}  // namespace standin
