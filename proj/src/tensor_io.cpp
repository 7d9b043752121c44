#include "unitmod/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

UNITMOD_BEGIN_NAMESPACE

namespace {

constexpr std::array<char, 4> kTensorMagic{'U', 'M', 'T', '1'};
constexpr std::array<char, 4> kCheckpointMagic{'U', 'M', 'C', 'K'};
constexpr std::uint32_t kMaxRank = 16;

void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                       static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of stream");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void expect_magic(std::istream& is, const std::array<char, 4>& magic, const char* what) {
    char m[4];
    if (!is.read(m, 4) || std::memcmp(m, magic.data(), 4) != 0) {
        throw IoError(std::string("bad magic: not a ") + what + " record");
    }
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic.data(), 4);
    put_u32(os, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    for (real v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    if (!os) throw IoError("failed writing tensor");
}

Tensor read_tensor(std::istream& is) {
    expect_magic(is, kTensorMagic, "UMT1 tensor");
    const std::uint32_t rank = get_u32(is);
    if (rank > kMaxRank) throw IoError("tensor rank " + std::to_string(rank) + " is implausible");
    Shape shape(rank);
    for (auto& d : shape) {
        const std::uint32_t v = get_u32(is);
        if (v > (1u << 28)) throw IoError("tensor extent " + std::to_string(v) + " is implausible");
        d = static_cast<int>(v);
    }
    const std::int64_t n = shape_numel(shape);
    if (n > (std::int64_t{1} << 30)) throw IoError("tensor too large");
    std::vector<real> values(static_cast<std::size_t>(n));
    for (auto& v : values) v = static_cast<real>(std::bit_cast<float>(get_u32(is)));
    return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    try {
        return read_tensor(is);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic.data(), 4);
    put_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put_u32(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_tensor(os, e.tensor);
    }
    if (!os) throw IoError("failed writing " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    try {
        expect_magic(is, kCheckpointMagic, "UMCK checkpoint");
        const std::uint32_t count = get_u32(is);
        if (count > (1u << 20)) throw IoError("implausible entry count");
        std::vector<NamedTensor> out;
        out.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint32_t len = get_u32(is);
            if (len > 4096) throw IoError("implausible name length");
            std::string name(len, '\0');
            if (!is.read(name.data(), len)) throw IoError("truncated entry name");
            out.push_back({std::move(name), read_tensor(is)});
        }
        return out;
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

UNITMOD_END_NAMESPACE
