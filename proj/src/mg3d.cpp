#include "meshgait/mg3d.hpp"

#include <cstring>
#include <fstream>

#include "meshgait/errors.hpp"

namespace meshgait {

namespace {
constexpr char kMagic[4] = {'M', 'G', '3', 'D'};
}

void write_mg3d(const std::filesystem::path& path, const HostArray& array) {
    if (static_cast<int64_t>(array.data.size()) != array.numel())
        throw ShapeError("write_mg3d: data size does not match shape");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(kMagic, 4);
    uint32_t rank = static_cast<uint32_t>(array.shape.size());
    out.write(reinterpret_cast<const char*>(&rank), 4);
    for (auto d : array.shape) {
        uint32_t dim = static_cast<uint32_t>(d);
        out.write(reinterpret_cast<const char*>(&dim), 4);
    }
    out.write(reinterpret_cast<const char*>(array.data.data()),
              static_cast<std::streamsize>(array.data.size() * sizeof(float)));
    if (!out) throw DataError("short write to " + path.string());
}

HostArray read_mg3d(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic in " + path.string());
    uint32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 4);
    if (!in || rank > 8) throw FormatError("bad rank in " + path.string());
    HostArray array;
    array.shape.resize(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t dim = 0;
        in.read(reinterpret_cast<char*>(&dim), 4);
        if (!in) throw FormatError("truncated header in " + path.string());
        array.shape[i] = dim;
    }
    int64_t n = array.numel();
    if (n < 0 || n > (1ll << 33)) throw FormatError("implausible size in " + path.string());
    array.data.resize(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(array.data.data()),
            static_cast<std::streamsize>(array.data.size() * sizeof(float)));
    if (!in) throw FormatError("truncated payload in " + path.string());
    return array;
}

} // namespace meshgait
