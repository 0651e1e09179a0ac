#include "meshgait/obj_io.hpp"

#include <cstdio>
#include <fstream>

#include "meshgait/errors.hpp"

namespace meshgait {

void write_obj(const std::filesystem::path& path, const float* vertices, int64_t count,
               const std::vector<std::array<int, 3>>* faces) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write OBJ " + path.string());
    char line[96];
    for (int64_t v = 0; v < count; ++v) {
        std::snprintf(line, sizeof(line), "v %.6f %.6f %.6f\n", vertices[v * 3 + 0],
                      vertices[v * 3 + 1], vertices[v * 3 + 2]);
        out << line;
    }
    if (faces)
        for (const auto& f : *faces) out << "f " << f[0] << " " << f[1] << " " << f[2] << "\n";
    if (!out) throw DataError("short write to " + path.string());
}

std::vector<std::array<int, 3>> read_topology(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open topology file " + path.string());
    std::vector<std::array<int, 3>> faces;
    int a, b, c;
    while (in >> a >> b >> c) faces.push_back({a, b, c});
    if (!in.eof()) throw FormatError("topology file " + path.string() + " is not index triples");
    return faces;
}

} // namespace meshgait
