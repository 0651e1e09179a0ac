#ifndef MESHGAIT_OBJ_IO_HPP
#define MESHGAIT_OBJ_IO_HPP

#include <array>
#include <filesystem>
#include <vector>

namespace meshgait {

// Wavefront OBJ: one "v x y z" line per vertex, optional "f i j k" faces.
void write_obj(const std::filesystem::path& path, const float* vertices, int64_t count,
               const std::vector<std::array<int, 3>>* faces = nullptr);

// Topology file: whitespace-separated 1-based vertex indices, three per face.
std::vector<std::array<int, 3>> read_topology(const std::filesystem::path& path);

} // namespace meshgait

#endif
