#ifndef MESHGAIT_MG3D_HPP
#define MESHGAIT_MG3D_HPP

#include <filesystem>
#include <vector>

#include "meshgait/tensor.hpp"

namespace meshgait {

// Plain n-d float array on the host (no autograd); the payload of .mg3d files.
struct HostArray {
    Shape shape;
    std::vector<float> data;

    int64_t numel() const { return shape_numel(shape); }
};

// .mg3d: magic "MG3D", u32 LE rank, rank x u32 LE dims, row-major float32 LE payload.
void write_mg3d(const std::filesystem::path& path, const HostArray& array);
HostArray read_mg3d(const std::filesystem::path& path);

} // namespace meshgait

#endif
