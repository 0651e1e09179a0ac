#ifndef MESHGAIT_CHECKPOINT_HPP
#define MESHGAIT_CHECKPOINT_HPP

#include <filesystem>
#include <map>

#include "meshgait/mg3d.hpp"
#include "meshgait/model.hpp"

namespace meshgait {

// Single binary container: magic "MGCK", version, config fingerprint, step,
// named float32 LE tensors, trailing FNV-1a checksum of everything after the
// magic.
struct Checkpoint {
    uint64_t fingerprint = 0;
    uint64_t step = 0;
    std::vector<std::pair<std::string, HostArray>> tensors;

    const HostArray* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Optimizer state uses the "opt." name prefix inside the same container.
Checkpoint snapshot(const MeshGaitModel& model, uint64_t step,
                    const std::map<std::string, std::vector<float>>* optimizer_state = nullptr);
// Throws ConfigError on fingerprint mismatch unless override_fingerprint.
void restore(MeshGaitModel& model, const Checkpoint& ckpt, bool override_fingerprint = false,
             std::map<std::string, std::vector<float>>* optimizer_state = nullptr);

} // namespace meshgait

#endif
