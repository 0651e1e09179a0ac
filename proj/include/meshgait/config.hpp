#ifndef MESHGAIT_CONFIG_HPP
#define MESHGAIT_CONFIG_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "meshgait/dataset.hpp"
#include "meshgait/model.hpp"

namespace meshgait {

// Flat key-value configuration. Grammar: one `section.key = value` per line,
// '#' starts a comment, blank lines ignored. Keys use dotted sections.
class KvConfig {
public:
    static KvConfig parse_file(const std::filesystem::path& path);
    static KvConfig parse_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int64_t> get_int_list(const std::string& key,
                                      const std::vector<int64_t>& fallback) const;
    void set(const std::string& key, const std::string& value);

    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
};

struct OptimSettings {
    float lr = 0.1f;
    float momentum = 0.9f;
    float lr_decay = 0.1f;
    std::vector<int64_t> milestones;
};

struct RunConfig {
    ModelConfig model;
    BatchSpec batch;
    OptimSettings optim;
    uint64_t seed = 1;
    int64_t max_steps = 500;
    int64_t eval_interval = 100;
    int holdout_seqs = 1; // sequences per identity reserved for evaluation
    double ablate_budget_fraction = 0.2;
    std::filesystem::path data_root;
    std::filesystem::path out_dir;
    std::string resume; // checkpoint path, empty for a fresh run
};

// Builds a RunConfig from a flat config; the MESHGAIT_SEED environment variable
// overrides the seed field. num_classes is filled in later from the dataset.
RunConfig run_config_from(const KvConfig& kv);

// Inverse of run_config_from; written next to checkpoints so eval/reconstruct
// can rebuild the exact architecture.
std::string run_config_to_string(const RunConfig& rc);

} // namespace meshgait

#endif
