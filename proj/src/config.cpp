#include "meshgait/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace meshgait {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

KvConfig KvConfig::parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
}

KvConfig KvConfig::parse_string(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: '" +
                              line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key on config line " + std::to_string(lineno));
        cfg.entries_[key] = value;
    }
    return cfg;
}

bool KvConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
        size_t pos = 0;
        int64_t v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trail");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + " expects an integer, got '" + it->second + "'");
    }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
        size_t pos = 0;
        double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trail");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + " expects a number, got '" + it->second + "'");
    }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::string v = it->second;
    std::transform(v.begin(), v.end(), v.begin(), ::tolower);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + " expects a boolean, got '" + it->second + "'");
}

std::vector<int64_t> KvConfig::get_int_list(const std::string& key,
                                            const std::vector<int64_t>& fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::vector<int64_t> out;
    std::istringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoll(tok));
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + " expects a comma list of integers");
        }
    }
    return out;
}

void KvConfig::set(const std::string& key, const std::string& value) { entries_[key] = value; }

RunConfig run_config_from(const KvConfig& kv) {
    RunConfig rc;
    rc.model.backbone = kv.get_str("model.backbone", rc.model.backbone);
    rc.model.heatmap_d = static_cast<int>(kv.get_int("model.heatmap_d", rc.model.heatmap_d));
    rc.model.heatmap_h = static_cast<int>(kv.get_int("model.heatmap_h", rc.model.heatmap_h));
    rc.model.heatmap_w = static_cast<int>(kv.get_int("model.heatmap_w", rc.model.heatmap_w));
    rc.model.joints = static_cast<int>(kv.get_int("model.joints", rc.model.joints));
    rc.model.markers = static_cast<int>(kv.get_int("model.markers", rc.model.markers));
    rc.model.mesh_vertices =
        static_cast<int>(kv.get_int("model.mesh_vertices", rc.model.mesh_vertices));
    rc.model.heatmap_feat_dim =
        static_cast<int>(kv.get_int("model.heatmap_feat_dim", rc.model.heatmap_feat_dim));
    rc.model.fusion = kv.get_str("model.fusion", rc.model.fusion);
    rc.model.parts = static_cast<int>(kv.get_int("model.parts", rc.model.parts));
    rc.model.embed_dim = static_cast<int>(kv.get_int("model.embed_dim", rc.model.embed_dim));
    rc.model.regressor = kv.get_str("model.regressor", rc.model.regressor);
    rc.model.mesh_branch = kv.get_bool("model.mesh_branch", rc.model.mesh_branch);
    rc.model.num_classes = static_cast<int>(kv.get_int("model.num_classes", rc.model.num_classes));
    rc.model.loss.triplet = static_cast<float>(kv.get_double("loss.triplet", rc.model.loss.triplet));
    rc.model.loss.ce = static_cast<float>(kv.get_double("loss.ce", rc.model.loss.ce));
    rc.model.loss.joint = static_cast<float>(kv.get_double("loss.joint", rc.model.loss.joint));
    rc.model.loss.mesh = static_cast<float>(kv.get_double("loss.mesh", rc.model.loss.mesh));
    rc.model.loss.margin = static_cast<float>(kv.get_double("loss.margin", rc.model.loss.margin));

    rc.batch.p = static_cast<int>(kv.get_int("batch.p", rc.batch.p));
    rc.batch.k = static_cast<int>(kv.get_int("batch.k", rc.batch.k));
    rc.batch.t_fixed = static_cast<int>(kv.get_int("batch.frames", rc.batch.t_fixed));

    rc.optim.lr = static_cast<float>(kv.get_double("optim.lr", rc.optim.lr));
    rc.optim.momentum = static_cast<float>(kv.get_double("optim.momentum", rc.optim.momentum));
    rc.optim.lr_decay = static_cast<float>(kv.get_double("optim.lr_decay", rc.optim.lr_decay));
    rc.optim.milestones = kv.get_int_list("optim.milestones", {});

    rc.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(rc.seed)));
    if (const char* env = std::getenv("MESHGAIT_SEED")) {
        try {
            rc.seed = static_cast<uint64_t>(std::stoll(env));
        } catch (const std::exception&) {
            throw ConfigError("MESHGAIT_SEED must be an integer");
        }
    }
    rc.max_steps = kv.get_int("train.max_steps", rc.max_steps);
    rc.eval_interval = kv.get_int("train.eval_interval", rc.eval_interval);
    rc.holdout_seqs = static_cast<int>(kv.get_int("train.holdout_seqs", rc.holdout_seqs));
    rc.ablate_budget_fraction =
        kv.get_double("ablate.budget_fraction", rc.ablate_budget_fraction);
    rc.resume = kv.get_str("train.resume", "");
    rc.data_root = kv.get_str("data.root", "");
    rc.out_dir = kv.get_str("out.dir", "");

    if (rc.max_steps < 1) throw ConfigError("train.max_steps must be positive");
    if (rc.eval_interval < 1) throw ConfigError("train.eval_interval must be positive");
    if (rc.ablate_budget_fraction <= 0 || rc.ablate_budget_fraction > 1)
        throw ConfigError("ablate.budget_fraction must be in (0,1]");
    return rc;
}

std::string run_config_to_string(const RunConfig& rc) {
    std::ostringstream os;
    os << "model.backbone = " << rc.model.backbone << "\n";
    os << "model.heatmap_d = " << rc.model.heatmap_d << "\n";
    os << "model.heatmap_h = " << rc.model.heatmap_h << "\n";
    os << "model.heatmap_w = " << rc.model.heatmap_w << "\n";
    os << "model.joints = " << rc.model.joints << "\n";
    os << "model.markers = " << rc.model.markers << "\n";
    os << "model.mesh_vertices = " << rc.model.mesh_vertices << "\n";
    os << "model.heatmap_feat_dim = " << rc.model.heatmap_feat_dim << "\n";
    os << "model.fusion = " << rc.model.fusion << "\n";
    os << "model.parts = " << rc.model.parts << "\n";
    os << "model.embed_dim = " << rc.model.embed_dim << "\n";
    os << "model.regressor = " << rc.model.regressor << "\n";
    os << "model.mesh_branch = " << (rc.model.mesh_branch ? "true" : "false") << "\n";
    os << "model.num_classes = " << rc.model.num_classes << "\n";
    os << "loss.triplet = " << rc.model.loss.triplet << "\n";
    os << "loss.ce = " << rc.model.loss.ce << "\n";
    os << "loss.joint = " << rc.model.loss.joint << "\n";
    os << "loss.mesh = " << rc.model.loss.mesh << "\n";
    os << "loss.margin = " << rc.model.loss.margin << "\n";
    os << "batch.p = " << rc.batch.p << "\n";
    os << "batch.k = " << rc.batch.k << "\n";
    os << "batch.frames = " << rc.batch.t_fixed << "\n";
    os << "optim.lr = " << rc.optim.lr << "\n";
    os << "optim.momentum = " << rc.optim.momentum << "\n";
    os << "optim.lr_decay = " << rc.optim.lr_decay << "\n";
    os << "optim.milestones = ";
    for (size_t i = 0; i < rc.optim.milestones.size(); ++i)
        os << (i ? "," : "") << rc.optim.milestones[i];
    os << "\n";
    os << "seed = " << rc.seed << "\n";
    os << "train.max_steps = " << rc.max_steps << "\n";
    os << "train.eval_interval = " << rc.eval_interval << "\n";
    os << "train.holdout_seqs = " << rc.holdout_seqs << "\n";
    os << "ablate.budget_fraction = " << rc.ablate_budget_fraction << "\n";
    os << "data.root = " << rc.data_root.string() << "\n";
    os << "out.dir = " << rc.out_dir.string() << "\n";
    return os.str();
}

} // namespace meshgait
