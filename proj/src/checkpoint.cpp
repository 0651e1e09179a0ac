#include "meshgait/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace meshgait {

namespace {

constexpr char kMagic[4] = {'M', 'G', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void put(std::string& buf, T v) {
    put_bytes(buf, &v, sizeof(v));
}

} // namespace

const HostArray* Checkpoint::find(const std::string& name) const {
    for (auto& [n, a] : tensors)
        if (n == name) return &a;
    return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::string body;
    put(body, kVersion);
    put(body, ckpt.fingerprint);
    put(body, ckpt.step);
    put(body, static_cast<uint32_t>(ckpt.tensors.size()));
    for (auto& [name, array] : ckpt.tensors) {
        put(body, static_cast<uint16_t>(name.size()));
        put_bytes(body, name.data(), name.size());
        put(body, static_cast<uint32_t>(array.shape.size()));
        for (auto d : array.shape) put(body, static_cast<uint32_t>(d));
        put_bytes(body, array.data.data(), array.data.size() * sizeof(float));
    }
    uint64_t checksum = fnv1a64(body.data(), body.size());

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, 4);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw DataError("short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (all.size() < 4 + sizeof(uint64_t) || std::memcmp(all.data(), kMagic, 4) != 0)
        throw FormatError("not a checkpoint file: " + path.string());
    size_t body_len = all.size() - 4 - sizeof(uint64_t);
    const char* body = all.data() + 4;
    uint64_t stored;
    std::memcpy(&stored, all.data() + 4 + body_len, sizeof(stored));
    if (fnv1a64(body, body_len) != stored)
        throw FormatError("checkpoint checksum mismatch in " + path.string() +
                          " (file corrupt)");

    size_t off = 0;
    auto need = [&](size_t n) {
        if (off + n > body_len) throw FormatError("truncated checkpoint " + path.string());
    };
    auto get_u16 = [&]() {
        need(2);
        uint16_t v;
        std::memcpy(&v, body + off, 2);
        off += 2;
        return v;
    };
    auto get_u32 = [&]() {
        need(4);
        uint32_t v;
        std::memcpy(&v, body + off, 4);
        off += 4;
        return v;
    };
    auto get_u64 = [&]() {
        need(8);
        uint64_t v;
        std::memcpy(&v, body + off, 8);
        off += 8;
        return v;
    };

    Checkpoint ckpt;
    uint32_t version = get_u32();
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    ckpt.fingerprint = get_u64();
    ckpt.step = get_u64();
    uint32_t count = get_u32();
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = get_u16();
        need(name_len);
        std::string name(body + off, name_len);
        off += name_len;
        uint32_t rank = get_u32();
        if (rank > 8) throw FormatError("bad tensor rank in checkpoint");
        HostArray array;
        array.shape.resize(rank);
        for (uint32_t r = 0; r < rank; ++r) array.shape[r] = get_u32();
        int64_t n = array.numel();
        need(static_cast<size_t>(n) * sizeof(float));
        array.data.resize(static_cast<size_t>(n));
        std::memcpy(array.data.data(), body + off, static_cast<size_t>(n) * sizeof(float));
        off += static_cast<size_t>(n) * sizeof(float);
        ckpt.tensors.emplace_back(std::move(name), std::move(array));
    }
    return ckpt;
}

Checkpoint snapshot(const MeshGaitModel& model, uint64_t step,
                    const std::map<std::string, std::vector<float>>* optimizer_state) {
    Checkpoint ckpt;
    ckpt.fingerprint = model.config().fingerprint();
    ckpt.step = step;
    auto dump = [&](const std::vector<std::pair<std::string, Tensor>>& items) {
        for (auto& [name, t] : items) {
            HostArray a;
            a.shape = t.shape();
            a.data = t.vec();
            ckpt.tensors.emplace_back(name, std::move(a));
        }
    };
    dump(model.store().params());
    dump(model.store().buffers());
    if (optimizer_state)
        for (auto& [name, v] : *optimizer_state) {
            HostArray a;
            a.shape = {static_cast<int64_t>(v.size())};
            a.data = v;
            ckpt.tensors.emplace_back("opt." + name, std::move(a));
        }
    return ckpt;
}

void restore(MeshGaitModel& model, const Checkpoint& ckpt, bool override_fingerprint,
             std::map<std::string, std::vector<float>>* optimizer_state) {
    uint64_t want = model.config().fingerprint();
    if (ckpt.fingerprint != want && !override_fingerprint) {
        char a[32], b[32];
        std::snprintf(a, sizeof(a), "%016llx", static_cast<unsigned long long>(ckpt.fingerprint));
        std::snprintf(b, sizeof(b), "%016llx", static_cast<unsigned long long>(want));
        throw ConfigError(std::string("checkpoint fingerprint ") + a +
                          " does not match model config " + b +
                          " (pass the override flag to force)");
    }
    auto restore_items = [&](std::vector<std::pair<std::string, Tensor>>& items) {
        for (auto& [name, t] : items) {
            const HostArray* a = ckpt.find(name);
            if (!a) throw FormatError("checkpoint missing tensor '" + name + "'");
            if (a->numel() != t.numel())
                throw FormatError("checkpoint tensor '" + name + "' has wrong size");
            std::copy(a->data.begin(), a->data.end(), t.vec().begin());
        }
    };
    restore_items(model.store().params());
    restore_items(model.store().buffers());
    if (optimizer_state) {
        optimizer_state->clear();
        for (auto& [name, a] : ckpt.tensors)
            if (name.rfind("opt.", 0) == 0) (*optimizer_state)[name.substr(4)] = a.data;
    }
}

} // namespace meshgait
