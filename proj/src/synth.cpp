#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "meshgait/dataset.hpp"
#include "meshgait/errors.hpp"
#include "meshgait/image.hpp"

namespace meshgait {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

// world box used for both rasterization and the voxel-coordinate mapping
constexpr double kXMin = -1.1, kXMax = 1.1;
constexpr double kYMin = -0.1, kYMax = 2.0;
constexpr double kZMin = -1.1, kZMax = 1.1;

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }

struct WalkerParams {
    double thigh, shin, foot_len;
    double torso_len, neck_head;
    double upper_arm, forearm, hand_len;
    double shoulder_w, hip_w;
    double freq, hip_amp, knee_amp, arm_amp, elbow_amp, bob_amp, lean;
    double limb_r, torso_r, head_r;
    std::array<std::array<int, 3>, kMarkers> marker_idx;
    std::array<std::array<double, 3>, kMarkers> marker_w;
};

WalkerParams draw_walker(Rng& rng) {
    WalkerParams p;
    double s = rng.uniform(0.88, 1.12);
    p.thigh = s * rng.uniform(0.40, 0.48);
    p.shin = s * rng.uniform(0.38, 0.46);
    p.foot_len = s * rng.uniform(0.12, 0.17);
    p.torso_len = s * rng.uniform(0.50, 0.60);
    p.neck_head = s * rng.uniform(0.12, 0.16);
    p.upper_arm = s * rng.uniform(0.26, 0.33);
    p.forearm = s * rng.uniform(0.22, 0.28);
    p.hand_len = s * rng.uniform(0.06, 0.09);
    p.shoulder_w = s * rng.uniform(0.36, 0.46);
    p.hip_w = s * rng.uniform(0.26, 0.34);
    p.freq = rng.uniform(0.05, 0.10);
    p.hip_amp = rng.uniform(0.35, 0.60);
    p.knee_amp = rng.uniform(0.55, 0.95);
    p.arm_amp = rng.uniform(0.30, 0.55);
    p.elbow_amp = rng.uniform(0.25, 0.55);
    p.bob_amp = rng.uniform(0.010, 0.028);
    p.lean = rng.uniform(0.00, 0.08);
    p.limb_r = s * rng.uniform(0.048, 0.070);
    p.torso_r = s * rng.uniform(0.100, 0.140);
    p.head_r = s * rng.uniform(0.095, 0.125);

    // Markers sit near one primary joint, mixed with skeleton neighbors, so
    // they hug the body surface the way physical markers would.
    static const int tree_edges[][2] = {
        {0, 1},  {0, 2},  {0, 3},   {3, 6},   {6, 9},   {9, 12},  {12, 15}, {1, 4},
        {4, 7},  {7, 10}, {2, 5},   {5, 8},   {8, 11},  {9, 13},  {9, 14},  {13, 16},
        {14, 17}, {16, 18}, {18, 20}, {20, 22}, {17, 19}, {19, 21}, {21, 23}};
    std::array<std::vector<int>, kJoints> adj;
    for (auto& e : tree_edges) {
        adj[static_cast<size_t>(e[0])].push_back(e[1]);
        adj[static_cast<size_t>(e[1])].push_back(e[0]);
    }
    for (int m = 0; m < kMarkers; ++m) {
        int primary = static_cast<int>(rng.uniform_index(kJoints));
        const auto& nb = adj[static_cast<size_t>(primary)];
        int n1 = nb[rng.uniform_index(nb.size())];
        const auto& nb2 = adj[static_cast<size_t>(n1)];
        int n2 = nb.size() > 1 ? nb[rng.uniform_index(nb.size())]
                               : nb2[rng.uniform_index(nb2.size())];
        p.marker_idx[static_cast<size_t>(m)] = {primary, n1, n2};
        double wp = rng.uniform(0.55, 0.95);
        double split = rng.uniform(0.0, 1.0);
        p.marker_w[static_cast<size_t>(m)] = {wp, (1 - wp) * split, (1 - wp) * (1 - split)};
    }
    return p;
}

// 24-joint skeleton in the SMPL joint order
std::array<Vec3, kJoints> pose_walker(const WalkerParams& p, double phi) {
    auto sag = [](double a) { return Vec3{std::sin(a), -std::cos(a), 0.0}; };
    std::array<Vec3, kJoints> j{};

    double pelvis_y = p.thigh + p.shin + 0.07 + p.bob_amp * std::sin(2 * phi);
    Vec3 pelvis{0, pelvis_y, 0};
    double lean = p.lean + 0.03 * std::sin(phi);
    Vec3 up{std::sin(lean), std::cos(lean), 0};

    Vec3 neck = pelvis + p.torso_len * up;
    Vec3 head = neck + p.neck_head * up;

    double hip_l = p.hip_amp * std::sin(phi);
    double hip_r = p.hip_amp * std::sin(phi + kPi);
    double knee_l = p.knee_amp * std::max(0.0, std::sin(phi + 0.9));
    double knee_r = p.knee_amp * std::max(0.0, std::sin(phi + kPi + 0.9));
    double arm_l = p.arm_amp * std::sin(phi + kPi);
    double arm_r = p.arm_amp * std::sin(phi);
    double elb_l = 0.25 + p.elbow_amp * std::max(0.0, std::sin(phi + kPi + 0.5));
    double elb_r = 0.25 + p.elbow_amp * std::max(0.0, std::sin(phi + 0.5));

    Vec3 l_hip = pelvis + Vec3{0, -0.04, p.hip_w / 2};
    Vec3 r_hip = pelvis + Vec3{0, -0.04, -p.hip_w / 2};
    Vec3 l_knee = l_hip + p.thigh * sag(hip_l);
    Vec3 r_knee = r_hip + p.thigh * sag(hip_r);
    Vec3 l_ankle = l_knee + p.shin * sag(hip_l - knee_l);
    Vec3 r_ankle = r_knee + p.shin * sag(hip_r - knee_r);
    Vec3 l_foot = l_ankle + Vec3{p.foot_len * std::cos(0.3 * (hip_l - knee_l)), -0.03, 0};
    Vec3 r_foot = r_ankle + Vec3{p.foot_len * std::cos(0.3 * (hip_r - knee_r)), -0.03, 0};

    Vec3 l_collar = neck + Vec3{0, -0.04, p.shoulder_w * 0.25};
    Vec3 r_collar = neck + Vec3{0, -0.04, -p.shoulder_w * 0.25};
    Vec3 l_shoulder = neck + Vec3{0, -0.05, p.shoulder_w / 2};
    Vec3 r_shoulder = neck + Vec3{0, -0.05, -p.shoulder_w / 2};
    Vec3 l_elbow = l_shoulder + p.upper_arm * sag(arm_l);
    Vec3 r_elbow = r_shoulder + p.upper_arm * sag(arm_r);
    Vec3 l_wrist = l_elbow + p.forearm * sag(arm_l + elb_l);
    Vec3 r_wrist = r_elbow + p.forearm * sag(arm_r + elb_r);
    Vec3 l_hand = l_wrist + p.hand_len * sag(arm_l + elb_l);
    Vec3 r_hand = r_wrist + p.hand_len * sag(arm_r + elb_r);

    j[0] = pelvis;
    j[1] = l_hip;
    j[2] = r_hip;
    j[3] = pelvis + 0.25 * p.torso_len * up;
    j[4] = l_knee;
    j[5] = r_knee;
    j[6] = pelvis + 0.5 * p.torso_len * up;
    j[7] = l_ankle;
    j[8] = r_ankle;
    j[9] = pelvis + 0.75 * p.torso_len * up;
    j[10] = l_foot;
    j[11] = r_foot;
    j[12] = neck;
    j[13] = l_collar;
    j[14] = r_collar;
    j[15] = head;
    j[16] = l_shoulder;
    j[17] = r_shoulder;
    j[18] = l_elbow;
    j[19] = r_elbow;
    j[20] = l_wrist;
    j[21] = r_wrist;
    j[22] = l_hand;
    j[23] = r_hand;
    return j;
}

struct Bone {
    int a, b;
    int radius_kind; // 0 limb, 1 torso, 2 head
};

const std::array<Bone, 19> kBones = {{
    {0, 12, 1},  // torso
    {12, 15, 2}, // head (thick end treated as capsule)
    {1, 2, 0},   // hip bar
    {1, 4, 0},
    {4, 7, 0},
    {7, 10, 0},
    {2, 5, 0},
    {5, 8, 0},
    {8, 11, 0},
    {16, 17, 0}, // shoulder bar
    {13, 16, 0},
    {14, 17, 0},
    {16, 18, 0},
    {18, 20, 0},
    {20, 22, 0},
    {17, 19, 0},
    {19, 21, 0},
    {21, 23, 0},
    {12, 15, 0}, // neck line
}};

void rasterize_capsule(std::vector<float>& mask, double x0, double y0, double x1, double y1,
                       double r) {
    double px_x = (kXMax - kXMin) / (kFrameW - 1);
    double px_y = (kYMax - kYMin) / (kFrameH - 1);
    auto col_of = [&](double x) { return (x - kXMin) / (kXMax - kXMin) * (kFrameW - 1); };
    auto row_of = [&](double y) { return (1.0 - (y - kYMin) / (kYMax - kYMin)) * (kFrameH - 1); };
    int c0 = std::max(0, static_cast<int>(std::floor(col_of(std::min(x0, x1) - r))));
    int c1 = std::min(kFrameW - 1, static_cast<int>(std::ceil(col_of(std::max(x0, x1) + r))));
    int r0 = std::max(0, static_cast<int>(std::floor(row_of(std::max(y0, y1) + r))));
    int r1 = std::min(kFrameH - 1, static_cast<int>(std::ceil(row_of(std::min(y0, y1) - r))));
    double vx = x1 - x0, vy = y1 - y0;
    double len2 = vx * vx + vy * vy;
    for (int row = r0; row <= r1; ++row) {
        double wy = kYMin + (1.0 - static_cast<double>(row) / (kFrameH - 1)) * (kYMax - kYMin);
        for (int col = c0; col <= c1; ++col) {
            double wx = kXMin + static_cast<double>(col) / (kFrameW - 1) * (kXMax - kXMin);
            double t = len2 > 0 ? ((wx - x0) * vx + (wy - y0) * vy) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            double dx = wx - (x0 + t * vx), dy = wy - (y0 + t * vy);
            if (dx * dx + dy * dy <= r * r) mask[static_cast<size_t>(row) * kFrameW + col] = 1.f;
        }
    }
    (void)px_x;
    (void)px_y;
}

Vec3 to_voxel(const Vec3& cam) {
    return {(cam.x - kXMin) / (kXMax - kXMin) * 15.0,
            (1.0 - (cam.y - kYMin) / (kYMax - kYMin)) * 15.0,
            (cam.z - kZMin) / (kZMax - kZMin) * 15.0};
}

} // namespace

void synth_generate(const SynthConfig& config) {
    if (config.num_ids < 2) throw ConfigError("synth: need at least 2 identities");
    if (config.frames < 8) throw ConfigError("synth: need at least 8 frames per sequence");
    if (config.seqs_per_id < 1) throw ConfigError("synth: seqs_per_id must be positive");
    if (config.views.empty()) throw ConfigError("synth: views list is empty");

    std::error_code ec;
    fs::create_directories(config.out, ec);
    if (ec || !fs::is_directory(config.out))
        throw DataError("synth: cannot create output directory " + config.out.string());

    Rng master(config.seed);

    // global mesh map C_true: sparse convex rows over the 88 keypoints
    Rng crng = master.child("ctrue");
    HostArray c_true;
    c_true.shape = {kMeshVertices, kKeypoints};
    c_true.data.assign(static_cast<size_t>(kMeshVertices) * kKeypoints, 0.f);
    for (int v = 0; v < kMeshVertices; ++v) {
        int a = static_cast<int>(crng.uniform_index(kKeypoints));
        int b = a, c = a;
        while (b == a) b = static_cast<int>(crng.uniform_index(kKeypoints));
        while (c == a || c == b) c = static_cast<int>(crng.uniform_index(kKeypoints));
        double w0 = -std::log(std::max(crng.uniform(), 1e-12));
        double w1 = -std::log(std::max(crng.uniform(), 1e-12));
        double w2 = -std::log(std::max(crng.uniform(), 1e-12));
        double tot = w0 + w1 + w2;
        float* row = c_true.data.data() + static_cast<size_t>(v) * kKeypoints;
        row[a] = static_cast<float>(w0 / tot);
        row[b] = static_cast<float>(w1 / tot);
        row[c] = static_cast<float>(w2 / tot);
    }
    write_mg3d(config.out / "C_true.mg3d", c_true);

    {
        std::ofstream manifest(config.out / "manifest.txt");
        manifest << "num_ids=" << config.num_ids << "\n"
                 << "seqs_per_id=" << config.seqs_per_id << "\n"
                 << "frames=" << config.frames << "\n"
                 << "seed=" << config.seed << "\n";
        manifest << "views=";
        for (size_t i = 0; i < config.views.size(); ++i)
            manifest << (i ? "," : "") << config.views[i];
        manifest << "\n";
    }

    for (int id = 0; id < config.num_ids; ++id) {
        Rng id_rng = master.child("identity", static_cast<uint64_t>(id));
        WalkerParams walker = draw_walker(id_rng);

        char id_name[16];
        std::snprintf(id_name, sizeof(id_name), "%04d", id);
        for (int s = 0; s < config.seqs_per_id; ++s) {
            Rng seq_rng =
                master.child("sequence", static_cast<uint64_t>(id) * 100000u +
                                             static_cast<uint64_t>(s));
            double phase0 = seq_rng.uniform(0.0, 2 * kPi);
            const std::string& view = config.views[static_cast<size_t>(s) % config.views.size()];
            double theta = std::stod(view) * kPi / 180.0;
            double ct = std::cos(theta), st = std::sin(theta);

            char seq_name[16];
            std::snprintf(seq_name, sizeof(seq_name), "seq%02d", s);
            fs::path dir = config.out / id_name / "nm" / view / seq_name;
            fs::create_directories(dir, ec);
            if (ec) throw DataError("synth: cannot create " + dir.string());

            HostArray joints{{config.frames, kJoints, 3}, {}};
            HostArray markers{{config.frames, kMarkers, 3}, {}};
            HostArray mesh{{config.frames, kMeshVertices, 3}, {}};
            joints.data.resize(static_cast<size_t>(config.frames) * kJoints * 3);
            markers.data.resize(static_cast<size_t>(config.frames) * kMarkers * 3);
            mesh.data.resize(static_cast<size_t>(config.frames) * kMeshVertices * 3);

            for (int t = 0; t < config.frames; ++t) {
                double phi = phase0 + 2 * kPi * walker.freq * t;
                auto world = pose_walker(walker, phi);

                // camera frame: rotate about the vertical axis by the view angle
                std::array<Vec3, kJoints> cam;
                for (int jj = 0; jj < kJoints; ++jj) {
                    const Vec3& w = world[static_cast<size_t>(jj)];
                    cam[static_cast<size_t>(jj)] = {w.x * ct + w.z * st, w.y,
                                                    -w.x * st + w.z * ct};
                }

                std::vector<float> mask(static_cast<size_t>(kFrameH) * kFrameW, 0.f);
                for (const auto& bone : kBones) {
                    double r = bone.radius_kind == 0
                                   ? walker.limb_r
                                   : (bone.radius_kind == 1 ? walker.torso_r : walker.head_r);
                    const Vec3& a = cam[static_cast<size_t>(bone.a)];
                    const Vec3& b = cam[static_cast<size_t>(bone.b)];
                    rasterize_capsule(mask, a.x, a.y, b.x, b.y, r);
                }
                ImageU8 img;
                img.width = kFrameW;
                img.height = kFrameH;
                img.pixels.resize(mask.size());
                for (size_t i = 0; i < mask.size(); ++i)
                    img.pixels[i] = mask[i] > 0.5f ? 255 : 0;
                char frame_name[32];
                std::snprintf(frame_name, sizeof(frame_name), "frame_%04d.png", t);
                write_png_gray(dir / frame_name, img);

                std::array<std::array<double, 3>, kKeypoints> kp{};
                for (int jj = 0; jj < kJoints; ++jj) {
                    Vec3 v = to_voxel(cam[static_cast<size_t>(jj)]);
                    kp[static_cast<size_t>(jj)] = {v.x, v.y, v.z};
                    size_t off = (static_cast<size_t>(t) * kJoints + jj) * 3;
                    joints.data[off + 0] = static_cast<float>(v.x);
                    joints.data[off + 1] = static_cast<float>(v.y);
                    joints.data[off + 2] = static_cast<float>(v.z);
                }
                for (int m = 0; m < kMarkers; ++m) {
                    const auto& idx = walker.marker_idx[static_cast<size_t>(m)];
                    const auto& w = walker.marker_w[static_cast<size_t>(m)];
                    std::array<double, 3> pos{};
                    for (int axis = 0; axis < 3; ++axis)
                        pos[static_cast<size_t>(axis)] =
                            w[0] * kp[static_cast<size_t>(idx[0])][static_cast<size_t>(axis)] +
                            w[1] * kp[static_cast<size_t>(idx[1])][static_cast<size_t>(axis)] +
                            w[2] * kp[static_cast<size_t>(idx[2])][static_cast<size_t>(axis)];
                    kp[static_cast<size_t>(kJoints + m)] = pos;
                    size_t off = (static_cast<size_t>(t) * kMarkers + m) * 3;
                    markers.data[off + 0] = static_cast<float>(pos[0]);
                    markers.data[off + 1] = static_cast<float>(pos[1]);
                    markers.data[off + 2] = static_cast<float>(pos[2]);
                }
                for (int v = 0; v < kMeshVertices; ++v) {
                    const float* row = c_true.data.data() + static_cast<size_t>(v) * kKeypoints;
                    double mx = 0, my = 0, mz = 0;
                    for (int q = 0; q < kKeypoints; ++q) {
                        if (row[q] == 0.f) continue;
                        mx += row[q] * kp[static_cast<size_t>(q)][0];
                        my += row[q] * kp[static_cast<size_t>(q)][1];
                        mz += row[q] * kp[static_cast<size_t>(q)][2];
                    }
                    size_t off = (static_cast<size_t>(t) * kMeshVertices + v) * 3;
                    mesh.data[off + 0] = static_cast<float>(mx);
                    mesh.data[off + 1] = static_cast<float>(my);
                    mesh.data[off + 2] = static_cast<float>(mz);
                }
            }
            write_mg3d(dir / "joints.mg3d", joints);
            write_mg3d(dir / "markers.mg3d", markers);
            write_mg3d(dir / "mesh.mg3d", mesh);
        }
    }
}

} // namespace meshgait
