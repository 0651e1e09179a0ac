#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>

#include "meshgait/checkpoint.hpp"
#include "meshgait/image.hpp"
#include "meshgait/obj_io.hpp"
#include "meshgait/trainer.hpp"

using namespace meshgait;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// model construction for commands that start from a checkpoint
std::unique_ptr<MeshGaitModel> model_from_checkpoint(const std::string& ckpt_path,
                                                     std::string config_path, bool force,
                                                     RunConfig* rc_out = nullptr) {
    if (!std::filesystem::exists(ckpt_path))
        throw DataError("checkpoint not found: " + ckpt_path);
    if (config_path.empty()) {
        auto sibling = std::filesystem::path(ckpt_path).parent_path() / "config_used.cfg";
        if (!std::filesystem::exists(sibling))
            throw ConfigError("no --config given and " + sibling.string() + " not found");
        config_path = sibling.string();
    }
    RunConfig rc = run_config_from(KvConfig::parse_file(config_path));
    auto model = std::make_unique<MeshGaitModel>(rc.model, rc.seed);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    restore(*model, ckpt, force);
    if (rc_out) *rc_out = rc;
    return model;
}

int cmd_synth(int ids, int seqs, int frames, uint64_t seed, const std::string& out,
              const std::string& views) {
    SynthConfig cfg;
    cfg.num_ids = ids;
    cfg.seqs_per_id = seqs;
    cfg.frames = frames;
    cfg.seed = seed;
    cfg.out = out;
    if (!views.empty()) cfg.views = split_csv(views);
    synth_generate(cfg);
    std::cout << "wrote " << ids << " identities x " << seqs << " sequences x " << frames
              << " frames to " << out << "\n";
    std::cout << "total sequences: " << ids * seqs << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
    RunConfig rc = run_config_from(KvConfig::parse_file(config_path));
    if (!resume.empty()) rc.resume = resume;
    if (rc.data_root.empty()) throw ConfigError("config must set data.root");
    if (rc.out_dir.empty()) throw ConfigError("config must set out.dir");
    Trainer trainer(rc);

    std::error_code ec;
    std::filesystem::create_directories(trainer.run_config().out_dir, ec);
    std::ofstream used(trainer.run_config().out_dir / "config_used.cfg");
    used << run_config_to_string(trainer.run_config());
    used.close();

    TrainResult result = trainer.train();
    std::cout << "finished at step " << result.final_step << "; log: " << result.log_path.string()
              << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& config, const std::string& data,
             const std::string& protocol, uint64_t seed, std::string out, bool force) {
    RunConfig rc;
    auto model = model_from_checkpoint(ckpt, config, force, &rc);
    DatasetIndex index = DatasetIndex::scan(data);
    if (index.sequences.empty()) throw DataError("no sequences under " + data);
    SequenceCache cache;
    std::vector<const SeqRecord*> all;
    for (auto& rec : index.sequences) all.push_back(&rec);
    auto embeddings = embed_sequences(*model, all, cache);
    EvalReport report = evaluate_embeddings(embeddings, protocol, seed);
    if (out.empty()) out = "eval_" + protocol + ".csv";
    write_report_csv(out, report, model->config().fingerprint());
    std::cout << "protocol " << report.protocol << " seed " << report.seed << ": rank1 "
              << report.rank1 << "  rank5 " << report.rank5 << "  mAP " << report.map << "  mINP "
              << report.minp << "\n";
    if (!report.per_view_rank1.empty()) {
        std::cout << "per-view rank1:";
        for (auto& [v, r1] : report.per_view_rank1) std::cout << "  " << v << "=" << r1;
        std::cout << "\n";
    }
    std::cout << "report written to " << out << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& ckpt, const std::string& config,
                    const std::string& seq_dir, const std::string& out_dir, int frame,
                    const std::string& faces_path, bool force) {
    auto model = model_from_checkpoint(ckpt, config, force);
    LoadedSequence seq = load_sequence(seq_dir);
    const auto& sil = seq.silhouette;

    std::error_code ec;
    std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out, ec);
    if (ec || !std::filesystem::is_directory(out))
        throw DataError("cannot create output directory " + out_dir);

    std::vector<std::array<int, 3>> faces;
    if (!faces_path.empty()) faces = read_topology(faces_path);

    NoGradGuard no_grad;
    Tensor x = Tensor::from_data({1, sil.t, 1, kFrameH, kFrameW}, sil.frames);
    ForwardOptions opts;
    opts.with_mesh = model->config().mesh_branch;
    ForwardOutput fo = model->forward(x, false, opts);
    if (!fo.mesh.defined())
        std::cout << "note: mesh branch disabled in config; exporting keypoints only\n";
    int k = model->config().keypoints();
    int m = model->config().mesh_vertices;

    int t0 = 0, t1 = sil.t;
    if (frame >= 0) {
        if (frame >= sil.t)
            throw ConfigError("--frame " + std::to_string(frame) + " out of range [0," +
                              std::to_string(sil.t) + ")");
        t0 = frame;
        t1 = frame + 1;
    }
    const int scale = 8;
    for (int t = t0; t < t1; ++t) {
        char name[64];
        if (fo.mesh.defined()) {
            std::snprintf(name, sizeof(name), "mesh_%04d.obj", t);
            write_obj(out / name, fo.mesh.data() + static_cast<int64_t>(t) * m * 3, m,
                      faces.empty() ? nullptr : &faces);
        }
        std::snprintf(name, sizeof(name), "keypoints_%04d.mg3d", t);
        HostArray kp;
        kp.shape = {k, 3};
        const float* src = fo.keypoints.data() + static_cast<int64_t>(t) * k * 3;
        kp.data.assign(src, src + k * 3);
        write_mg3d(out / name, kp);

        // keypoints projected over the upscaled silhouette
        ImageU8 base;
        base.width = kFrameW;
        base.height = kFrameH;
        base.pixels.resize(static_cast<size_t>(kFrameH) * kFrameW);
        for (int i = 0; i < kFrameH * kFrameW; ++i) {
            float v = sil.frames[static_cast<size_t>(t) * kFrameH * kFrameW + i];
            base.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(96.f * v);
        }
        ImageU8 proj = upscale_nearest(base, scale);
        float wmax = static_cast<float>(model->config().heatmap_w - 1);
        float hmax = static_cast<float>(model->config().heatmap_h - 1);
        for (int q = 0; q < k; ++q) {
            float vx = src[q * 3 + 0], vy = src[q * 3 + 1];
            int col = static_cast<int>(std::lround(vx / wmax * (proj.width - 1)));
            int row = static_cast<int>(std::lround(vy / hmax * (proj.height - 1)));
            bool is_joint = q < model->config().joints;
            draw_square(proj, row, col, is_joint ? 2 : 1, is_joint ? 255 : 176);
        }
        std::snprintf(name, sizeof(name), "proj_%04d.png", t);
        write_png_gray(out / name, proj);
    }
    std::cout << "exported frames [" << t0 << "," << t1 << ") of " << sil.seq_id << " to "
              << out_dir << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& axis, std::string out_csv) {
    RunConfig base = run_config_from(KvConfig::parse_file(config_path));
    if (base.data_root.empty()) throw ConfigError("config must set data.root");
    if (base.out_dir.empty()) throw ConfigError("config must set out.dir");
    if (out_csv.empty()) out_csv = (base.out_dir / ("ablate_" + axis + ".csv")).string();
    run_ablation(base, axis, out_csv);
    std::cout << "ablation table written to " << out_csv << "\n";
    return 0;
}

int cmd_bench(const std::string& ckpt, const std::string& config, const std::string& data, int n,
              int passes, std::string out_csv, bool force) {
    if (n <= 0) throw ConfigError("--n must be positive");
    if (passes < 5) passes = 5;
    RunConfig rc;
    auto model = model_from_checkpoint(ckpt, config, force, &rc);
    DatasetIndex index = DatasetIndex::scan(data);
    if (static_cast<int>(index.sequences.size()) < n)
        throw DataError("dataset has " + std::to_string(index.sequences.size()) +
                        " sequences, need " + std::to_string(n));

    SequenceCache cache;
    std::vector<Tensor> inputs;
    for (int i = 0; i < n; ++i) {
        auto seq = cache.get(index.sequences[static_cast<size_t>(i)].path);
        inputs.push_back(Tensor::from_data({1, seq->silhouette.t, 1, kFrameH, kFrameW},
                                           seq->silhouette.frames));
    }

    NoGradGuard no_grad;
    auto run_pass = [&](bool with_mesh) {
        ForwardOptions opts;
        opts.with_keypoints = true;
        opts.with_mesh = with_mesh;
        auto t0 = std::chrono::steady_clock::now();
        for (auto& x : inputs) {
            ForwardOutput fo = model->forward(x, false, opts);
            (void)fo;
        }
        auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count() / n;
    };

    auto median_of = [&](bool with_mesh) {
        run_pass(with_mesh); // warm-up
        std::vector<double> times;
        for (int i = 0; i < passes; ++i) times.push_back(run_pass(with_mesh));
        std::sort(times.begin(), times.end());
        return times[times.size() / 2];
    };

    double on_ms = median_of(true);
    double off_ms = median_of(false);

    if (out_csv.empty()) out_csv = "bench.csv";
    std::ofstream csv(out_csv);
    if (!csv) throw DataError("cannot write " + out_csv);
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(model->config().fingerprint()));
    csv << "# fingerprint=" << fp << "\n";
    csv << "mesh_on_ms,mesh_off_ms,sequences,passes\n";
    char row[128];
    std::snprintf(row, sizeof(row), "%.4f,%.4f,%d,%d\n", on_ms, off_ms, n, passes);
    csv << row;
    std::cout << "per-sequence inference (median of " << passes << " passes over " << n
              << " sequences):\n"
              << "  mesh head on:  " << on_ms << " ms\n"
              << "  mesh head off: " << off_ms << " ms\n"
              << "report written to " << out_csv << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mesh-Gait: multi-modal gait recognition from silhouettes"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic walker dataset");
    int ids = 16, seqs = 4, frames = 40;
    uint64_t synth_seed = 1;
    std::string synth_out, synth_views;
    synth->add_option("--ids", ids, "number of identities")->required();
    synth->add_option("--seqs", seqs, "sequences per identity")->required();
    synth->add_option("--frames", frames, "frames per sequence")->required();
    synth->add_option("--seed", synth_seed, "generator seed")->required();
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--views", synth_views, "comma list of view angles (default 000,090)");

    auto* train = app.add_subcommand("train", "train a model from a config file");
    std::string train_config, train_resume;
    train->add_option("--config", train_config, "flat key=value config file")->required();
    train->add_option("--resume", train_resume, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "probe-gallery evaluation of a checkpoint");
    std::string eval_ckpt, eval_config, eval_data, eval_protocol = "gait3d", eval_out;
    uint64_t eval_seed = 1;
    bool eval_force = false;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--config", eval_config, "config file (default: sibling config_used.cfg)");
    eval->add_option("--data", eval_data, "dataset root")->required();
    eval->add_option("--protocol", eval_protocol, "gait3d | cross_view");
    eval->add_option("--seed", eval_seed, "probe selection seed");
    eval->add_option("--out", eval_out, "report CSV path");
    eval->add_flag("--force", eval_force, "ignore config fingerprint mismatch");

    auto* rec = app.add_subcommand("reconstruct", "export meshes/keypoints for a sequence");
    std::string rec_ckpt, rec_config, rec_seq, rec_out, rec_faces;
    int rec_frame = -1;
    bool rec_force = false;
    rec->add_option("--checkpoint", rec_ckpt, "checkpoint file")->required();
    rec->add_option("--config", rec_config, "config file (default: sibling config_used.cfg)");
    rec->add_option("--seq-dir", rec_seq, "sequence directory")->required();
    rec->add_option("--out", rec_out, "output directory")->required();
    rec->add_option("--frame", rec_frame, "export a single frame index");
    rec->add_option("--faces", rec_faces, "topology file with 1-based face index triples");
    rec->add_flag("--force", rec_force, "ignore config fingerprint mismatch");

    auto* abl = app.add_subcommand("ablate", "run an ablation axis at reduced budget");
    std::string abl_config, abl_axis, abl_out;
    abl->add_option("--config", abl_config, "base training config")->required();
    abl->add_option("--axis", abl_axis, "fusion | representation | featdim")->required();
    abl->add_option("--out", abl_out, "comparison CSV path");

    auto* bench = app.add_subcommand("bench", "inference timing with and without the mesh head");
    std::string bench_ckpt, bench_config, bench_data, bench_out;
    int bench_n = 100, bench_passes = 5;
    bool bench_force = false;
    bench->add_option("--checkpoint", bench_ckpt, "checkpoint file")->required();
    bench->add_option("--config", bench_config, "config file (default: sibling config_used.cfg)");
    bench->add_option("--data", bench_data, "dataset root")->required();
    bench->add_option("--n", bench_n, "number of sequences");
    bench->add_option("--passes", bench_passes, "timing passes (>= 5)");
    bench->add_option("--out", bench_out, "report CSV path");
    bench->add_flag("--force", bench_force, "ignore config fingerprint mismatch");

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth(ids, seqs, frames, synth_seed, synth_out, synth_views);
        if (*train) return cmd_train(train_config, train_resume);
        if (*eval)
            return cmd_eval(eval_ckpt, eval_config, eval_data, eval_protocol, eval_seed, eval_out,
                            eval_force);
        if (*rec)
            return cmd_reconstruct(rec_ckpt, rec_config, rec_seq, rec_out, rec_frame, rec_faces,
                                   rec_force);
        if (*abl) return cmd_ablate(abl_config, abl_axis, abl_out);
        if (*bench)
            return cmd_bench(bench_ckpt, bench_config, bench_data, bench_n, bench_passes,
                             bench_out, bench_force);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
