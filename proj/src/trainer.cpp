#include "meshgait/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

namespace meshgait {

void SgdOptimizer::zero_grad(ParamStore& store) {
    for (auto& [name, t] : store.params()) t.zero_grad();
}

void SgdOptimizer::step(ParamStore& store) {
    for (auto& [name, t] : store.params()) {
        auto& v = velocity_[name];
        if (v.empty()) v.assign(static_cast<size_t>(t.numel()), 0.f);
        float* p = t.data();
        const float* g = t.grad_allocated() ? t.grad() : nullptr;
        int64_t n = t.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            float vi = momentum_ * v[static_cast<size_t>(i)] + (g ? g[i] : 0.f);
            v[static_cast<size_t>(i)] = vi;
            p[i] -= lr_ * vi;
        }
    }
}

std::vector<SeqEmbedding> embed_sequences(MeshGaitModel& model,
                                          const std::vector<const SeqRecord*>& records,
                                          SequenceCache& cache) {
    NoGradGuard no_grad;
    std::vector<SeqEmbedding> out;
    out.reserve(records.size());
    for (auto* rec : records) {
        auto seq = cache.get(rec->path);
        const auto& sil = seq->silhouette;
        Tensor x = Tensor::from_data({1, sil.t, 1, kFrameH, kFrameW}, sil.frames);
        ForwardOptions opts;
        opts.with_keypoints = false; // recognition path only
        opts.with_mesh = false;
        ForwardOutput fo = model.forward(x, /*training=*/false, opts);
        SeqEmbedding e;
        e.embedding = fo.embeddings.vec();
        e.identity = rec->identity;
        e.view = rec->view;
        e.seq_id = rec->seq_id;
        out.push_back(std::move(e));
    }
    return out;
}

Trainer::Trainer(const RunConfig& rc) : rc_(rc) {
    index_ = DatasetIndex::scan(rc_.data_root);
    if (index_.identities.size() < 2)
        throw DataError("training needs at least 2 identities, found " +
                        std::to_string(index_.identities.size()));

    // hold out the lexicographically last sequences of each identity
    for (int id : index_.identities) {
        auto seqs = index_.of_identity(id);
        std::sort(seqs.begin(), seqs.end(),
                  [](const SeqRecord* a, const SeqRecord* b) { return a->seq_id < b->seq_id; });
        int hold = std::min<int>(rc_.holdout_seqs, static_cast<int>(seqs.size()) - 1);
        if (hold < 0) hold = 0;
        size_t split = seqs.size() - static_cast<size_t>(hold);
        for (size_t i = 0; i < seqs.size(); ++i)
            (i < split ? train_records_ : holdout_records_).push_back(seqs[i]);
    }

    rc_.model.num_classes = static_cast<int>(index_.identities.size());
    model_ = std::make_unique<MeshGaitModel>(rc_.model, rc_.seed);
    opt_ = std::make_unique<SgdOptimizer>(rc_.optim.lr, rc_.optim.momentum);
}

EvalReport Trainer::evaluate() {
    if (!holdout_records_.empty()) {
        auto probes = embed_sequences(*model_, holdout_records_, cache_);
        auto gallery = embed_sequences(*model_, train_records_, cache_);
        return evaluate_split(probes, gallery);
    }
    std::vector<const SeqRecord*> all;
    for (auto& rec : index_.sequences) all.push_back(&rec);
    auto emb = embed_sequences(*model_, all, cache_);
    return evaluate_embeddings(emb, "gait3d", rc_.seed);
}

TrainResult Trainer::train() {
    std::error_code ec;
    std::filesystem::create_directories(rc_.out_dir, ec);
    if (ec || !std::filesystem::is_directory(rc_.out_dir))
        throw DataError("cannot create output directory " + rc_.out_dir.string());

    int64_t start_step = 0;
    if (!rc_.resume.empty()) {
        Checkpoint ckpt = load_checkpoint(rc_.resume);
        restore(*model_, ckpt, false, &opt_->state());
        start_step = static_cast<int64_t>(ckpt.step);
    }

    std::filesystem::path log_path = rc_.out_dir / "train_log.csv";
    bool fresh_log = start_step == 0 || !std::filesystem::exists(log_path);
    std::ofstream log(log_path, fresh_log ? std::ios::out : std::ios::app);
    if (!log) throw DataError("cannot write " + log_path.string());
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(rc_.model.fingerprint()));
    if (fresh_log) {
        log << "# fingerprint=" << fp << "\n";
        log << "step,lr,triplet,triplet_weighted,ce,ce_weighted,joint,joint_weighted,mesh,"
               "mesh_weighted,total\n";
    }

    std::cout << "model parameters: " << model_->param_count()
              << " (mesh regressor: " << model_->regressor_param_count() << ")\n";
    std::cout << "train sequences: " << train_records_.size()
              << ", held out: " << holdout_records_.size() << "\n";

    // learning-rate schedule state for resumed runs
    float lr = rc_.optim.lr;
    for (int64_t m : rc_.optim.milestones)
        if (m <= start_step) lr *= rc_.optim.lr_decay;
    opt_->set_lr(lr);

    TrainResult result;
    result.log_path = log_path;
    const LossWeights& w = rc_.model.loss;

    for (int64_t step = start_step + 1; step <= rc_.max_steps; ++step) {
        if (std::find(rc_.optim.milestones.begin(), rc_.optim.milestones.end(), step) !=
            rc_.optim.milestones.end())
            opt_->set_lr(opt_->lr() * rc_.optim.lr_decay);

        Rng step_rng = Rng(rc_.seed).child("batch", static_cast<uint64_t>(step));
        Batch batch = sample_batch(step_rng, rc_.batch, index_, cache_, &train_records_);

        Tensor x = Tensor::from_data({batch.b, batch.t, 1, kFrameH, kFrameW}, batch.frames);
        ForwardOutput fo = model_->forward(x, /*training=*/true);
        LossTerms lt = compute_losses(fo.embeddings, fo.logits, fo.keypoints, fo.mesh, batch, w);

        double total = lt.total.item();
        if (!std::isfinite(total)) {
            std::ofstream dump(rc_.out_dir / "nan_dump.txt");
            dump << "step=" << step << "\n";
            for (auto& sid : batch.seq_ids) dump << sid << "\n";
            throw Error("non-finite loss at step " + std::to_string(step) +
                        "; offending batch written to nan_dump.txt");
        }

        // backward() zeroes and fills the gradients of everything in the graph;
        // params outside it keep an empty grad buffer and coast on momentum
        lt.total.backward();
        opt_->step(model_->store());

        double tr = lt.triplet.item(), ce = lt.ce.item(), jt = lt.joint.item(),
               ms = lt.mesh.item();
        char row[256];
        std::snprintf(row, sizeof(row),
                      "%lld,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n",
                      static_cast<long long>(step), opt_->lr(), tr, w.triplet * tr, ce, w.ce * ce,
                      jt, w.joint * jt, ms, w.mesh * ms, total);
        log << row;

        if (step == start_step + 1) {
            result.first_total = total;
            result.first_joint = jt;
        }
        result.last_total = total;
        result.last_joint = jt;
        result.final_step = step;

        if (step % rc_.eval_interval == 0 || step == rc_.max_steps) {
            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.mgck", static_cast<long long>(step));
            save_checkpoint(rc_.out_dir / name, snapshot(*model_, static_cast<uint64_t>(step),
                                                         &opt_->state()));
            result.final_checkpoint = rc_.out_dir / name;
            std::cout << "step " << step << "  total " << total << "  joint " << jt << "\n";
        }
    }
    log.flush();

    result.final_eval = evaluate();
    write_report_csv(rc_.out_dir / "eval.csv", result.final_eval, rc_.model.fingerprint());
    std::cout << "final eval (" << result.final_eval.protocol
              << "): rank1=" << result.final_eval.rank1 << " rank5=" << result.final_eval.rank5
              << " mAP=" << result.final_eval.map << " mINP=" << result.final_eval.minp << "\n";
    return result;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& axis,
                                      const std::filesystem::path& out_csv) {
    struct Setting {
        std::string label;
        std::function<void(RunConfig&)> apply;
    };
    std::vector<Setting> settings;
    if (axis == "fusion") {
        for (std::string s : {"attention", "add", "concat"})
            settings.push_back({s, [s](RunConfig& rc) { rc.model.fusion = s; }});
    } else if (axis == "representation") {
        settings.push_back({"partial", [](RunConfig& rc) { rc.model.mesh_branch = false; }});
        settings.push_back({"full", [](RunConfig& rc) { rc.model.mesh_branch = true; }});
    } else if (axis == "featdim") {
        for (int d : {4, 8, 16})
            settings.push_back(
                {std::to_string(d), [d](RunConfig& rc) { rc.model.heatmap_feat_dim = d; }});
    } else {
        throw ConfigError("unknown ablation axis '" + axis +
                          "' (fusion|representation|featdim)");
    }

    int64_t budget = std::max<int64_t>(
        1, static_cast<int64_t>(
               std::llround(base.ablate_budget_fraction * static_cast<double>(base.max_steps))));

    std::error_code ec;
    if (out_csv.has_parent_path()) std::filesystem::create_directories(out_csv.parent_path(), ec);
    std::ofstream csv(out_csv);
    if (!csv) throw DataError("cannot write " + out_csv.string());
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(base.model.fingerprint()));
    csv << "# fingerprint=" << fp << "\n";
    csv << "setting,R-1,R-5,mAP,mINP\n";

    std::vector<AblationRow> rows;
    for (auto& s : settings) {
        RunConfig rc = base;
        s.apply(rc);
        rc.max_steps = budget;
        rc.eval_interval = budget;
        rc.out_dir = base.out_dir / ("ablate_" + axis) / s.label;
        std::cout << "=== ablate " << axis << " = " << s.label << " (" << budget << " steps)\n";
        Trainer trainer(rc);
        TrainResult res = trainer.train();
        char row[160];
        std::snprintf(row, sizeof(row), "%s,%.4f,%.4f,%.4f,%.4f\n", s.label.c_str(),
                      res.final_eval.rank1, res.final_eval.rank5, res.final_eval.map,
                      res.final_eval.minp);
        csv << row;
        csv.flush();
        rows.push_back({s.label, trainer.run_config(), res.final_eval});
    }
    return rows;
}

} // namespace meshgait
