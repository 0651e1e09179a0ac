#ifndef MESHGAIT_TRAINER_HPP
#define MESHGAIT_TRAINER_HPP

#include <map>
#include <memory>

#include "meshgait/checkpoint.hpp"
#include "meshgait/config.hpp"
#include "meshgait/metrics.hpp"

namespace meshgait {

class SgdOptimizer {
public:
    SgdOptimizer(float lr, float momentum) : lr_(lr), momentum_(momentum) {}

    void zero_grad(ParamStore& store);
    void step(ParamStore& store);

    float lr() const { return lr_; }
    void set_lr(float lr) { lr_ = lr; }
    std::map<std::string, std::vector<float>>& state() { return velocity_; }

private:
    float lr_;
    float momentum_;
    std::map<std::string, std::vector<float>> velocity_;
};

// Eval-mode, no-grad embedding of whole sequences (all frames, batch of one).
std::vector<SeqEmbedding> embed_sequences(MeshGaitModel& model,
                                          const std::vector<const SeqRecord*>& records,
                                          SequenceCache& cache);

struct TrainResult {
    int64_t final_step = 0;
    double first_total = 0, last_total = 0;
    double first_joint = 0, last_joint = 0;
    EvalReport final_eval;
    std::filesystem::path log_path;
    std::filesystem::path final_checkpoint;
};

class Trainer {
public:
    explicit Trainer(const RunConfig& rc);

    TrainResult train();

    MeshGaitModel& model() { return *model_; }
    const RunConfig& run_config() const { return rc_; }
    const std::vector<const SeqRecord*>& train_records() const { return train_records_; }
    const std::vector<const SeqRecord*>& holdout_records() const { return holdout_records_; }

    // probes = held-out sequences, gallery = training sequences; falls back to
    // the gait3d protocol over everything when nothing is held out
    EvalReport evaluate();

private:
    RunConfig rc_;
    DatasetIndex index_;
    SequenceCache cache_;
    std::vector<const SeqRecord*> train_records_;
    std::vector<const SeqRecord*> holdout_records_;
    std::unique_ptr<MeshGaitModel> model_;
    std::unique_ptr<SgdOptimizer> opt_;
};

struct AblationRow {
    std::string label;
    RunConfig config; // the setting actually trained
    EvalReport eval;
};

// Trains every setting on the axis at the configured budget fraction and
// writes one table row per setting (columns R-1/R-5/mAP/mINP).
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& axis,
                                      const std::filesystem::path& out_csv);

} // namespace meshgait

#endif
