#pragma once

#include <string>
#include <vector>

#include "qunet/dataset.hpp"
#include "qunet/losses.hpp"
#include "qunet/model.hpp"

namespace qunet {

struct TrainConfig {
    int epochs = 40;
    int batch_size = 8;
    double lr = 1e-3;
    double bitwidth_lr = -1.0;  // < 0: share lr with the weights
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lambda = 0.25;
    uint64_t seed = 0;
    double smooth = 1e-5;
    std::string out_dir;  // when set, fit writes CSVs + best checkpoint here
};

// One Table-2 row.
struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_dice = 0;
    double val_accuracy = 0;
    double avg_bitwidth = 0;
};

// Per-epoch bitwidth/loss-component trace (the figure data).
struct TraceEpoch {
    int epoch = 0;
    std::vector<std::pair<std::string, double>> layer_bits;  // 23 (name, continuous bitwidth)
    double bce = 0;
    double dice = 0;
    double bitwidth_term = 0;  // lambda * avg bitwidth over the epoch's batches
};

struct FitResult {
    std::vector<EpochMetrics> history;
    std::vector<TraceEpoch> trace;
    std::string best_checkpoint;  // empty when out_dir is unset
    double best_val_dice = -1.0;
    int best_epoch = 0;
};

// Adaptive-moment gradient descent over all model parameters (weights,
// biases, per-layer bitwidths), fixed parameter order, float32 state.
class Adam {
public:
    Adam(QuantUNet<float>& model, const TrainConfig& cfg);
    void step();
    void zero_grad();
    int64_t steps() const { return t_; }

private:
    struct Slot {
        Var<float> param;
        Tensor<float> m, v;
        float lr;
    };
    std::vector<Slot> slots_;
    int64_t t_ = 0;
    float beta1_, beta2_, eps_;
};

struct TrainEpochStats {
    double bce = 0, dice = 0, bitwidth = 0;  // batch-size-weighted means
    double total() const;
};

struct ValStats {
    double bce = 0, dice_loss_v = 0, dice = 0, accuracy = 0;  // per-sample means
};

// One pass over the training split: per batch forward / L_total / backward /
// Adam step. Aborts on a non-finite loss naming the first offending batch.
TrainEpochStats train_epoch(QuantUNet<float>& model, const std::vector<Sample>& train,
                            const TrainConfig& cfg, int epoch, Adam& opt);

// Eval-mode metrics (no EMA updates, no parameter updates), averaged per
// sample; dice and accuracy on masks thresholded at 0.5.
ValStats validate(QuantUNet<float>& model, const std::vector<Sample>& val,
                  const TrainConfig& cfg);

// Full training run: per-epoch metrics + bitwidth trace, checkpoint whenever
// validation Dice improves, CSVs streamed to cfg.out_dir when set.
FitResult fit(QuantUNet<float>& model, const DataSplits& data, const TrainConfig& cfg);

// Self-describing checkpoint: text manifest (format version, config, layer
// table with shapes, b_param, running_max) + float32 little-endian weight
// blob in manifest order (kernel then bias per layer). Writes are atomic.
void save_checkpoint(const QuantUNet<float>& model, const std::string& path);
QuantUNet<float> load_checkpoint(const std::string& path);
// Overload that additionally requires the stored config to match; errors
// name the differing field.
QuantUNet<float> load_checkpoint(const std::string& path, const UNetConfig& expect);

}  // namespace qunet
