#pragma once

#include <string>
#include <vector>

#include "convctx/checkpoint.hpp"
#include "convctx/config.hpp"
#include "convctx/model.hpp"

namespace convctx {

// ---------------------------------------------------------------------------
// Gradient clipping and AdaDelta
// ---------------------------------------------------------------------------

double global_grad_norm(const std::vector<NamedParam>& params);

// Scales every gradient by threshold / norm when the global L2 norm exceeds
// the threshold (direction preserved). Returns the pre-clip norm.
double clip_gradients(std::vector<NamedParam>& params, double threshold);

struct AdaDeltaState {
    double rho = 0.95;
    double eps = 1e-6;
    double lr = 1.0;  // fixed multiplier; nothing in this module mutates it
    std::vector<std::vector<double>> avg_sq_grad;   // E[g^2] per parameter
    std::vector<std::vector<double>> avg_sq_delta;  // E[dx^2] per parameter

    bool initialized() const { return !avg_sq_grad.empty(); }
    void init(const std::vector<NamedParam>& params);
};

// E[g^2] <- rho E[g^2] + (1-rho) g^2
// dx     = -sqrt(E[dx^2]+eps) / sqrt(E[g^2]+eps) * g
// E[dx^2]<- rho E[dx^2] + (1-rho) dx^2
// x      <- x + lr dx
void adadelta_step(std::vector<NamedParam>& params, AdaDeltaState& state);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    int batches = 0;
    std::int64_t tokens = 0;
    double mean_loss = 0.0;  // token-weighted mean NLL
    double grad_p10 = 0.0;   // pre-clip global-norm percentiles
    double grad_p50 = 0.0;
    double grad_p90 = 0.0;
};

// One pass: per batch, forward loss -> backward -> clip -> adadelta step.
// A non-finite loss aborts with the batch index and the last gradient norm.
EpochStats train_epoch(Model& model, const std::vector<Batch>& batches,
                       AdaDeltaState& state, double clip, double dropout, Rng& rng,
                       int epoch = 0);

// Evaluation helpers (no dropout, no gradients).
double dataset_loss(const Model& model, const std::vector<Batch>& batches);
double token_accuracy(const Model& model, const std::vector<Batch>& batches);

// ---------------------------------------------------------------------------
// Checkpoint set handling
// ---------------------------------------------------------------------------

std::string checkpoint_path(const std::string& dir, int epoch);
// (epoch, path) pairs sorted by epoch, oldest first.
std::vector<std::pair<int, std::string>> list_checkpoints(const std::string& dir);

// Arithmetic mean per parameter, accumulated in double precision. All inputs
// must agree on parameter names and shapes; the offender is named otherwise.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& set);

// ---------------------------------------------------------------------------
// Trainer: epoch loop + metrics log + per-epoch checkpoints with retention.
// ---------------------------------------------------------------------------

class Trainer {
public:
    // rng drives shuffling and dropout; pass the same master stream that
    // initialized the model for a fully reproducible run.
    Trainer(Model& model, const Dataset& data, const RunConfig& cfg, Rng& rng);

    // Runs cfg.train.epochs epochs; returns per-epoch stats.
    std::vector<EpochStats> run();

    const AdaDeltaState& state() const { return state_; }

private:
    EpochStats run_epoch(int epoch);
    void append_metrics(const EpochStats& s) const;

    Model& model_;
    const Dataset& data_;
    RunConfig cfg_;
    Rng& rng_;
    AdaDeltaState state_;
    std::string metrics_path_;
};

}  // namespace convctx
