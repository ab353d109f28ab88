#include "convctx/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace convctx {

double global_grad_norm(const std::vector<NamedParam>& params) {
    double sq = 0.0;
    for (const NamedParam& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    return std::sqrt(sq);
}

double clip_gradients(std::vector<NamedParam>& params, double threshold) {
    if (threshold <= 0.0) throw ContractError("clip_gradients: threshold must be positive");
    const double norm = global_grad_norm(params);
    if (norm > threshold) {
        const double s = threshold / norm;
        for (NamedParam& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double& g : p.tensor.grad_mut()) g = quantized(g * s);
        }
    }
    return norm;
}

void AdaDeltaState::init(const std::vector<NamedParam>& params) {
    avg_sq_grad.clear();
    avg_sq_delta.clear();
    for (const NamedParam& p : params) {
        avg_sq_grad.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
        avg_sq_delta.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
    }
}

void adadelta_step(std::vector<NamedParam>& params, AdaDeltaState& state) {
    if (!state.initialized()) state.init(params);
    if (state.avg_sq_grad.size() != params.size()) {
        throw DimensionError("adadelta_step: state tracks " +
                             std::to_string(state.avg_sq_grad.size()) +
                             " parameters, model has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].tensor;
        std::vector<double>& eg2 = state.avg_sq_grad[i];
        std::vector<double>& ed2 = state.avg_sq_delta[i];
        if (static_cast<std::int64_t>(eg2.size()) != t.size()) {
            throw DimensionError("adadelta_step: accumulator size " +
                                 std::to_string(eg2.size()) + " vs parameter '" +
                                 params[i].name + "' " + shape_str(t.shape()));
        }
        if (!t.has_grad()) continue;
        auto grad = t.grad();
        auto vals = t.values();
        for (std::int64_t j = 0; j < t.size(); ++j) {
            const double g = grad[static_cast<std::size_t>(j)];
            double& g2 = eg2[static_cast<std::size_t>(j)];
            double& d2 = ed2[static_cast<std::size_t>(j)];
            g2 = state.rho * g2 + (1.0 - state.rho) * g * g;
            const double dx = -std::sqrt(d2 + state.eps) / std::sqrt(g2 + state.eps) * g;
            d2 = state.rho * d2 + (1.0 - state.rho) * dx * dx;
            vals[static_cast<std::size_t>(j)] =
                quantized(vals[static_cast<std::size_t>(j)] + state.lr * dx);
        }
    }
}

namespace {

double percentile(std::vector<double> sorted, double q) {
    if (sorted.empty()) return 0.0;
    const auto n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * n));
    if (rank < 1) rank = 1;
    if (rank > sorted.size()) rank = sorted.size();
    return sorted[rank - 1];
}

std::int64_t batch_tokens(const Batch& b) {
    std::int64_t n = 0;
    for (int len : b.target_lengths) n += len - 1;  // predictions per sequence
    return n;
}

}  // namespace

EpochStats train_epoch(Model& model, const std::vector<Batch>& batches,
                       AdaDeltaState& state, double clip, double dropout, Rng& rng,
                       int epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    if (batches.empty()) return stats;
    std::vector<double> norms;
    double loss_weighted = 0.0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        model.zero_grads();
        Tape tape;
        Tensor loss = model.loss(batches[i], dropout, &rng);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                               std::to_string(i) + ": loss is non-finite (last grad norm " +
                               std::to_string(norms.empty() ? 0.0 : norms.back()) + ")");
        }
        tape.backward(loss);
        const double norm = clip_gradients(model.params(), clip);
        if (!std::isfinite(norm)) {
            throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                               std::to_string(i) + ": gradient norm is non-finite");
        }
        norms.push_back(norm);
        adadelta_step(model.params(), state);
        const std::int64_t toks = batch_tokens(batches[i]);
        loss_weighted += value * static_cast<double>(toks);
        stats.tokens += toks;
        stats.batches += 1;
    }
    stats.mean_loss = loss_weighted / static_cast<double>(stats.tokens);
    std::sort(norms.begin(), norms.end());
    stats.grad_p10 = percentile(norms, 10.0);
    stats.grad_p50 = percentile(norms, 50.0);
    stats.grad_p90 = percentile(norms, 90.0);
    return stats;
}

double dataset_loss(const Model& model, const std::vector<Batch>& batches) {
    NoGradGuard guard;
    double weighted = 0.0;
    std::int64_t tokens = 0;
    for (const Batch& b : batches) {
        const std::int64_t toks = batch_tokens(b);
        weighted += model.loss(b).item() * static_cast<double>(toks);
        tokens += toks;
    }
    if (tokens == 0) throw ContractError("dataset_loss: no tokens");
    return weighted / static_cast<double>(tokens);
}

double token_accuracy(const Model& model, const std::vector<Batch>& batches) {
    NoGradGuard guard;
    std::int64_t correct = 0, total = 0;
    for (const Batch& batch : batches) {
        EncodedBatch enc = model.encode(batch);
        std::vector<std::vector<int>> prefixes;
        for (int b = 0; b < batch.size(); ++b) {
            const std::vector<int>& tgt = batch.targets[static_cast<std::size_t>(b)];
            const int len = batch.target_lengths[static_cast<std::size_t>(b)];
            prefixes.emplace_back(tgt.begin(), tgt.begin() + (len - 1));
        }
        Tensor logits = model.decode_step_logits(enc, prefixes);
        const int U = logits.extent(1), V = logits.extent(2);
        auto lv = logits.values();
        for (int b = 0; b < batch.size(); ++b) {
            const std::vector<int>& tgt = batch.targets[static_cast<std::size_t>(b)];
            const int len = batch.target_lengths[static_cast<std::size_t>(b)];
            for (int u = 0; u + 1 < len; ++u) {
                const double* row = lv.data() +
                                    (static_cast<std::int64_t>(b) * U + u) * V;
                int best = 0;
                for (int v = 1; v < V; ++v) {
                    if (row[v] > row[best]) best = v;
                }
                if (best == tgt[static_cast<std::size_t>(u + 1)]) ++correct;
                ++total;
            }
        }
    }
    if (total == 0) throw ContractError("token_accuracy: no tokens");
    return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Checkpoint sets
// ---------------------------------------------------------------------------

std::string checkpoint_path(const std::string& dir, int epoch) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt-%05d.ckpt", epoch);
    return (fs::path(dir) / name).string();
}

std::vector<std::pair<int, std::string>> list_checkpoints(const std::string& dir) {
    std::vector<std::pair<int, std::string>> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        int epoch = 0;
        if (std::sscanf(name.c_str(), "ckpt-%d.ckpt", &epoch) == 1) {
            out.emplace_back(epoch, entry.path().string());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& set) {
    if (set.empty()) throw InputError("average_checkpoints: empty set");
    const Checkpoint& first = set.front();
    for (const Checkpoint& c : set) {
        if (c.params.size() != first.params.size()) {
            const std::size_t k = std::min(c.params.size(), first.params.size());
            const std::string& name = c.params.size() > first.params.size()
                                          ? c.params[k].name
                                          : first.params[k].name;
            throw InputError("average_checkpoints: parameter '" + name +
                             "' missing from some inputs");
        }
        for (std::size_t i = 0; i < c.params.size(); ++i) {
            if (c.params[i].name != first.params[i].name) {
                throw InputError("average_checkpoints: parameter '" + c.params[i].name +
                                 "' does not match '" + first.params[i].name + "'");
            }
            if (c.params[i].tensor.shape() != first.params[i].tensor.shape()) {
                throw InputError("average_checkpoints: parameter '" + c.params[i].name +
                                 "' shape " + shape_str(c.params[i].tensor.shape()) +
                                 " vs " + shape_str(first.params[i].tensor.shape()));
            }
        }
    }
    Checkpoint out;
    out.config_text = first.config_text;
    out.provenance = "average of " + std::to_string(set.size()) + " checkpoints";
    const double inv = 1.0 / static_cast<double>(set.size());
    for (std::size_t i = 0; i < first.params.size(); ++i) {
        std::vector<double> mean(static_cast<std::size_t>(first.params[i].tensor.size()), 0.0);
        for (const Checkpoint& c : set) {
            auto v = c.params[i].tensor.values();
            for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += v[j];
        }
        for (double& v : mean) v *= inv;
        out.params.push_back(
            {first.params[i].name, Tensor::from(first.params[i].tensor.shape(), std::move(mean))});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(Model& model, const Dataset& data, const RunConfig& cfg, Rng& rng)
    : model_(model), data_(data), cfg_(cfg), rng_(rng) {
    state_.rho = cfg.train.rho;
    state_.eps = cfg.train.eps;
    state_.lr = cfg.train.lr;
    metrics_path_ = cfg.train.metrics_log.empty()
                        ? (fs::path(cfg.train.checkpoint_dir) / "metrics.log").string()
                        : cfg.train.metrics_log;
}

void Trainer::append_metrics(const EpochStats& s) const {
    std::ofstream out(metrics_path_, std::ios::app);
    if (!out) throw InputError("cannot write metrics log '" + metrics_path_ + "'");
    char line[256];
    std::snprintf(line, sizeof line,
                  "epoch=%d mean_loss=%.6f grad_p10=%.6f grad_p50=%.6f grad_p90=%.6f "
                  "batches=%d tokens=%lld\n",
                  s.epoch, s.mean_loss, s.grad_p10, s.grad_p50, s.grad_p90, s.batches,
                  static_cast<long long>(s.tokens));
    out << line;
}

EpochStats Trainer::run_epoch(int epoch) {
    std::vector<int> order(data_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    if (cfg_.train.shuffle) rng_.shuffle(order);
    std::vector<Batch> batches = make_batches(data_, order, cfg_.train.batch_size);
    EpochStats stats = train_epoch(model_, batches, state_, cfg_.train.clip,
                                   cfg_.model.dropout, rng_, epoch);
    append_metrics(stats);
    if (stats.batches > 0) {
        char prov[64];
        std::snprintf(prov, sizeof prov, "epoch %d", epoch);
        save_checkpoint(checkpoint_path(cfg_.train.checkpoint_dir, epoch),
                        snapshot(model_, serialize_config(cfg_), prov));
        if (cfg_.train.checkpoint_retention > 0) {
            for (const auto& [e, path] : list_checkpoints(cfg_.train.checkpoint_dir)) {
                if (e <= epoch - cfg_.train.checkpoint_retention) fs::remove(path);
            }
        }
    }
    return stats;
}

std::vector<EpochStats> Trainer::run() {
    fs::create_directories(cfg_.train.checkpoint_dir);
    std::vector<EpochStats> all;
    for (int epoch = 1; epoch <= cfg_.train.epochs; ++epoch) {
        all.push_back(run_epoch(epoch));
    }
    return all;
}

}  // namespace convctx
