#pragma once

// SGD training for classifiers and group models, and finite-difference
// gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mdcnn/data.hpp"
#include "mdcnn/errors.hpp"
#include "mdcnn/net.hpp"
#include "mdcnn/parallel.hpp"
#include "mdcnn/sequence.hpp"

namespace mdcnn {

/// splitmix64 step; used to derive independent seeds from one master seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (stream * 0xD1B54A32D192ED03ull);
    return splitmix64(s);
}

struct SgdConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    int epochs = 10;
    int batch_size = 16;
    std::uint64_t seed = 0;
    int threads = 1;
    /// When false the convex (wFM) weights stay fixed and only linear head
    /// parameters move.
    bool train_convex = true;

    void validate() const {
        if (!(learning_rate > 0.0)) throw DomainError("sgd: learning_rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("sgd: momentum must lie in [0, 1)");
        if (epochs < 0) throw DomainError("sgd: epochs must be non-negative");
        if (batch_size < 1) throw DomainError("sgd: batch_size must be positive");
        if (threads < 1) throw DomainError("sgd: threads must be positive");
    }
};

/// v <- mu v + g; theta <- theta - lr v; then raw convex entries are floored.
class SgdOptimizer {
public:
    SgdOptimizer(const ParamLayout& layout, const SgdConfig& cfg) : layout_(layout), cfg_(cfg), velocity_(layout.size(), 0.0) {
        if (!cfg.train_convex)
            for (const auto& s : layout.segments())
                if (s.kind == SegmentKind::Convex)
                    for (std::size_t i = s.offset; i < s.offset + s.length; ++i) frozen_.push_back(i);
    }

    void step(std::vector<double>& params, std::vector<double> grad) {
        for (std::size_t i : frozen_) grad[i] = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            velocity_[i] = cfg_.momentum * velocity_[i] + grad[i];
            params[i] -= cfg_.learning_rate * velocity_[i];
        }
        floor_convex(layout_, params);
    }

private:
    const ParamLayout& layout_;
    SgdConfig cfg_;
    std::vector<double> velocity_;
    std::vector<std::size_t> frozen_;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;      // mean sample loss, evaluated before each step
    double accuracy = 0.0;  // classifiers only
    std::size_t fd_fallbacks = 0;
};

struct TrainResult {
    std::vector<double> params;
    std::vector<EpochStats> history;
};

namespace detail {

inline void require_finite(double loss, int epoch, std::size_t sample) {
    if (!std::isfinite(loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", sample " + std::to_string(sample));
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

}  // namespace detail

/// Softmax cross-entropy training. Starts from `init` or from
/// net.init_params(sgd.seed); the epoch shuffles draw from a stream derived from
/// the same seed. Per-sample gradients are reduced in sample order.
inline TrainResult train_classifier(const Network& net, const SequenceDataset& data, const SgdConfig& sgd,
                                    std::optional<std::vector<double>> init = std::nullopt) {
    sgd.validate();
    if (net.config().head == HeadKind::None) throw DomainError("train_classifier: network has no head");
    for (const auto& e : data.entries) {
        if (e.label < 0 || e.label >= net.config().num_classes)
            throw DomainError("train_classifier: label " + std::to_string(e.label) + " outside [0, " +
                              std::to_string(net.config().num_classes) + ")");
        net.check_input(e.sequence);
    }
    TrainResult result;
    result.params = init ? std::move(*init) : net.init_params(sgd.seed);
    net.check_params(result.params);
    SgdOptimizer opt(net.layout(), sgd);
    std::mt19937_64 rng(derive_seed(sgd.seed, 1));
    const std::size_t n = data.size();

    for (int epoch = 0; epoch < sgd.epochs; ++epoch) {
        const auto order = detail::shuffled(n, rng);
        EpochStats stats{epoch + 1, 0.0, 0.0, 0};
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(sgd.batch_size)) {
            const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(sgd.batch_size), n - start);
            std::vector<LossGradient> parts(count);
            parallel_for(count, sgd.threads, [&](std::size_t i) {
                const auto& e = data.entries[order[start + i]];
                parts[i] = net.classification_gradient(result.params, e.sequence, e.label);
            });
            std::vector<double> grad(result.params.size(), 0.0);
            for (std::size_t i = 0; i < count; ++i) {
                detail::require_finite(parts[i].loss, epoch + 1, order[start + i]);
                stats.loss += parts[i].loss;
                stats.fd_fallbacks += parts[i].fd_fallbacks;
                if (argmax(parts[i].logits) == data.entries[order[start + i]].label) ++correct;
                for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += parts[i].gradient[k];
            }
            for (double& g : grad) g /= static_cast<double>(count);
            opt.step(result.params, std::move(grad));
        }
        if (n > 0) {
            stats.loss /= static_cast<double>(n);
            stats.accuracy = static_cast<double>(correct) / static_cast<double>(n);
        }
        result.history.push_back(stats);
    }
    return result;
}

struct Evaluation {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

inline Evaluation evaluate_classifier(const Network& net, std::span<const double> params, const SequenceDataset& data,
                                      int threads = 1) {
    const int k = net.config().num_classes;
    Evaluation ev;
    ev.confusion.assign(static_cast<std::size_t>(k), std::vector<std::size_t>(static_cast<std::size_t>(k), 0));
    std::vector<std::vector<double>> logits(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) { logits[i] = net.logits(params, data.entries[i].sequence); });
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int label = data.entries[i].label;
        if (label < 0 || label >= k) throw DomainError("evaluate: label " + std::to_string(label) + " out of range");
        const int pred = argmax(logits[i]);
        ++ev.confusion[static_cast<std::size_t>(label)][static_cast<std::size_t>(pred)];
        if (pred == label) ++correct;
        ev.mean_loss += log_sum_exp_loss(logits[i], label);
    }
    if (!data.entries.empty()) {
        ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
        ev.mean_loss /= static_cast<double>(data.size());
    }
    return ev;
}

/// Next-step prediction fit: one SGD step per sequence (batch of one), epoch
/// order shuffled from a stream derived from sgd.seed.
inline TrainResult train_group_model(const Network& net, const SequenceDataset& sequences, const SgdConfig& sgd,
                                     std::optional<std::vector<double>> init = std::nullopt) {
    sgd.validate();
    for (const auto& e : sequences.entries) {
        net.check_input(e.sequence);
        if (e.sequence.length() < 2)
            throw DomainError("train_group_model: sequence length " + std::to_string(e.sequence.length()) +
                              " is below 2");
    }
    TrainResult result;
    result.params = init ? std::move(*init) : net.init_params(sgd.seed);
    net.check_params(result.params);
    SgdOptimizer opt(net.layout(), sgd);
    std::mt19937_64 rng(derive_seed(sgd.seed, 2));
    for (int epoch = 0; epoch < sgd.epochs; ++epoch) {
        const auto order = detail::shuffled(sequences.size(), rng);
        EpochStats stats{epoch + 1, 0.0, 0.0, 0};
        for (std::size_t idx : order) {
            LossGradient g = net.group_gradient(result.params, sequences.entries[idx].sequence);
            detail::require_finite(g.loss, epoch + 1, idx);
            stats.loss += g.loss;
            stats.fd_fallbacks += g.fd_fallbacks;
            opt.step(result.params, std::move(g.gradient));
        }
        if (!sequences.entries.empty()) stats.loss /= static_cast<double>(sequences.size());
        result.history.push_back(stats);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Gradient checks.

struct GradCheckOptions {
    double h = 1e-5;
    double tolerance = 1e-5;  // on |ad - fd| / max(1, |fd|)
    int batch = 2;
    int length = 12;
    std::optional<AdjointFault> fault;
};

struct GroupDeviation {
    std::string layer;
    double max_abs = 0.0;
    double max_rel = 0.0;
    std::size_t worst_index = 0;
};

struct GradCheckReport {
    std::vector<GroupDeviation> groups;  // in layout order
    double max_rel = 0.0;
    std::string worst_layer;
    std::string worst_parameter;
    std::size_t num_params = 0;
    std::size_t fd_fallbacks = 0;
    bool passed = true;
};

/// Inputs for gradient checks: in_channels independent noisy rotating (SPD) or
/// great-circle (sphere) channels per sequence, labels uniform over classes.
inline SequenceDataset random_batch(const NetConfig& cfg, int count, int length, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> rate(0.05, 0.5);
    std::uniform_int_distribution<int> label(0, std::max(cfg.num_classes, 1) - 1);
    SequenceDataset ds{cfg.manifold, cfg.dim, cfg.in_channels, {}};
    for (int n = 0; n < count; ++n) {
        ManifoldSequence seq(cfg.manifold, cfg.dim, cfg.in_channels, length);
        for (int c = 0; c < cfg.in_channels; ++c) {
            const ManifoldSequence ch = cfg.manifold == ManifoldKind::Spd
                                            ? detail::rotating_spd_sequence(cfg.dim, length, rate(rng), 0.1, rng)
                                            : detail::great_circle_sequence(cfg.dim, length, rate(rng), 0.1, rng);
            for (int s = 0; s < length; ++s) seq.at(c, s) = ch.at(0, s);
        }
        ds.add(std::move(seq), cfg.head == HeadKind::None ? kNoLabel : label(rng));
    }
    return ds;
}

/// Compares reverse-mode gradients of the mean batch loss (cross-entropy with a
/// head, next-step loss without) against central differences of the plain
/// forward pass.
inline GradCheckReport check_gradients(const Network& net, const std::vector<double>& params,
                                       const SequenceDataset& batch, const GradCheckOptions& opts = {}) {
    net.check_params(params);
    const bool classify = net.config().head != HeadKind::None;
    const std::size_t np = params.size();
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(batch.size(), 1));
    auto plain_loss = [&](const std::vector<double>& p) {
        double acc = 0.0;
        for (const auto& e : batch.entries)
            acc += classify ? net.classification_loss(p, e.sequence, e.label) : net.group_loss(p, e.sequence);
        return acc * inv;
    };

    GradCheckReport report;
    report.num_params = np;
    std::vector<double> ad(np, 0.0);
    const AdjointFault* fault = opts.fault ? &*opts.fault : nullptr;
    for (const auto& e : batch.entries) {
        const LossGradient g = classify ? net.classification_gradient(params, e.sequence, e.label, fault)
                                        : net.group_gradient(params, e.sequence, fault);
        report.fd_fallbacks += g.fd_fallbacks;
        for (std::size_t i = 0; i < np; ++i) ad[i] += g.gradient[i] * inv;
    }

    std::vector<double> p = params;
    for (const auto& seg : net.layout().segments()) {
        if (report.groups.empty() || report.groups.back().layer != seg.layer) report.groups.push_back({seg.layer});
        GroupDeviation& grp = report.groups.back();
        for (std::size_t i = seg.offset; i < seg.offset + seg.length; ++i) {
            p[i] = params[i] + opts.h;
            const double up = plain_loss(p);
            p[i] = params[i] - opts.h;
            const double down = plain_loss(p);
            p[i] = params[i];
            const double fd = (up - down) / (2.0 * opts.h);
            const double abs_err = std::abs(ad[i] - fd);
            const double rel = abs_err / std::max(1.0, std::abs(fd));
            grp.max_abs = std::max(grp.max_abs, abs_err);
            if (rel >= grp.max_rel) {
                grp.max_rel = rel;
                grp.worst_index = i;
            }
            if (rel >= report.max_rel) {
                report.max_rel = rel;
                report.worst_layer = seg.layer;
                report.worst_parameter = seg.name + "[" + std::to_string(i - seg.offset) + "]";
            }
        }
    }
    report.passed = report.max_rel <= opts.tolerance;
    return report;
}

/// Random initialization and random batch drawn from `seed`.
inline GradCheckReport check_gradients(const NetConfig& cfg, std::uint64_t seed, const GradCheckOptions& opts = {}) {
    Network net(cfg);
    std::vector<double> params = net.init_params(derive_seed(seed, 10));
    // Move away from the near-uniform initialization so every weight matters.
    std::mt19937_64 rng(derive_seed(seed, 11));
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);
    for (const auto& s : net.layout().segments())
        for (std::size_t i = s.offset; i < s.offset + s.length; ++i)
            params[i] += s.kind == SegmentKind::Convex ? jitter(rng) * std::abs(params[i]) : jitter(rng);
    floor_convex(net.layout(), params);
    const SequenceDataset batch = random_batch(cfg, opts.batch, opts.length, derive_seed(seed, 12));
    return check_gradients(net, params, batch, opts);
}

}  // namespace mdcnn
