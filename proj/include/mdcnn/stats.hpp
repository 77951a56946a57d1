#pragma once

// Two-group permutation test on fitted model parameters.
//
// Protocol: pretrain one model on the union of both groups, fine-tune a copy on
// each group and take sigma = ||theta_1 - theta_2||. Repeat the fine-tuning for
// size-preserving random relabelings to get the null samples. Every fit starts
// from the same pretrained checkpoint with the same fine-tuning seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mdcnn/errors.hpp"
#include "mdcnn/net.hpp"
#include "mdcnn/parallel.hpp"
#include "mdcnn/params.hpp"
#include "mdcnn/train.hpp"

namespace mdcnn {

/// Canonical comparison vector: normalized convex weights w (not raw sqrt(w))
/// and linear parameters as stored, in layout order.
inline std::vector<double> comparison_vector(const ParamLayout& layout, std::span<const double> params) {
    std::vector<double> out;
    out.reserve(params.size());
    for (const auto& s : layout.segments()) {
        if (s.kind == SegmentKind::Convex) {
            const auto w = ConvexWeights::normalize(params.subspan(s.offset, s.length));
            out.insert(out.end(), w.begin(), w.end());
        } else {
            out.insert(out.end(), params.begin() + static_cast<std::ptrdiff_t>(s.offset),
                       params.begin() + static_cast<std::ptrdiff_t>(s.offset + s.length));
        }
    }
    return out;
}

inline double model_distance(const ModelParams& a, const ModelParams& b) {
    if (a.index_map != b.index_map) throw DomainError("model_distance: models have different index maps");
    if (a.values.size() != b.values.size()) throw DomainError("model_distance: parameter counts differ");
    const Network net(config_from_index_map(a.index_map));
    const auto va = comparison_vector(net.layout(), a.values);
    const auto vb = comparison_vector(net.layout(), b.values);
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += (va[i] - vb[i]) * (va[i] - vb[i]);
    return std::sqrt(acc);
}

inline double model_distance(const Network& net, std::span<const double> a, std::span<const double> b) {
    net.check_params(a);
    net.check_params(b);
    const auto va = comparison_vector(net.layout(), a);
    const auto vb = comparison_vector(net.layout(), b);
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += (va[i] - vb[i]) * (va[i] - vb[i]);
    return std::sqrt(acc);
}

struct PermutationConfig {
    int n_permutations = 200;
    double alpha = 0.05;
    std::uint64_t seed = 0;
    int pretrain_epochs = 1;
    int finetune_epochs = 1;
    int threads = 1;

    void validate() const {
        if (n_permutations < 1) throw DomainError("permutation test: n_permutations must be at least 1");
        if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("permutation test: alpha must lie in (0, 1)");
        if (pretrain_epochs < 0 || finetune_epochs < 0) throw DomainError("permutation test: negative epoch count");
        if (threads < 1) throw DomainError("permutation test: threads must be positive");
    }
};

struct GroupTestResult {
    double sigma_observed = 0.0;
    std::vector<double> null_samples;
    std::vector<std::uint64_t> seeds;  // per permutation
    double p_value = 1.0;

    bool significant(double alpha) const { return p_value < alpha; }
};

/// (1 + #{null >= observed}) / (1 + n).
inline double permutation_p_value(double observed, std::span<const double> null) {
    std::size_t ge = 0;
    for (double v : null)
        if (v >= observed) ++ge;
    return static_cast<double>(1 + ge) / static_cast<double>(1 + null.size());
}

/// Size-preserving relabeling of n_a + n_b items: returns the indices of the
/// new group A (sorted); the rest form group B.
inline std::vector<std::size_t> permuted_group(std::size_t n_a, std::size_t n_b, std::uint64_t seed) {
    std::vector<std::size_t> idx(n_a + n_b);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n_a);
    std::sort(idx.begin(), idx.end());
    return idx;
}

namespace detail {

inline SequenceDataset subset(const SequenceDataset& all, const std::vector<std::size_t>& members) {
    SequenceDataset out{all.kind, all.dim, all.channels, {}};
    for (std::size_t i : members) out.entries.push_back(all.entries[i]);
    return out;
}

}  // namespace detail

class PermutationTest {
public:
    PermutationTest(Network net, SgdConfig sgd, PermutationConfig perm)
        : net_(std::move(net)), sgd_(sgd), perm_(perm) {
        sgd_.validate();
        perm_.validate();
    }

    const std::vector<double>& pretrained() const { return pretrained_; }

    GroupTestResult run(const SequenceDataset& group_a, const SequenceDataset& group_b) {
        if (group_a.entries.empty() || group_b.entries.empty())
            throw DomainError("permutation test: both groups must be non-empty");
        if (group_a.kind != group_b.kind || group_a.dim != group_b.dim || group_a.channels != group_b.channels)
            throw DomainError("permutation test: groups live on different manifolds");
        union_ = SequenceDataset{group_a.kind, group_a.dim, group_a.channels, {}};
        for (const auto& e : group_a.entries) union_.entries.push_back(e);
        for (const auto& e : group_b.entries) union_.entries.push_back(e);
        const std::size_t n_a = group_a.size(), n_b = group_b.size();

        SgdConfig pre = sgd_;
        pre.epochs = perm_.pretrain_epochs;
        pre.seed = derive_seed(perm_.seed, 100);
        pretrained_ = train_group_model(net_, union_, pre).params;

        GroupTestResult result;
        std::vector<std::size_t> truth(n_a);
        std::iota(truth.begin(), truth.end(), std::size_t{0});
        result.sigma_observed = sigma(truth, "observed labeling");

        const auto n = static_cast<std::size_t>(perm_.n_permutations);
        std::uint64_t state = perm_.seed;
        for (std::size_t k = 0; k < n; ++k) result.seeds.push_back(splitmix64(state));
        result.null_samples.assign(n, 0.0);
        parallel_for(n, perm_.threads, [&](std::size_t k) {
            result.null_samples[k] = sigma(permuted_group(n_a, n_b, result.seeds[k]), "permutation " + std::to_string(k));
        });
        result.p_value = permutation_p_value(result.sigma_observed, result.null_samples);
        return result;
    }

private:
    /// Fine-tunes the pretrained model on `members_a` and on the complement.
    double sigma(const std::vector<std::size_t>& members_a, const std::string& what) const {
        std::vector<char> in_a(union_.size(), 0);
        for (std::size_t i : members_a) in_a[i] = 1;
        std::vector<std::size_t> members_b;
        for (std::size_t i = 0; i < union_.size(); ++i)
            if (!in_a[i]) members_b.push_back(i);
        SgdConfig fine = sgd_;
        fine.epochs = perm_.finetune_epochs;
        fine.seed = derive_seed(perm_.seed, 200);
        try {
            const auto ta = train_group_model(net_, detail::subset(union_, members_a), fine, pretrained_).params;
            const auto tb = train_group_model(net_, detail::subset(union_, members_b), fine, pretrained_).params;
            return model_distance(net_, ta, tb);
        } catch (const TrainingError& e) {
            throw TrainingError(what + ": " + e.what());
        }
    }

    Network net_;
    SgdConfig sgd_;
    PermutationConfig perm_;
    SequenceDataset union_;
    std::vector<double> pretrained_;
};

inline GroupTestResult permutation_test(const SequenceDataset& group_a, const SequenceDataset& group_b,
                                        const NetConfig& cfg, const SgdConfig& sgd, const PermutationConfig& perm) {
    return PermutationTest(Network(cfg), sgd, perm).run(group_a, group_b);
}

// ---------------------------------------------------------------------------
// Reporting.

struct NullHistogram {
    std::vector<double> edges;  // bins + 1 edges
    std::vector<std::size_t> counts;
    double marker = 0.0;  // observed sigma
};

inline constexpr int kHistogramBins = 30;

/// Equal-width bins over [min, max] of the null samples; the last bin is closed.
/// A degenerate range puts everything in the first bin.
inline NullHistogram null_summary(const GroupTestResult& r, int bins = kHistogramBins) {
    NullHistogram h;
    h.marker = r.sigma_observed;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    if (r.null_samples.empty()) {
        h.edges.assign(static_cast<std::size_t>(bins) + 1, 0.0);
        return h;
    }
    const auto [lo_it, hi_it] = std::minmax_element(r.null_samples.begin(), r.null_samples.end());
    const double lo = *lo_it, hi = *hi_it;
    const double width = (hi - lo) / bins;
    for (int b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + width * b);
    for (double v : r.null_samples) {
        int b = width > 0.0 ? static_cast<int>((v - lo) / width) : 0;
        b = std::clamp(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

namespace detail {
inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace detail

/// index,seed,sigma_hat rows, then a summary row `summary,<sigma>,<p_value>`.
inline std::string result_csv(const GroupTestResult& r) {
    std::string out = "index,seed,sigma_hat\n";
    for (std::size_t k = 0; k < r.null_samples.size(); ++k)
        out += std::to_string(k) + "," + std::to_string(r.seeds[k]) + "," + detail::fmt17(r.null_samples[k]) + "\n";
    out += "summary," + detail::fmt17(r.sigma_observed) + "," + detail::fmt17(r.p_value) + "\n";
    return out;
}

/// bin,lower,upper,count rows, then `marker,<sigma>,,`.
inline std::string histogram_csv(const NullHistogram& h) {
    std::string out = "bin,lower,upper,count\n";
    for (std::size_t b = 0; b < h.counts.size(); ++b)
        out += std::to_string(b) + "," + detail::fmt17(h.edges[b]) + "," + detail::fmt17(h.edges[b + 1]) + "," +
               std::to_string(h.counts[b]) + "\n";
    out += "marker," + detail::fmt17(h.marker) + ",,\n";
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DomainError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw DomainError("write to '" + path + "' failed");
}

}  // namespace mdcnn
