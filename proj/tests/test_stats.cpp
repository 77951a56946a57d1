#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mdcnn/data.hpp"
#include "mdcnn/stats.hpp"

using namespace mdcnn;

namespace {

NetConfig group_config() {
    NetConfig cfg;
    cfg.manifold = ManifoldKind::Sphere;
    cfg.dim = 8;
    cfg.blocks = NetConfig::parse_blocks("1:2:1");
    cfg.head = HeadKind::None;
    return cfg;
}

std::pair<SequenceDataset, SequenceDataset> small_groups(double effect, std::uint64_t seed) {
    GroupGenOptions o;
    o.n = 6;
    o.max_length = 20;
    o.effect = effect;
    o.seed = seed;
    return gen_group_sequences(o);
}

}  // namespace

TEST(ModelDistance, Examples) {
    NetConfig cfg;
    cfg.blocks = NetConfig::parse_blocks("1:2:2");
    const Network net(cfg);
    const auto a = net.init_params(1);
    EXPECT_EQ(model_distance(net, a, a), 0.0);
    auto b = a;
    b[net.layout().weight_offset() + 3] += 1.0;
    EXPECT_NEAR(model_distance(net, a, b), 1.0, 1e-15);
    const ModelParams ma = make_model_params(net, a), mb = make_model_params(net, b);
    EXPECT_NEAR(model_distance(ma, mb), 1.0, 1e-15);
}

TEST(ModelDistance, ComparesNormalizedConvexWeights) {
    NetConfig cfg = group_config();
    const Network net(cfg);
    const auto a = net.init_params(2);
    auto b = a;
    // Scaling a raw vector leaves its normalized weights unchanged.
    for (std::size_t i = 0; i < 3; ++i) b[i] *= 4.0;
    EXPECT_NEAR(model_distance(net, a, b), 0.0, 1e-15);
    // Flipping the sign of a raw entry leaves its weight unchanged as well.
    b[1] = -b[1];
    EXPECT_NEAR(model_distance(net, a, b), 0.0, 1e-15);
    const auto cv = comparison_vector(net.layout(), a);
    EXPECT_NEAR(cv[0] + cv[1] + cv[2], 1.0, 1e-15);
}

TEST(ModelDistance, IndexMapMismatch) {
    NetConfig c1, c2;
    c1.blocks = NetConfig::parse_blocks("1:1:1");
    c2.blocks = NetConfig::parse_blocks("1:1:1");
    c2.kernel = 2;
    const Network n1(c1), n2(c2);
    EXPECT_THROW(model_distance(make_model_params(n1, n1.init_params(1)), make_model_params(n2, n2.init_params(1))),
                 DomainError);
    EXPECT_THROW(model_distance(n1, n1.init_params(1), n2.init_params(1)), DomainError);
}

TEST(PValue, RankFormula) {
    std::vector<double> null(199);
    for (std::size_t i = 0; i < null.size(); ++i) null[i] = static_cast<double>(i) / 1000.0;
    EXPECT_DOUBLE_EQ(permutation_p_value(10.0, null), 1.0 / 200.0);
    EXPECT_DOUBLE_EQ(permutation_p_value(-1.0, null), 1.0);
    // Ties count against the observed value.
    EXPECT_DOUBLE_EQ(permutation_p_value(null[149], null), 51.0 / 200.0);
    EXPECT_DOUBLE_EQ(permutation_p_value(1.0, std::vector<double>{}), 1.0);
}

TEST(PermutedGroup, SizePreservingAndSeeded) {
    const auto g = permuted_group(5, 7, 3);
    EXPECT_EQ(g.size(), 5u);
    EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
    EXPECT_EQ(std::set<std::size_t>(g.begin(), g.end()).size(), 5u);
    for (std::size_t i : g) EXPECT_LT(i, 12u);
    EXPECT_EQ(g, permuted_group(5, 7, 3));
    EXPECT_NE(g, permuted_group(5, 7, 4));
}

TEST(PermutationTest, IdenticalGroupsGiveZeroSigma) {
    const auto [a, b] = small_groups(0.0, 1);
    SgdConfig sgd;
    PermutationConfig perm;
    perm.n_permutations = 5;
    perm.seed = 9;
    const GroupTestResult r = permutation_test(a, a, group_config(), sgd, perm);
    EXPECT_EQ(r.sigma_observed, 0.0);
    EXPECT_EQ(r.null_samples.size(), 5u);
    // Every null sample is at least zero, so the observed value ties or loses: p = 1.
    EXPECT_EQ(r.p_value, 1.0);
}

TEST(PermutationTest, ReproducibleAndThreadIndependent) {
    const auto [a, b] = small_groups(0.5, 2);
    SgdConfig sgd;
    PermutationConfig perm;
    perm.n_permutations = 6;
    perm.seed = 4;
    const GroupTestResult r1 = permutation_test(a, b, group_config(), sgd, perm);
    const GroupTestResult r2 = permutation_test(a, b, group_config(), sgd, perm);
    perm.threads = 3;
    const GroupTestResult r3 = permutation_test(a, b, group_config(), sgd, perm);
    EXPECT_EQ(result_csv(r1), result_csv(r2));
    EXPECT_EQ(result_csv(r1), result_csv(r3));
    EXPECT_GT(r1.sigma_observed, 0.0);
    std::set<std::uint64_t> seeds(r1.seeds.begin(), r1.seeds.end());
    EXPECT_EQ(seeds.size(), 6u);
    EXPECT_DOUBLE_EQ(r1.p_value, permutation_p_value(r1.sigma_observed, r1.null_samples));
}

TEST(PermutationTest, Errors) {
    const auto [a, b] = small_groups(0.0, 3);
    PermutationConfig perm;
    perm.n_permutations = 0;
    EXPECT_THROW(permutation_test(a, b, group_config(), SgdConfig{}, perm), DomainError);
    perm.n_permutations = 2;
    perm.alpha = 1.5;
    EXPECT_THROW(permutation_test(a, b, group_config(), SgdConfig{}, perm), DomainError);
    perm.alpha = 0.05;
    EXPECT_THROW(permutation_test(a, SequenceDataset{ManifoldKind::Sphere, 8, 1, {}}, group_config(), SgdConfig{}, perm),
                 DomainError);
    SequenceDataset spd{ManifoldKind::Spd, 3, 1, {}};
    spd.add(ManifoldSequence(ManifoldKind::Spd, 3, 1, 4));
    EXPECT_THROW(permutation_test(a, spd, group_config(), SgdConfig{}, perm), DomainError);
}

TEST(PermutationTest, TrainingFailureNamesPermutation) {
    const auto [a, b] = small_groups(0.0, 5);
    SgdConfig sgd;
    sgd.learning_rate = 1e200;
    sgd.momentum = 0.0;
    PermutationConfig perm;
    perm.n_permutations = 2;
    perm.pretrain_epochs = 0;
    try {
        permutation_test(a, b, group_config(), sgd, perm);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("observed labeling"), std::string::npos) << e.what();
    }
}

TEST(NullSummary, AllEqualSamplesFillOneBin) {
    GroupTestResult r;
    r.null_samples.assign(50, 0.7);
    r.sigma_observed = 1.0;
    const NullHistogram h = null_summary(r);
    EXPECT_EQ(h.counts.size(), static_cast<std::size_t>(kHistogramBins));
    EXPECT_EQ(h.counts[0], 50u);
    for (std::size_t b = 1; b < h.counts.size(); ++b) EXPECT_EQ(h.counts[b], 0u);
    EXPECT_EQ(h.marker, 1.0);
}

TEST(NullSummary, UniformSamplesAreFlat) {
    GroupTestResult r;
    for (int i = 0; i < 3000; ++i) r.null_samples.push_back((i + 0.5) / 3000.0);
    const NullHistogram h = null_summary(r, 10);
    ASSERT_EQ(h.edges.size(), 11u);
    for (std::size_t c : h.counts) EXPECT_NEAR(static_cast<double>(c), 300.0, 1.0);
}

TEST(Reporting, CsvLayouts) {
    GroupTestResult r;
    r.null_samples = {0.5, 0.25};
    r.seeds = {11, 12};
    r.sigma_observed = 0.75;
    r.p_value = 1.0 / 3.0;
    EXPECT_EQ(result_csv(r), "index,seed,sigma_hat\n0,11,0.5\n1,12,0.25\nsummary,0.75,0.33333333333333331\n");
    const std::string h = histogram_csv(null_summary(r, 2));
    EXPECT_EQ(h, "bin,lower,upper,count\n0,0.25,0.375,1\n1,0.375,0.5,1\nmarker,0.75,,\n");
}

TEST(PermutationTest, MedianPValueDoesNotRiseWithEffect) {
    NetConfig cfg = group_config();
    SgdConfig sgd;
    PermutationConfig perm;
    perm.n_permutations = 39;
    std::vector<double> medians;
    for (double effect : {0.0, 0.5, 1.0}) {
        std::vector<double> p;
        for (std::uint64_t run = 0; run < 20; ++run) {
            GroupGenOptions o;
            o.n = 10;
            o.max_length = 30;
            o.effect = effect;
            o.seed = 100 + run;
            const auto [a, b] = gen_group_sequences(o);
            perm.seed = 200 + run;
            p.push_back(permutation_test(a, b, cfg, sgd, perm).p_value);
        }
        std::sort(p.begin(), p.end());
        medians.push_back(0.5 * (p[9] + p[10]));
    }
    EXPECT_LE(medians[1], medians[0]);
    EXPECT_LE(medians[2], medians[1]);
}
