// mdcnn: data generation, training, evaluation, gradient checks and
// permutation tests for manifold-valued dilated convolutional networks.
//
// Exit codes: 0 success, 1 check or threshold failure, 2 usage or input error.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdcnn/data.hpp"
#include "mdcnn/net.hpp"
#include "mdcnn/params.hpp"
#include "mdcnn/stats.hpp"
#include "mdcnn/train.hpp"

using namespace mdcnn;

namespace {

constexpr int kExitThreshold = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenArgs {
    std::string kind = "spd-rotating";
    std::vector<double> classes{30.0, 60.0};
    std::optional<int> n;  // unset: 100 per class, 30 per group
    int len = 20;
    std::optional<int> dim;       // unset: 3 for spd-rotating, 8 for groups
    std::optional<double> noise;  // unset: 0.1 for spd-rotating, 0.05 for groups
    std::string manifold = "sphere";
    double rate = 0.1;
    double effect = 0.0;
    int min_len = 11;
    int max_len = 73;
    std::uint64_t seed = 0;
    std::string out;
    std::string csv;
};

struct NetArgs {
    std::string net_file;
    std::string blocks;
    int kernel = 0;
    std::string head;
    int templates = 0;
};

struct SgdArgs {
    double lr = 0.01;
    double momentum = 0.9;
    int epochs = 10;
    int batch = 16;
    std::uint64_t seed = 0;
};

struct TrainArgs {
    std::string data;
    std::string task = "classify";
    NetArgs net;
    SgdArgs sgd;
    std::string out;
    std::string history;
};

struct EvalArgs {
    std::string model;
    std::string data;
    std::string out;
};

struct PermArgs {
    std::string a, b;
    NetArgs net;
    SgdArgs sgd;
    int perms = 200;
    double alpha = 0.05;
    int pretrain_epochs = 2;
    int finetune_epochs = 1;
    std::string out;
    std::string hist;
};

struct CheckArgs {
    std::string manifold = "spd";
    int dim = 3;
    NetArgs net;
    std::uint64_t seed = 0;
    double h = 1e-5;
    double tol = 1e-5;
    std::string corrupt_layer;
};

void add_net_options(CLI::App* app, NetArgs& a) {
    app->add_option("--net", a.net_file, "Architecture file (key = value lines)");
    app->add_option("--blocks", a.blocks, "Block channel triples c_in:c_out:c_res, comma separated");
    app->add_option("--kernel", a.kernel, "Kernel size");
    app->add_option("--head", a.head, "Head: invariant, tangent or none");
    app->add_option("--templates", a.templates, "Templates of the invariant head");
}

void add_sgd_options(CLI::App* app, SgdArgs& a) {
    app->add_option("--lr", a.lr, "Learning rate")->capture_default_str();
    app->add_option("--momentum", a.momentum, "Momentum in [0, 1)")->capture_default_str();
    app->add_option("--epochs", a.epochs, "Epochs")->capture_default_str();
    app->add_option("--batch", a.batch, "Batch size")->capture_default_str();
    app->add_option("--seed", a.seed, "Seed")->capture_default_str();
}

/// Architecture from an optional file, then flag overrides, then the data shape.
NetConfig resolve_net(const NetArgs& a, NetConfig base) {
    if (!a.net_file.empty()) {
        const NetConfig file = NetConfig::load(a.net_file);
        base.blocks = file.blocks;
        base.kernel = file.kernel;
        base.head = file.head;
        base.n_templates = file.n_templates;
    }
    if (!a.blocks.empty()) base.blocks = NetConfig::parse_blocks(a.blocks);
    if (a.kernel > 0) base.kernel = a.kernel;
    if (!a.head.empty()) base.head = parse_head(a.head);
    if (a.templates > 0) base.n_templates = a.templates;
    base.validate();
    return base;
}

SgdConfig to_sgd(const SgdArgs& a, int threads) {
    SgdConfig s;
    s.learning_rate = a.lr;
    s.momentum = a.momentum;
    s.epochs = a.epochs;
    s.batch_size = a.batch;
    s.seed = a.seed;
    s.threads = threads;
    s.validate();
    return s;
}

std::string dataset_summary(const SequenceDataset& ds) {
    return std::to_string(ds.size()) + " sequences, " + std::string(to_string(ds.kind)) + " dim " +
           std::to_string(ds.dim) + ", " + std::to_string(ds.channels) + " channel(s)";
}

std::string stem_of(const std::string& path) {
    const std::string ext = ".msq";
    if (path.size() > ext.size() && path.compare(path.size() - ext.size(), ext.size(), ext) == 0)
        return path.substr(0, path.size() - ext.size());
    return path;
}

int cmd_gen(const GenArgs& a) {
    if (a.kind == "spd-rotating") {
        const SequenceDataset ds =
            gen_rotating_spd(a.n.value_or(100), a.len, a.dim.value_or(3), a.classes, a.noise.value_or(0.1), a.seed);
        save_dataset(a.out, ds);
        if (!a.csv.empty()) export_dataset_csv(a.csv, ds);
        std::cout << "wrote " << a.out << ": " << dataset_summary(ds) << ", " << a.classes.size() << " classes\n";
        return 0;
    }
    if (a.kind == "groups") {
        GroupGenOptions o;
        o.n = a.n.value_or(o.n);
        o.min_length = a.min_len;
        o.max_length = a.max_len;
        o.manifold = parse_manifold(a.manifold);
        o.dim = a.dim.value_or(o.dim);
        o.rate = a.rate;
        o.effect = a.effect;
        o.noise_sigma = a.noise.value_or(o.noise_sigma);
        o.seed = a.seed;
        const auto [ga, gb] = gen_group_sequences(o);
        const std::string stem = stem_of(a.out);
        save_dataset(stem + ".a.msq", ga);
        save_dataset(stem + ".b.msq", gb);
        std::cout << "wrote " << stem << ".a.msq: " << dataset_summary(ga) << "\n";
        std::cout << "wrote " << stem << ".b.msq: " << dataset_summary(gb) << "\n";
        return 0;
    }
    throw UsageError("unknown --kind '" + a.kind + "' (expected spd-rotating or groups)");
}

int cmd_train(const TrainArgs& a, int threads) {
    const SequenceDataset ds = load_dataset(a.data);
    if (ds.entries.empty()) throw UsageError("dataset '" + a.data + "' is empty");
    NetConfig base;
    base.manifold = ds.kind;
    base.dim = ds.dim;
    base.in_channels = ds.channels;
    base.blocks = {{ds.channels, 2, 2}};
    if (a.task == "classify") {
        base.num_classes = std::max(ds.num_classes(), 1);
    } else if (a.task == "group") {
        base.head = HeadKind::None;
        base.blocks = {{ds.channels, 2, 1}};
    } else {
        throw UsageError("unknown --task '" + a.task + "' (expected classify or group)");
    }
    const NetConfig cfg = resolve_net(a.net, base);
    const Network net(cfg);
    const SgdConfig sgd = to_sgd(a.sgd, threads);
    std::cerr << "# network\n" << cfg.to_text() << "# parameters: " << net.num_params() << "\n";
    const TrainResult r = a.task == "classify" ? train_classifier(net, ds, sgd) : train_group_model(net, ds, sgd);
    save_model(a.out, net, r.params);
    std::string hist = "epoch,loss,accuracy,fd_fallbacks\n";
    for (const auto& h : r.history) {
        char line[128];
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%zu\n", h.epoch, h.loss, h.accuracy, h.fd_fallbacks);
        hist += line;
        std::cout << line;
    }
    if (!a.history.empty()) write_text(a.history, hist);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

int cmd_eval(const EvalArgs& a, int threads) {
    const Model m = load_model(a.model);
    const SequenceDataset ds = load_dataset(a.data);
    const NetConfig& cfg = m.network.config();
    if (ds.kind != cfg.manifold || ds.dim != cfg.dim)
        throw UsageError("model expects " + std::string(to_string(cfg.manifold)) + " dim " + std::to_string(cfg.dim) +
                         " but data is " + std::string(to_string(ds.kind)) + " dim " + std::to_string(ds.dim));
    if (ds.channels != cfg.in_channels)
        throw UsageError("model expects " + std::to_string(cfg.in_channels) + " channels but data has " +
                         std::to_string(ds.channels));
    std::string csv;
    char line[160];
    if (cfg.head == HeadKind::None) {
        double total = 0.0;
        for (const auto& e : ds.entries) total += m.network.group_loss(m.params, e.sequence);
        const double mean = ds.entries.empty() ? 0.0 : total / static_cast<double>(ds.size());
        std::snprintf(line, sizeof line, "metric,value\nmean_next_step_loss,%.17g\n", mean);
        csv = line;
        std::cout << "mean next-step loss " << mean << "\n";
    } else {
        const Evaluation ev = evaluate_classifier(m.network, m.params, ds, threads);
        std::snprintf(line, sizeof line, "metric,value\naccuracy,%.17g\nmean_loss,%.17g\n", ev.accuracy, ev.mean_loss);
        csv = line;
        csv += "true,predicted,count\n";
        std::cout << "accuracy " << ev.accuracy << "\nconfusion (rows true, columns predicted):\n";
        for (std::size_t t = 0; t < ev.confusion.size(); ++t) {
            for (std::size_t p = 0; p < ev.confusion[t].size(); ++p) {
                csv += std::to_string(t) + "," + std::to_string(p) + "," + std::to_string(ev.confusion[t][p]) + "\n";
                std::cout << (p ? " " : "  ") << ev.confusion[t][p];
            }
            std::cout << "\n";
        }
    }
    if (!a.out.empty()) write_text(a.out, csv);
    return 0;
}

int cmd_permtest(const PermArgs& a, int threads) {
    const SequenceDataset ga = load_dataset(a.a);
    const SequenceDataset gb = load_dataset(a.b);
    NetConfig base;
    base.manifold = ga.kind;
    base.dim = ga.dim;
    base.in_channels = ga.channels;
    base.blocks = {{ga.channels, 2, 1}};
    base.head = HeadKind::None;
    const NetConfig cfg = resolve_net(a.net, base);
    PermutationConfig pc;
    pc.n_permutations = a.perms;
    pc.alpha = a.alpha;
    pc.seed = a.sgd.seed;
    pc.pretrain_epochs = a.pretrain_epochs;
    pc.finetune_epochs = a.finetune_epochs;
    pc.threads = threads;
    const auto t0 = std::chrono::steady_clock::now();
    const GroupTestResult r = permutation_test(ga, gb, cfg, to_sgd(a.sgd, 1), pc);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("sigma %.17g\np-value %.6g\nwall time %.2f s\n", r.sigma_observed, r.p_value, secs);
    if (!a.out.empty()) write_text(a.out, result_csv(r));
    if (!a.hist.empty()) write_text(a.hist, histogram_csv(null_summary(r)));
    return 0;
}

int cmd_checkgrad(const CheckArgs& a) {
    NetConfig base;
    base.manifold = parse_manifold(a.manifold);
    base.dim = a.dim;
    base.blocks = {{1, 2, 2}, {2, 2, 2}, {2, 2, 2}};
    const NetConfig cfg = resolve_net(a.net, base);
    GradCheckOptions o;
    o.h = a.h;
    o.tolerance = a.tol;
    if (!a.corrupt_layer.empty()) o.fault = AdjointFault{a.corrupt_layer, 1.5};
    const GradCheckReport r = check_gradients(cfg, a.seed, o);
    std::printf("layer,max_abs_err,max_rel_err\n");
    for (const auto& g : r.groups) std::printf("%s,%.3e,%.3e\n", g.layer.c_str(), g.max_abs, g.max_rel);
    std::printf("parameters %zu, finite-difference fallbacks %zu\n", r.num_params, r.fd_fallbacks);
    if (!r.passed) {
        std::printf("FAIL: max relative error %.3e > %.1e at %s (layer %s)\n", r.max_rel, o.tolerance,
                    r.worst_parameter.c_str(), r.worst_layer.c_str());
        return kExitThreshold;
    }
    std::printf("PASS: max relative error %.3e <= %.1e\n", r.max_rel, o.tolerance);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dilated convolutional networks on SPD and sphere-valued sequences"};
    app.set_config("--config", "", "Read options from an INI/TOML file; flags override it");
    app.require_subcommand(1);
    int threads = 1;
    std::string dump;
    app.add_option("--threads", threads, "Worker threads (results do not depend on this)")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app.add_option("--dump-config", dump, "Write the resolved configuration to this file");

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic dataset");
    g->add_option("--kind", gen.kind, "spd-rotating or groups")->capture_default_str();
    g->add_option("--classes", gen.classes, "Rotation step per class in degrees")->delimiter(',')->capture_default_str();
    g->add_option("--n", gen.n, "Sequences per class (spd-rotating, default 100) or per group (groups, default 30)");
    g->add_option("--len", gen.len, "Sequence length (spd-rotating)")->capture_default_str();
    g->add_option("--dim", gen.dim, "SPD size n or sphere ambient dimension m (default 3 spd-rotating, 8 groups)");
    g->add_option("--noise", gen.noise, "Noise standard deviation (default 0.1 spd-rotating, 0.05 groups)");
    g->add_option("--manifold", gen.manifold, "Manifold for groups: sphere or spd")->capture_default_str();
    g->add_option("--rate", gen.rate, "Group A rotation rate, radians per step")->capture_default_str();
    g->add_option("--effect", gen.effect, "Group B rate is rate * (1 + effect)")->capture_default_str();
    g->add_option("--min-len", gen.min_len, "Shortest group sequence")->capture_default_str();
    g->add_option("--max-len", gen.max_len, "Longest group sequence")->capture_default_str();
    g->add_option("--seed", gen.seed, "Seed")->capture_default_str();
    g->add_option("--out", gen.out, "Output file (groups: <stem>.a.msq and <stem>.b.msq)")->required();
    g->add_option("--csv", gen.csv, "Also export the dataset as CSV");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a classifier or a group model");
    t->add_option("--data", tr.data, "Dataset (MSQ1)")->required();
    t->add_option("--task", tr.task, "classify or group")->capture_default_str();
    add_net_options(t, tr.net);
    add_sgd_options(t, tr.sgd);
    t->add_option("--out", tr.out, "Model file (MPAR)")->required();
    t->add_option("--history", tr.history, "Per-epoch CSV");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a model on a dataset");
    e->add_option("--model", ev.model, "Model file (MPAR)")->required();
    e->add_option("--data", ev.data, "Dataset (MSQ1)")->required();
    e->add_option("--out", ev.out, "Metrics CSV");

    PermArgs pa;
    auto* p = app.add_subcommand("permtest", "Two-group permutation test");
    p->add_option("--a", pa.a, "Group A dataset")->required();
    p->add_option("--b", pa.b, "Group B dataset")->required();
    add_net_options(p, pa.net);
    add_sgd_options(p, pa.sgd);
    p->add_option("--perms", pa.perms, "Number of permutations")->capture_default_str();
    p->add_option("--alpha", pa.alpha, "Significance level")->capture_default_str();
    p->add_option("--pretrain-epochs", pa.pretrain_epochs, "Pretraining epochs on the union")->capture_default_str();
    p->add_option("--finetune-epochs", pa.finetune_epochs, "Fine-tuning epochs per fit")->capture_default_str();
    p->add_option("--out", pa.out, "Result CSV");
    p->add_option("--hist", pa.hist, "Null histogram CSV");

    CheckArgs ca;
    auto* c = app.add_subcommand("checkgrad", "Compare gradients with central differences");
    c->add_option("--manifold", ca.manifold, "spd or sphere")->capture_default_str();
    c->add_option("--dim", ca.dim, "SPD size n or sphere ambient dimension m")->capture_default_str();
    add_net_options(c, ca.net);
    c->add_option("--seed", ca.seed, "Seed")->capture_default_str();
    c->add_option("--step", ca.h, "Finite-difference step")->capture_default_str();
    c->add_option("--tol", ca.tol, "Relative error threshold")->capture_default_str();
    c->add_option("--corrupt-layer", ca.corrupt_layer, "Test hook: scale this layer's adjoint by 1.5");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return kExitUsage;
    }

    const std::string resolved = app.config_to_str(true, false);
    std::cerr << "# resolved configuration\n" << resolved;
    try {
        if (!dump.empty()) write_text(dump, resolved);
        if (g->parsed()) return cmd_gen(gen);
        if (t->parsed()) return cmd_train(tr, threads);
        if (e->parsed()) return cmd_eval(ev, threads);
        if (p->parsed()) return cmd_permtest(pa, threads);
        if (c->parsed()) return cmd_checkgrad(ca);
    } catch (const TrainingError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitThreshold;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
