#pragma once

// Dilated convolution over manifold-valued sequences.
//
// A network is a stack of residual blocks followed by an optional head. Block b
// uses dilation 2^b and holds two convolutions (c_in -> c_out -> c_out) and a
// residual merge of the c_in + c_out concatenated channels down to c_res. Every
// output value is a recursive weighted Frechet mean, so each layer commutes with
// isometries. The invariant head measures distances from the final values to
// learned templates; the tangent head reads log coordinates at a fixed base.
//
// The forward pass is written once against an Ops backend: ValueOps evaluates
// on plain matrices, TapeOps records the same computation for differentiation.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mdcnn/autodiff.hpp"
#include "mdcnn/errors.hpp"
#include "mdcnn/linalg.hpp"
#include "mdcnn/manifold.hpp"
#include "mdcnn/sequence.hpp"
#include "mdcnn/wfm.hpp"

namespace mdcnn {

enum class HeadKind { Invariant, Tangent, None };

inline std::string_view to_string(HeadKind h) {
    switch (h) {
        case HeadKind::Invariant: return "invariant";
        case HeadKind::Tangent: return "tangent";
        case HeadKind::None: return "none";
    }
    return "none";
}

inline HeadKind parse_head(std::string_view text) {
    if (text == "invariant") return HeadKind::Invariant;
    if (text == "tangent") return HeadKind::Tangent;
    if (text == "none") return HeadKind::None;
    throw DomainError("unknown head kind '" + std::string(text) + "' (expected invariant, tangent or none)");
}

struct BlockSpec {
    int c_in = 1;
    int c_out = 1;
    int c_res = 1;
    bool operator==(const BlockSpec&) const = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline int parse_int(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size() || value.empty())
        throw DomainError("config key '" + key + "': '" + value + "' is not an integer");
    return v;
}

}  // namespace detail

/// Architecture description. Text form, one `key = value` per line, '#' starts
/// a comment:
///
///   manifold    = spd | sphere
///   dim         = n for SPD(n), ambient m for the sphere S^{m-1}
///   in_channels = input channel count
///   blocks      = c_in:c_out:c_res[,c_in:c_out:c_res...]  (empty for depth 0)
///   kernel      = taps per convolution (default 3)
///   head        = invariant | tangent | none
///   n_templates = templates of the invariant head
///   num_classes = logits of the invariant/tangent head
struct NetConfig {
    ManifoldKind manifold = ManifoldKind::Spd;
    int dim = 3;
    int in_channels = 1;
    std::vector<BlockSpec> blocks;
    int kernel = 3;
    HeadKind head = HeadKind::Invariant;
    int n_templates = 2;
    int num_classes = 2;

    bool operator==(const NetConfig&) const = default;

    static int dilation(std::size_t block) { return 1 << block; }

    /// Channels reaching the head.
    int out_channels() const { return blocks.empty() ? in_channels : blocks.back().c_res; }

    int tangent_dim() const { return manifold == ManifoldKind::Spd ? dim * (dim + 1) / 2 : dim - 1; }

    int feature_length() const {
        switch (head) {
            case HeadKind::Invariant: return out_channels() * n_templates;
            case HeadKind::Tangent: return out_channels() * tangent_dim();
            case HeadKind::None: return 0;
        }
        return 0;
    }

    /// Past time steps that can influence an output: sum over blocks of 2 (k - 1) d.
    int receptive_field() const {
        int r = 0;
        for (std::size_t b = 0; b < blocks.size(); ++b) r += 2 * (kernel - 1) * dilation(b);
        return r;
    }

    void validate() const {
        if (dim < 1 || (manifold == ManifoldKind::Sphere && dim < 2))
            throw DomainError("config: dim " + std::to_string(dim) + " is too small for " +
                              std::string(to_string(manifold)));
        if (in_channels < 1) throw DomainError("config: in_channels must be positive");
        if (kernel < 1) throw DomainError("config: kernel must be positive");
        int c = in_channels;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const BlockSpec& s = blocks[b];
            if (s.c_in < 1 || s.c_out < 1 || s.c_res < 1)
                throw DomainError("config: block " + std::to_string(b) + " has a non-positive channel count");
            if (s.c_in != c)
                throw DomainError("config: block " + std::to_string(b) + " expects " + std::to_string(s.c_in) +
                                  " input channels but receives " + std::to_string(c));
            c = s.c_res;
        }
        if (blocks.size() > 20) throw DomainError("config: too many blocks");
        if (head == HeadKind::Invariant && n_templates < 1) throw DomainError("config: n_templates must be positive");
        if (head != HeadKind::None && num_classes < 1) throw DomainError("config: num_classes must be positive");
    }

    std::string blocks_text() const {
        std::string out;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            if (b) out += ',';
            out += std::to_string(blocks[b].c_in) + ":" + std::to_string(blocks[b].c_out) + ":" +
                   std::to_string(blocks[b].c_res);
        }
        return out;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "manifold = " << to_string(manifold) << '\n'
           << "dim = " << dim << '\n'
           << "in_channels = " << in_channels << '\n'
           << "blocks = " << blocks_text() << '\n'
           << "kernel = " << kernel << '\n'
           << "head = " << to_string(head) << '\n'
           << "n_templates = " << n_templates << '\n'
           << "num_classes = " << num_classes << '\n';
        return os.str();
    }

    static std::vector<BlockSpec> parse_blocks(std::string_view text) {
        std::vector<BlockSpec> out;
        const std::string t = detail::trim(text);
        if (t.empty() || t == "none") return out;
        std::stringstream ss(t);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = detail::trim(item);
            BlockSpec b;
            char c1 = 0, c2 = 0;
            std::istringstream is(item);
            if (!(is >> b.c_in >> c1 >> b.c_out >> c2 >> b.c_res) || c1 != ':' || c2 != ':' || !(is >> std::ws).eof())
                throw DomainError("config: bad block triple '" + item + "' (expected c_in:c_out:c_res)");
            out.push_back(b);
        }
        return out;
    }

    /// Sets one key; unknown keys are rejected.
    void set(const std::string& key, const std::string& value) {
        if (key == "manifold")
            manifold = parse_manifold(value);
        else if (key == "dim")
            dim = detail::parse_int(key, value);
        else if (key == "in_channels")
            in_channels = detail::parse_int(key, value);
        else if (key == "blocks")
            blocks = parse_blocks(value);
        else if (key == "kernel")
            kernel = detail::parse_int(key, value);
        else if (key == "head")
            head = parse_head(value);
        else if (key == "n_templates")
            n_templates = detail::parse_int(key, value);
        else if (key == "num_classes")
            num_classes = detail::parse_int(key, value);
        else
            throw DomainError("config: unknown key '" + key + "'");
    }

    static NetConfig parse(std::string_view text) {
        NetConfig cfg;
        std::istringstream in{std::string(text)};
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw DomainError("config line " + std::to_string(lineno) + ": expected key = value");
            cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        }
        cfg.validate();
        return cfg;
    }

    static NetConfig load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw DomainError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }
};

// ---------------------------------------------------------------------------
// Parameter layout.

enum class SegmentKind { Convex, Linear };

/// A contiguous run of parameters. Convex segments hold the raw square roots of
/// one weight vector; linear segments hold FC weights or biases.
struct Segment {
    std::string name;
    std::string layer;
    std::size_t offset = 0;
    std::size_t length = 0;
    SegmentKind kind = SegmentKind::Linear;
};

/// Offsets of one manifold layer: `outputs` convex vectors of `taps` entries each.
struct LayerSlot {
    std::size_t offset = 0;
    int taps = 0;
    int outputs = 0;
    std::string name;
};

/// Flat ordering: blocks in order; within a block conv1, conv2, residual; within
/// a layer output channels in order. Then the head: templates, FC weight matrix
/// (row-major, num_classes x features), FC bias.
class ParamLayout {
public:
    ParamLayout() = default;
    explicit ParamLayout(const NetConfig& cfg) {
        cfg.validate();
        for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
            const BlockSpec& s = cfg.blocks[b];
            const std::string prefix = "block" + std::to_string(b);
            BlockSlots slots;
            slots.conv1 = add_layer(prefix + ".conv1", cfg.kernel * s.c_in, s.c_out);
            slots.conv2 = add_layer(prefix + ".conv2", cfg.kernel * s.c_out, s.c_out);
            slots.residual = add_layer(prefix + ".residual", s.c_in + s.c_out, s.c_res);
            blocks_.push_back(slots);
        }
        const int c = cfg.out_channels();
        if (cfg.head == HeadKind::Invariant) templates_ = add_layer("head.templates", c, cfg.n_templates, "template");
        if (cfg.head != HeadKind::None) {
            const std::size_t f = static_cast<std::size_t>(cfg.feature_length());
            weight_offset_ = total_;
            add_segment("head.weight", "head.weight", f * static_cast<std::size_t>(cfg.num_classes), SegmentKind::Linear);
            bias_offset_ = total_;
            add_segment("head.bias", "head.bias", static_cast<std::size_t>(cfg.num_classes), SegmentKind::Linear);
        }
    }

    struct BlockSlots {
        LayerSlot conv1, conv2, residual;
    };

    std::size_t size() const { return total_; }
    const std::vector<Segment>& segments() const { return segments_; }
    const std::vector<BlockSlots>& blocks() const { return blocks_; }
    const LayerSlot& templates() const { return templates_; }
    std::size_t weight_offset() const { return weight_offset_; }
    std::size_t bias_offset() const { return bias_offset_; }

    /// Segment owning flat index i.
    const Segment& segment_of(std::size_t i) const {
        for (const auto& s : segments_)
            if (i >= s.offset && i < s.offset + s.length) return s;
        throw DomainError("parameter index " + std::to_string(i) + " out of range");
    }

    /// One line per segment: `name offset length convex|linear`.
    std::string index_map() const {
        std::string out;
        for (const auto& s : segments_)
            out += s.name + " " + std::to_string(s.offset) + " " + std::to_string(s.length) + " " +
                   (s.kind == SegmentKind::Convex ? "convex" : "linear") + "\n";
        return out;
    }

private:
    LayerSlot add_layer(const std::string& name, int taps, int outputs, const std::string& unit = "out") {
        LayerSlot slot{total_, taps, outputs, name};
        for (int o = 0; o < outputs; ++o)
            add_segment(name + "." + unit + std::to_string(o), name, static_cast<std::size_t>(taps), SegmentKind::Convex);
        return slot;
    }

    void add_segment(std::string name, std::string layer, std::size_t length, SegmentKind kind) {
        segments_.push_back({std::move(name), std::move(layer), total_, length, kind});
        total_ += length;
    }

    std::vector<Segment> segments_;
    std::vector<BlockSlots> blocks_;
    LayerSlot templates_;
    std::size_t weight_offset_ = 0;
    std::size_t bias_offset_ = 0;
    std::size_t total_ = 0;
};

/// Floors every raw convex entry at the minimum magnitude.
inline void floor_convex(const ParamLayout& layout, std::vector<double>& params) {
    for (const auto& s : layout.segments()) {
        if (s.kind != SegmentKind::Convex) continue;
        for (std::size_t i = s.offset; i < s.offset + s.length; ++i)
            if (std::abs(params[i]) < ConvexWeights::kRawFloor)
                params[i] = std::signbit(params[i]) ? -ConvexWeights::kRawFloor : ConvexWeights::kRawFloor;
    }
}

// ---------------------------------------------------------------------------
// Backends.

/// Plain evaluation on matrices.
class ValueOps {
public:
    using Point = Matrix;
    using Scalar = double;

    ValueOps(ManifoldKind kind, std::span<const double> params) : kind_(kind), params_(params) {}

    ManifoldKind kind() const { return kind_; }
    Point input(const Matrix& m) { return m; }
    Scalar param(std::size_t i) { return params_[i]; }
    Scalar constant(double v) { return v; }

    Scalar square(Scalar a) { return a * a; }
    Scalar add(Scalar a, Scalar b) { return a + b; }
    Scalar div(Scalar a, Scalar b) { return a / b; }
    Scalar scale(Scalar a, double s) { return a * s; }
    Scalar sum(const std::vector<Scalar>& xs) {
        double acc = 0.0;
        for (double x : xs) acc += x;
        return acc;
    }
    Scalar affine(const std::vector<Scalar>& w, const std::vector<Scalar>& x, Scalar b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * x[i];
        return acc + b;
    }

    Point geodesic(const Point& x, const Point& y, Scalar t) {
        return kind_ == ManifoldKind::Spd ? spd::geodesic(x, y, t) : sphere::geodesic(x, y, t);
    }

    Scalar sq_dist(const Point& x, const Point& y) {
        if (kind_ == ManifoldKind::Spd) return spd::squared_distance(x, y);
        const double d = sphere::distance(x, y);
        return d * d;
    }

    Scalar dist(const Point& x, const Point& y) {
        if (kind_ == ManifoldKind::Spd) return std::sqrt(std::max(spd::squared_distance(x, y), 0.0));
        return sphere::distance(x, y);
    }

    /// Log coordinates at the canonical base: SPD upper triangle with sqrt(2) on
    /// off-diagonal entries, sphere coordinates 2..m.
    std::vector<Scalar> tangent_coords(const Point& x) {
        std::vector<Scalar> out;
        if (kind_ == ManifoldKind::Spd) {
            const Matrix l = matrix_function(x, {SpectralFn::Log});
            for (Eigen::Index i = 0; i < l.rows(); ++i)
                for (Eigen::Index j = i; j < l.cols(); ++j) out.push_back(i == j ? l(i, j) : l(i, j) * std::sqrt(2.0));
        } else {
            const Matrix v = sphere::log_map(canonical_base(kind_, static_cast<int>(x.rows())), x);
            for (Eigen::Index i = 1; i < v.rows(); ++i) out.push_back(v(i, 0));
        }
        return out;
    }

    static double value(Scalar s) { return s; }
    static const Matrix& value(const Point& p) { return p; }

private:
    ManifoldKind kind_;
    std::span<const double> params_;
};

/// Records the forward pass on a tape. Parameters become variables; inputs are
/// constants. Square-root factors of SPD points are cached per node.
class TapeOps {
public:
    using Point = ad::Var;
    using Scalar = ad::Var;

    TapeOps(ManifoldKind kind, ad::Tape& tape, std::span<const double> params) : kind_(kind), tape_(tape) {
        vars_.reserve(params.size());
        for (double p : params) vars_.push_back(tape.variable(p));
    }

    ManifoldKind kind() const { return kind_; }
    ad::Tape& tape() { return tape_; }
    const std::vector<ad::Var>& param_vars() const { return vars_; }

    /// Fault injection for gradient checks: parameters in [begin, end) pass their
    /// adjoint back scaled by `factor`, while the forward value is unchanged.
    void corrupt_range(std::size_t begin, std::size_t end, double factor) {
        for (std::size_t i = begin; i < end; ++i) {
            const ad::Var src = vars_[i];
            vars_[i] = tape_.push(tape_.value(src), true, [src = src.id, factor](ad::Tape& tp, std::uint32_t self) {
                tp.accumulate(src, factor * tp.adjoint(self));
            });
        }
    }

    Point input(const Matrix& m) { return tape_.constant(m); }
    Scalar param(std::size_t i) { return vars_[i]; }
    Scalar constant(double v) { return tape_.constant(v); }

    Scalar square(Scalar a) { return ad::square(a); }
    Scalar add(Scalar a, Scalar b) { return a + b; }
    Scalar div(Scalar a, Scalar b) { return a / b; }
    Scalar scale(Scalar a, double s) { return ad::scale(a, s); }
    Scalar sum(const std::vector<Scalar>& xs) { return ad::sum(xs); }
    Scalar affine(const std::vector<Scalar>& w, const std::vector<Scalar>& x, Scalar b) { return ad::affine(w, x, b); }

    Point geodesic(Point x, Point y, Scalar t) {
        if (kind_ == ManifoldKind::Sphere) return ad::slerp(x, y, t);
        const auto [xs, xi] = factors(x);
        return ad::sandwich(xs, ad::spectral_pow(ad::sandwich(xi, y), t));
    }

    Scalar sq_dist(Point x, Point y) {
        if (kind_ == ManifoldKind::Sphere) return ad::sphere_squared_distance(x, y);
        return ad::log_spectrum_sq_sum(ad::sandwich(factors(x).second, y));
    }

    Scalar dist(Point x, Point y) {
        if (kind_ == ManifoldKind::Sphere) return ad::sphere_distance(x, y);
        return ad::sqrt(sq_dist(x, y));
    }

    std::vector<Scalar> tangent_coords(Point x) {
        std::vector<Scalar> out;
        const Eigen::Index n = tape_.value(x).rows();
        if (kind_ == ManifoldKind::Spd) {
            const ad::Var l = ad::spectral(x, {SpectralFn::Log});
            for (int i = 0; i < n; ++i)
                for (int j = i; j < n; ++j)
                    out.push_back(i == j ? ad::entry(l, i, j) : ad::scale(ad::entry(l, i, j), std::sqrt(2.0)));
        } else {
            const ad::Var v = ad::sphere_log(canonical_base(kind_, static_cast<int>(n)), x);
            for (int i = 1; i < n; ++i) out.push_back(ad::entry(v, i, 0));
        }
        return out;
    }

    double value(Scalar s) const { return tape_.scalar(s); }

private:
    std::pair<ad::Var, ad::Var> factors(ad::Var x) {
        auto it = factor_cache_.find(x.id);
        if (it != factor_cache_.end()) return it->second;
        auto f = ad::sqrt_invsqrt(x);
        factor_cache_.emplace(x.id, f);
        return f;
    }

    ManifoldKind kind_;
    ad::Tape& tape_;
    std::vector<ad::Var> vars_;
    std::unordered_map<std::uint32_t, std::pair<ad::Var, ad::Var>> factor_cache_;
};

// ---------------------------------------------------------------------------
// Generic forward pass.

/// Channel-major grid with a mask of the entries that were computed.
template <class P>
struct Grid {
    int channels = 0;
    int length = 0;
    std::vector<P> values;

    Grid() = default;
    Grid(int c, int n) : channels(c), length(n), values(static_cast<std::size_t>(c) * static_cast<std::size_t>(n)) {}

    P& at(int c, int s) { return values[static_cast<std::size_t>(c) * static_cast<std::size_t>(length) + static_cast<std::size_t>(s)]; }
    const P& at(int c, int s) const {
        return values[static_cast<std::size_t>(c) * static_cast<std::size_t>(length) + static_cast<std::size_t>(s)];
    }
};

/// Time steps needed from a layer's input to produce `out` with taps spaced by d.
inline std::vector<char> conv_needs(const std::vector<char>& out, int kernel, int dilation) {
    std::vector<char> in(out.size(), 0);
    const int n = static_cast<int>(out.size());
    for (int s = 0; s < n; ++s)
        if (out[static_cast<std::size_t>(s)])
            for (int i = 0; i < kernel && s - i * dilation >= 0; ++i) in[static_cast<std::size_t>(s - i * dilation)] = 1;
    return in;
}

template <class Ops>
class Forward {
public:
    using P = typename Ops::Point;
    using S = typename Ops::Scalar;

    Forward(const NetConfig& cfg, const ParamLayout& layout, Ops& ops) : cfg_(cfg), layout_(layout), ops_(ops) {}

    /// Step fractions raw_n^2 / sum_{j<=n} raw_j^2 of one convex vector.
    std::vector<S> fractions(std::size_t offset, int taps) {
        std::vector<S> t;
        t.reserve(static_cast<std::size_t>(taps));
        S prefix = ops_.square(ops_.param(offset));
        t.push_back(ops_.constant(1.0));
        for (int n = 1; n < taps; ++n) {
            S sq = ops_.square(ops_.param(offset + static_cast<std::size_t>(n)));
            prefix = ops_.add(prefix, sq);
            t.push_back(ops_.div(sq, prefix));
        }
        return t;
    }

    P wfm(const std::vector<const P*>& pts, const std::vector<S>& t) {
        P m = *pts[0];
        for (std::size_t n = 1; n < pts.size(); ++n) m = ops_.geodesic(m, *pts[n], t[n]);
        return m;
    }

    /// Output (o, s) = wFM of taps X_j(s - i d), time-offset-major, over the taps
    /// that exist (s - i d >= 0).
    Grid<P> conv(const LayerSlot& slot, int c_in, int dilation, const Grid<P>& x, const std::vector<char>& need) {
        Grid<P> out(slot.outputs, x.length);
        const int k = slot.taps / c_in;
        for (int o = 0; o < slot.outputs; ++o) {
            const std::vector<S> t = fractions(slot.offset + static_cast<std::size_t>(o * slot.taps), slot.taps);
            std::vector<const P*> taps;
            for (int s = 0; s < x.length; ++s) {
                if (!need[static_cast<std::size_t>(s)]) continue;
                taps.clear();
                for (int i = 0; i < k && s - i * dilation >= 0; ++i)
                    for (int j = 0; j < c_in; ++j) taps.push_back(&x.at(j, s - i * dilation));
                out.at(o, s) = wfm(taps, t);
            }
        }
        return out;
    }

    /// Output (r, s) = wFM of [X_0(s) .. X_{c_in-1}(s), H_0(s) .. H_{c_out-1}(s)].
    Grid<P> residual(const LayerSlot& slot, const Grid<P>& x, const Grid<P>& h, const std::vector<char>& need) {
        Grid<P> out(slot.outputs, x.length);
        for (int r = 0; r < slot.outputs; ++r) {
            const std::vector<S> t = fractions(slot.offset + static_cast<std::size_t>(r * slot.taps), slot.taps);
            std::vector<const P*> pts;
            for (int s = 0; s < x.length; ++s) {
                if (!need[static_cast<std::size_t>(s)]) continue;
                pts.clear();
                for (int j = 0; j < x.channels; ++j) pts.push_back(&x.at(j, s));
                for (int j = 0; j < h.channels; ++j) pts.push_back(&h.at(j, s));
                out.at(r, s) = wfm(pts, t);
            }
        }
        return out;
    }

    Grid<P> load(const ManifoldSequence& seq) {
        Grid<P> g(seq.channels(), seq.length());
        for (int c = 0; c < seq.channels(); ++c)
            for (int s = 0; s < seq.length(); ++s) g.at(c, s) = ops_.input(seq.at(c, s));
        return g;
    }

    /// Runs every block. `need` marks the output time steps that must be
    /// computed; the steps each layer needs from its input are derived from it.
    Grid<P> blocks(Grid<P> x, const std::vector<char>& need) {
        const std::size_t nb = cfg_.blocks.size();
        // needs[b] = steps required at the input of block b; needs[nb] = output.
        std::vector<std::vector<char>> needs(nb + 1);
        std::vector<std::vector<char>> mid(nb);
        needs[nb] = need;
        for (std::size_t b = nb; b-- > 0;) {
            const int d = NetConfig::dilation(b);
            mid[b] = conv_needs(needs[b + 1], cfg_.kernel, d);  // conv1 output steps
            std::vector<char> in = conv_needs(mid[b], cfg_.kernel, d);
            for (std::size_t s = 0; s < in.size(); ++s) in[s] = in[s] || needs[b + 1][s];
            needs[b] = std::move(in);
        }
        for (std::size_t b = 0; b < nb; ++b) {
            const int d = NetConfig::dilation(b);
            const auto& slots = layout_.blocks()[b];
            const BlockSpec& spec = cfg_.blocks[b];
            Grid<P> h1 = conv(slots.conv1, spec.c_in, d, x, mid[b]);
            Grid<P> h2 = conv(slots.conv2, spec.c_out, d, h1, needs[b + 1]);
            x = residual(slots.residual, x, h2, needs[b + 1]);
        }
        return x;
    }

    std::vector<S> invariant_features(const std::vector<P>& last) {
        const LayerSlot& slot = layout_.templates();
        std::vector<const P*> pts;
        for (const P& p : last) pts.push_back(&p);
        std::vector<P> mu;
        for (int j = 0; j < slot.outputs; ++j)
            mu.push_back(wfm(pts, fractions(slot.offset + static_cast<std::size_t>(j * slot.taps), slot.taps)));
        std::vector<S> f;
        for (const P& p : last)
            for (const P& m : mu) f.push_back(ops_.dist(p, m));
        return f;
    }

    std::vector<S> tangent_features(const std::vector<P>& last) {
        std::vector<S> f;
        for (const P& p : last) {
            auto c = ops_.tangent_coords(p);
            f.insert(f.end(), c.begin(), c.end());
        }
        return f;
    }

    std::vector<S> features(const std::vector<P>& last) {
        if (static_cast<int>(last.size()) != cfg_.out_channels())
            throw DomainError("head expects " + std::to_string(cfg_.out_channels()) + " channels, got " +
                              std::to_string(last.size()));
        return cfg_.head == HeadKind::Invariant ? invariant_features(last) : tangent_features(last);
    }

    std::vector<S> fc(const std::vector<S>& f) {
        const std::size_t nf = f.size();
        std::vector<S> logits;
        for (int k = 0; k < cfg_.num_classes; ++k) {
            std::vector<S> w;
            w.reserve(nf);
            for (std::size_t i = 0; i < nf; ++i)
                w.push_back(ops_.param(layout_.weight_offset() + static_cast<std::size_t>(k) * nf + i));
            logits.push_back(ops_.affine(w, f, ops_.param(layout_.bias_offset() + static_cast<std::size_t>(k))));
        }
        return logits;
    }

    std::vector<S> head(const std::vector<P>& last) {
        if (cfg_.head == HeadKind::None) throw DomainError("network has no head");
        return fc(features(last));
    }

    std::vector<S> logits(const ManifoldSequence& seq) {
        if (seq.length() < 1) throw DomainError("network_forward: empty sequence");
        std::vector<char> need(static_cast<std::size_t>(seq.length()), 0);
        need.back() = 1;
        Grid<P> out = blocks(load(seq), need);
        std::vector<P> last;
        for (int c = 0; c < out.channels; ++c) last.push_back(out.at(c, out.length - 1));
        return head(last);
    }

    Grid<P> sequence(const ManifoldSequence& seq) {
        return blocks(load(seq), std::vector<char>(static_cast<std::size_t>(seq.length()), 1));
    }

    /// Mean over s of d^2(Y_0(s), X_0(s + 1)).
    S next_step_loss(const ManifoldSequence& seq) {
        if (seq.length() < 2) throw DomainError("group loss: sequence length must be at least 2");
        Grid<P> x = load(seq);
        std::vector<char> need(static_cast<std::size_t>(seq.length() - 1), 1);
        need.push_back(0);
        Grid<P> y = blocks(x, need);
        std::vector<S> terms;
        for (int s = 0; s + 1 < seq.length(); ++s) terms.push_back(ops_.sq_dist(y.at(0, s), x.at(0, s + 1)));
        return ops_.scale(ops_.sum(terms), 1.0 / static_cast<double>(seq.length() - 1));
    }

private:
    const NetConfig& cfg_;
    const ParamLayout& layout_;
    Ops& ops_;
};

// ---------------------------------------------------------------------------
// Network.

inline double log_sum_exp_loss(const std::vector<double>& z, int label) {
    if (label < 0 || label >= static_cast<int>(z.size())) throw DomainError("label out of range");
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - zmax);
    return zmax + std::log(denom) - z[static_cast<std::size_t>(label)];
}

inline int argmax(const std::vector<double>& z) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(z.size()); ++i)
        if (z[static_cast<std::size_t>(i)] > z[static_cast<std::size_t>(best)]) best = i;
    return best;
}

struct LossGradient {
    double loss = 0.0;
    std::vector<double> gradient;
    std::vector<double> logits;
    std::size_t fd_fallbacks = 0;
};

/// Fault injection for gradient checks: the named layer's parameters return a
/// scaled adjoint.
struct AdjointFault {
    std::string layer;
    double factor = 1.5;
};

class Network {
public:
    Network() = default;
    explicit Network(NetConfig cfg) : cfg_(std::move(cfg)), layout_(cfg_) {}

    const NetConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }
    std::size_t num_params() const { return layout_.size(); }

    /// Raw convex entries uniform in [0.5, 1.5], each vector rescaled to unit
    /// norm; FC weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; bias 0.
    std::vector<double> init_params(std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> raw(0.5, 1.5);
        std::vector<double> p(layout_.size(), 0.0);
        for (const auto& s : layout_.segments()) {
            if (s.kind == SegmentKind::Convex) {
                double norm = 0.0;
                for (std::size_t i = 0; i < s.length; ++i) {
                    p[s.offset + i] = raw(rng);
                    norm += p[s.offset + i] * p[s.offset + i];
                }
                norm = std::sqrt(norm);
                for (std::size_t i = 0; i < s.length; ++i) p[s.offset + i] /= norm;
            } else if (s.name == "head.weight") {
                const double a = 1.0 / std::sqrt(static_cast<double>(std::max(cfg_.feature_length(), 1)));
                std::uniform_real_distribution<double> fc(-a, a);
                for (std::size_t i = 0; i < s.length; ++i) p[s.offset + i] = fc(rng);
            }
        }
        return p;
    }

    void check_input(const ManifoldSequence& x) const {
        if (x.kind() != cfg_.manifold || x.dim() != cfg_.dim)
            throw DomainError("network expects " + std::string(to_string(cfg_.manifold)) + " dim " +
                              std::to_string(cfg_.dim) + ", input is " + std::string(to_string(x.kind())) + " dim " +
                              std::to_string(x.dim()));
        if (x.channels() != cfg_.in_channels)
            throw DomainError("network expects " + std::to_string(cfg_.in_channels) + " input channels, input has " +
                              std::to_string(x.channels()));
    }

    void check_params(std::span<const double> params) const {
        if (params.size() != layout_.size())
            throw DomainError("network has " + std::to_string(layout_.size()) + " parameters, got " +
                              std::to_string(params.size()));
    }

    std::vector<double> logits(std::span<const double> params, const ManifoldSequence& x) const {
        check_params(params);
        check_input(x);
        ValueOps ops(cfg_.manifold, params);
        return Forward<ValueOps>(cfg_, layout_, ops).logits(x);
    }

    int predict(std::span<const double> params, const ManifoldSequence& x) const { return argmax(logits(params, x)); }

    ManifoldSequence forward_sequence(std::span<const double> params, const ManifoldSequence& x) const {
        check_params(params);
        check_input(x);
        ValueOps ops(cfg_.manifold, params);
        Grid<Matrix> g = Forward<ValueOps>(cfg_, layout_, ops).sequence(x);
        ManifoldSequence out(cfg_.manifold, cfg_.dim, g.channels, g.length);
        for (int c = 0; c < g.channels; ++c)
            for (int s = 0; s < g.length; ++s) out.at(c, s) = g.at(c, s);
        return out;
    }

    /// Features fed to the FC layer, for inspection.
    std::vector<double> head_features(std::span<const double> params, const std::vector<Matrix>& last) const {
        check_params(params);
        ValueOps ops(cfg_.manifold, params);
        return Forward<ValueOps>(cfg_, layout_, ops).features(last);
    }

    std::vector<double> head_logits(std::span<const double> params, const std::vector<Matrix>& last) const {
        check_params(params);
        ValueOps ops(cfg_.manifold, params);
        return Forward<ValueOps>(cfg_, layout_, ops).head(last);
    }

    double classification_loss(std::span<const double> params, const ManifoldSequence& x, int label) const {
        return log_sum_exp_loss(logits(params, x), label);
    }

    double group_loss(std::span<const double> params, const ManifoldSequence& x) const {
        check_params(params);
        check_input(x);
        ValueOps ops(cfg_.manifold, params);
        return Forward<ValueOps>(cfg_, layout_, ops).next_step_loss(x);
    }

    LossGradient classification_gradient(std::span<const double> params, const ManifoldSequence& x, int label,
                                         const AdjointFault* fault = nullptr) const {
        check_params(params);
        check_input(x);
        return taped(params, fault, [&](Forward<TapeOps>& fw, TapeOps& ops, LossGradient& out) {
            const std::vector<ad::Var> z = fw.logits(x);
            for (const auto& v : z) out.logits.push_back(ops.value(v));
            return ad::softmax_cross_entropy(z, label);
        });
    }

    LossGradient group_gradient(std::span<const double> params, const ManifoldSequence& x,
                                const AdjointFault* fault = nullptr) const {
        check_params(params);
        check_input(x);
        return taped(params, fault, [&](Forward<TapeOps>& fw, TapeOps&, LossGradient&) { return fw.next_step_loss(x); });
    }

private:
    template <class Body>
    LossGradient taped(std::span<const double> params, const AdjointFault* fault, Body&& body) const {
        ad::Tape tape;
        TapeOps ops(cfg_.manifold, tape, params);
        if (fault) {
            bool found = false;
            for (const auto& s : layout_.segments())
                if (s.layer == fault->layer) {
                    ops.corrupt_range(s.offset, s.offset + s.length, fault->factor);
                    found = true;
                }
            if (!found) throw DomainError("no layer named '" + fault->layer + "'");
        }
        Forward<TapeOps> fw(cfg_, layout_, ops);
        LossGradient out;
        const ad::Var loss = body(fw, ops, out);
        out.loss = tape.scalar(loss);
        tape.backward(loss);
        out.gradient.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            // Read through the (possibly corrupted) leaf: the original variable ids are 0..P-1.
            out.gradient[i] = tape.scalar_adjoint(ad::Var{&tape, static_cast<std::uint32_t>(i)});
        }
        out.fd_fallbacks = tape.fd_fallbacks();
        return out;
    }

    NetConfig cfg_;
    ParamLayout layout_;
};

// ---------------------------------------------------------------------------
// Standalone layers, evaluated through the same forward code.

struct DilatedConvLayer {
    int kernel = 1;
    int dilation = 1;
    int c_in = 1;
    int c_out = 1;
    std::vector<ConvexWeights> weights;  // one per output channel, length kernel * c_in

    void validate() const {
        if (kernel < 1 || dilation < 1) throw DomainError("conv layer: kernel and dilation must be positive");
        if (static_cast<int>(weights.size()) != c_out)
            throw DomainError("conv layer: expected " + std::to_string(c_out) + " weight vectors");
        for (const auto& w : weights)
            if (static_cast<int>(w.size()) != kernel * c_in)
                throw DomainError("conv layer: weight vectors must have length kernel * c_in");
    }
};

struct ResidualBlock {
    DilatedConvLayer conv1;
    DilatedConvLayer conv2;
    std::vector<ConvexWeights> merge;  // one per residual channel, length c_in + c_out
};

struct InvariantHead {
    std::vector<ConvexWeights> templates;  // nC vectors of length c
    Matrix weight;                         // num_classes x (c * nC), features i-major
    Vector bias;
};

struct TangentHead {
    Matrix weight;  // num_classes x (c * tangent_dim)
    Vector bias;
};

namespace detail {

inline void append_raw(std::vector<double>& p, const std::vector<ConvexWeights>& ws) {
    for (const auto& w : ws) p.insert(p.end(), w.raw().begin(), w.raw().end());
}

inline Grid<Matrix> to_grid(const ManifoldSequence& x) {
    Grid<Matrix> g(x.channels(), x.length());
    for (int c = 0; c < x.channels(); ++c)
        for (int s = 0; s < x.length(); ++s) g.at(c, s) = x.at(c, s);
    return g;
}

inline ManifoldSequence from_grid(ManifoldKind kind, int dim, const Grid<Matrix>& g) {
    ManifoldSequence out(kind, dim, g.channels, g.length);
    for (int c = 0; c < g.channels; ++c)
        for (int s = 0; s < g.length; ++s) out.at(c, s) = g.at(c, s);
    return out;
}

inline void append_linear(std::vector<double>& p, const Matrix& w, const Vector& b) {
    for (Eigen::Index k = 0; k < w.rows(); ++k)
        for (Eigen::Index i = 0; i < w.cols(); ++i) p.push_back(w(k, i));
    for (Eigen::Index k = 0; k < b.size(); ++k) p.push_back(b(k));
}

}  // namespace detail

inline ManifoldSequence dilated_conv_forward(const DilatedConvLayer& layer, const ManifoldSequence& x) {
    layer.validate();
    if (x.channels() != layer.c_in)
        throw DomainError("conv layer expects " + std::to_string(layer.c_in) + " channels, input has " +
                          std::to_string(x.channels()));
    std::vector<double> p;
    detail::append_raw(p, layer.weights);
    NetConfig cfg;
    cfg.manifold = x.kind();
    cfg.dim = x.dim();
    ParamLayout layout;
    ValueOps ops(x.kind(), p);
    Forward<ValueOps> fw(cfg, layout, ops);
    const LayerSlot slot{0, layer.kernel * layer.c_in, layer.c_out, "conv"};
    return detail::from_grid(x.kind(), x.dim(),
                             fw.conv(slot, layer.c_in, layer.dilation, detail::to_grid(x),
                                     std::vector<char>(static_cast<std::size_t>(x.length()), 1)));
}

inline ManifoldSequence residual_forward(const ResidualBlock& block, const ManifoldSequence& x) {
    const ManifoldSequence h = dilated_conv_forward(block.conv2, dilated_conv_forward(block.conv1, x));
    const int taps = x.channels() + h.channels();
    std::vector<double> p;
    for (const auto& w : block.merge) {
        if (static_cast<int>(w.size()) != taps)
            throw DomainError("residual merge weights must have length c_in + c_out = " + std::to_string(taps));
    }
    detail::append_raw(p, block.merge);
    NetConfig cfg;
    cfg.manifold = x.kind();
    cfg.dim = x.dim();
    ParamLayout layout;
    ValueOps ops(x.kind(), p);
    Forward<ValueOps> fw(cfg, layout, ops);
    const LayerSlot slot{0, taps, static_cast<int>(block.merge.size()), "residual"};
    return detail::from_grid(x.kind(), x.dim(),
                             fw.residual(slot, detail::to_grid(x), detail::to_grid(h),
                                         std::vector<char>(static_cast<std::size_t>(x.length()), 1)));
}

inline std::vector<double> invariant_head_forward(const InvariantHead& head, ManifoldKind kind,
                                                  const std::vector<Matrix>& last) {
    NetConfig cfg;
    cfg.manifold = kind;
    cfg.dim = static_cast<int>(last.empty() ? 1 : last[0].rows());
    cfg.in_channels = static_cast<int>(last.size());
    cfg.head = HeadKind::Invariant;
    cfg.n_templates = static_cast<int>(head.templates.size());
    cfg.num_classes = static_cast<int>(head.weight.rows());
    for (const auto& w : head.templates)
        if (static_cast<int>(w.size()) != cfg.in_channels)
            throw DomainError("invariant head templates expect " + std::to_string(w.size()) + " channels, got " +
                              std::to_string(last.size()));
    if (head.weight.cols() != cfg.feature_length() || head.bias.size() != head.weight.rows())
        throw DomainError("invariant head FC shape does not match c * nC features");
    Network net(cfg);
    std::vector<double> p;
    detail::append_raw(p, head.templates);
    detail::append_linear(p, head.weight, head.bias);
    return net.head_logits(p, last);
}

inline std::vector<double> tangent_head_forward(const TangentHead& head, ManifoldKind kind,
                                                const std::vector<Matrix>& last) {
    NetConfig cfg;
    cfg.manifold = kind;
    cfg.dim = static_cast<int>(last.empty() ? 1 : last[0].rows());
    cfg.in_channels = static_cast<int>(last.size());
    cfg.head = HeadKind::Tangent;
    cfg.num_classes = static_cast<int>(head.weight.rows());
    if (head.weight.cols() != cfg.feature_length() || head.bias.size() != head.weight.rows())
        throw DomainError("tangent head FC expects " + std::to_string(cfg.feature_length()) + " features");
    Network net(cfg);
    std::vector<double> p;
    detail::append_linear(p, head.weight, head.bias);
    return net.head_logits(p, last);
}

}  // namespace mdcnn
