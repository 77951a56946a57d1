#pragma once

// Parameter files.
//
//   "MPAR"            4 bytes
//   version           u16 (1)
//   count             u64
//   values            count x f64
//   index map length  u64
//   index map         UTF-8 text
//
// All integers and floats little-endian. The index map starts with '#'
// lines carrying the architecture (`# key = value`, the NetConfig text form),
// followed by one `name offset length convex|linear` line per segment, so a
// parameter file fully describes its model.

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "mdcnn/errors.hpp"
#include "mdcnn/io.hpp"
#include "mdcnn/net.hpp"

namespace mdcnn {

inline constexpr std::uint16_t kParamsVersion = 1;

struct ModelParams {
    std::vector<double> values;
    std::string index_map;
};

inline std::string model_index_map(const NetConfig& cfg) {
    std::string out;
    std::istringstream in(cfg.to_text());
    std::string line;
    while (std::getline(in, line)) out += "# " + line + "\n";
    return out + ParamLayout(cfg).index_map();
}

inline ModelParams make_model_params(const Network& net, std::vector<double> values) {
    net.check_params(values);
    return {std::move(values), model_index_map(net.config())};
}

inline io::ByteWriter encode_params(const ModelParams& p) {
    io::ByteWriter w;
    w.put_bytes("MPAR");
    w.put<std::uint16_t>(kParamsVersion);
    w.put<std::uint64_t>(p.values.size());
    for (double v : p.values) w.put<double>(v);
    w.put<std::uint64_t>(p.index_map.size());
    w.put_bytes(p.index_map);
    return w;
}

inline ModelParams decode_params(io::ByteReader& r) {
    r.expect_magic("MPAR");
    const std::uint64_t at = r.offset();
    const auto version = r.get<std::uint16_t>("version");
    if (version != kParamsVersion) throw FormatError("unsupported parameter file version " + std::to_string(version), at);
    const std::uint64_t count_at = r.offset();
    const auto count = r.get<std::uint64_t>("parameter count");
    if (count > r.remaining() / 8) throw FormatError("parameter count exceeds file size", count_at);
    ModelParams p;
    p.values.resize(count);
    for (auto& v : p.values) v = r.get<double>("parameter value");
    const std::uint64_t len_at = r.offset();
    const auto len = r.get<std::uint64_t>("index map length");
    if (len > r.remaining()) throw FormatError("index map length exceeds file size", len_at);
    p.index_map = r.get_bytes(len, "index map");
    if (!r.at_end()) throw FormatError("trailing bytes after index map", r.offset());
    return p;
}

inline void save_params(const std::string& path, const ModelParams& p) {
    encode_params(p).save(path);
}

inline ModelParams load_params(const std::string& path) {
    auto r = io::ByteReader::from_file(path);
    return decode_params(r);
}

/// Recovers the architecture from the '#' lines of an index map and checks the
/// segment lines against it.
inline NetConfig config_from_index_map(const std::string& index_map) {
    std::istringstream in(index_map);
    std::string line, cfg_text;
    while (std::getline(in, line))
        if (line.rfind("# ", 0) == 0) cfg_text += line.substr(2) + "\n";
    if (cfg_text.empty()) throw DomainError("parameter file carries no architecture lines");
    NetConfig cfg = NetConfig::parse(cfg_text);
    if (model_index_map(cfg) != index_map) throw DomainError("parameter index map does not match its architecture");
    return cfg;
}

struct Model {
    Network network;
    std::vector<double> params;
};

inline void save_model(const std::string& path, const Network& net, const std::vector<double>& params) {
    save_params(path, make_model_params(net, params));
}

inline Model load_model(const std::string& path) {
    ModelParams p = load_params(path);
    Network net(config_from_index_map(p.index_map));
    net.check_params(p.values);
    return {std::move(net), std::move(p.values)};
}

}  // namespace mdcnn
