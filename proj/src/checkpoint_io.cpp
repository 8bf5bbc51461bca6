#include "looplab/checkpoint.hpp"

#include <json.hpp>

#include <cstring>

namespace looplab {
namespace ckpt_io {

using json = nlohmann::json;

void write_bytes(std::ostream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), std::streamsize(n));
}

void write_u32(std::ostream& out, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

void write_i64(std::ostream& out, int64_t v) { write_u64(out, uint64_t(v)); }

void write_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, uint32_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

void read_bytes(std::istream& in, void* p, size_t n) {
    in.read(static_cast<char*>(p), std::streamsize(n));
    if (!in) throw IoError("truncated checkpoint stream");
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    read_bytes(in, b, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    read_bytes(in, b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

int64_t read_i64(std::istream& in) { return int64_t(read_u64(in)); }

double read_f64(std::istream& in) {
    const uint64_t bits = read_u64(in);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string read_string(std::istream& in) {
    const uint32_t n = read_u32(in);
    std::string s(n, '\0');
    if (n) read_bytes(in, s.data(), n);
    return s;
}

std::string config_to_json(const BackboneConfig& cfg) {
    json j;
    j["depth"] = cfg.depth;
    j["d_model"] = cfg.d_model;
    j["n_q_heads"] = cfg.n_q_heads;
    j["n_kv_heads"] = cfg.n_kv_heads;
    j["head_dim"] = cfg.head_dim;
    j["n_layers"] = cfg.n_layers;
    j["vocab_size_raw"] = cfg.vocab_size_raw;
    j["vocab_size"] = cfg.vocab_size;
    j["seq_len"] = cfg.seq_len;
    j["rope_base"] = cfg.rope_base;
    j["attn_type"] = attn_type_name(cfg.attn_type);
    j["mla_rank"] = cfg.mla_rank;
    j["window_pattern"] = cfg.window_pattern;
    j["softcap_scale"] = cfg.softcap_scale;
    j["ffn_expansion"] = cfg.ffn_expansion;
    return j.dump();
}

BackboneConfig config_from_json(const std::string& text) {
    const json j = json::parse(text);
    BackboneConfig cfg;
    cfg.depth = j.at("depth").get<int>();
    cfg.d_model = j.at("d_model").get<int64_t>();
    cfg.n_q_heads = j.at("n_q_heads").get<int64_t>();
    cfg.n_kv_heads = j.at("n_kv_heads").get<int64_t>();
    cfg.head_dim = j.at("head_dim").get<int64_t>();
    cfg.n_layers = j.at("n_layers").get<int64_t>();
    cfg.vocab_size_raw = j.at("vocab_size_raw").get<int64_t>();
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.seq_len = j.at("seq_len").get<int64_t>();
    cfg.rope_base = j.at("rope_base").get<double>();
    cfg.attn_type = parse_attn_type(j.at("attn_type").get<std::string>());
    cfg.mla_rank = j.at("mla_rank").get<int64_t>();
    cfg.window_pattern = j.at("window_pattern").get<std::string>();
    cfg.softcap_scale = j.at("softcap_scale").get<double>();
    cfg.ffn_expansion = j.at("ffn_expansion").get<int64_t>();
    validate_config(cfg);
    return cfg;
}

}  // namespace ckpt_io
}  // namespace looplab
