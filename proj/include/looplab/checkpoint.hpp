#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "looplab/backbone.hpp"
#include "looplab/errors.hpp"

namespace looplab {

// Self-describing binary checkpoint container, little-endian throughout:
//
//   magic "LOOPCKPT" | u32 version=1 | u32 scalar_width (4|8)
//   u32 config_len | config JSON bytes
//   u64 n_arrays | arrays
//   u8 has_optimizer | [ i64 opt_step | u64 n_arrays | arrays ]
//
// each array: u32 name_len | name | u32 ndim | u64 dims[] | payload
// Weight array names match ModelWeights::named_params(); optimizer buffers
// are "muon.<param>.momentum", "adamw.<param>.m" and "adamw.<param>.v".

inline constexpr char kCheckpointMagic[8] = {'L', 'O', 'O', 'P', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace ckpt_io {

void write_bytes(std::ostream& out, const void* p, size_t n);
void write_u32(std::ostream& out, uint32_t v);
void write_u64(std::ostream& out, uint64_t v);
void write_i64(std::ostream& out, int64_t v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, const std::string& s);

void read_bytes(std::istream& in, void* p, size_t n);
uint32_t read_u32(std::istream& in);
uint64_t read_u64(std::istream& in);
int64_t read_i64(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in);

std::string config_to_json(const BackboneConfig& cfg);
BackboneConfig config_from_json(const std::string& text);

template <class Real>
void write_array(std::ostream& out, const std::string& name, const Shape& shape,
                 const std::vector<Real>& data) {
    write_string(out, name);
    write_u32(out, uint32_t(shape.size()));
    for (int64_t d : shape) write_u64(out, uint64_t(d));
    for (Real x : data) {
        if constexpr (sizeof(Real) == 4) {
            uint32_t bits;
            static_assert(sizeof(bits) == sizeof(float));
            std::memcpy(&bits, &x, 4);
            write_u32(out, bits);
        } else {
            write_f64(out, double(x));
        }
    }
}

template <class Real>
void read_array(std::istream& in, std::string* name, Shape* shape, std::vector<Real>* data) {
    *name = read_string(in);
    const uint32_t ndim = read_u32(in);
    shape->clear();
    int64_t numel = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
        shape->push_back(int64_t(read_u64(in)));
        numel *= shape->back();
    }
    data->resize(size_t(numel));
    for (auto& x : *data) {
        if constexpr (sizeof(Real) == 4) {
            const uint32_t bits = read_u32(in);
            float f;
            std::memcpy(&f, &bits, 4);
            x = f;
        } else {
            x = Real(read_f64(in));
        }
    }
}

}  // namespace ckpt_io

template <class Real>
struct OptimizerCheckpoint {
    int64_t step = 0;
    // buffer name -> (shape, values)
    std::vector<std::tuple<std::string, Shape, std::vector<Real>>> buffers;
};

template <class Real>
void save_checkpoint(const std::string& path, const ModelWeights<Real>& w,
                     const OptimizerCheckpoint<Real>* opt = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint \"" + path + "\"");
    ckpt_io::write_bytes(out, kCheckpointMagic, 8);
    ckpt_io::write_u32(out, kCheckpointVersion);
    ckpt_io::write_u32(out, uint32_t(sizeof(Real)));
    ckpt_io::write_string(out, ckpt_io::config_to_json(w.cfg));

    const auto params = w.named_params();
    ckpt_io::write_u64(out, uint64_t(params.size()));
    for (const auto& p : params) ckpt_io::write_array(out, p.name, p.tensor->shape, p.tensor->v);

    ckpt_io::write_bytes(out, opt ? "\1" : "\0", 1);
    if (opt) {
        ckpt_io::write_i64(out, opt->step);
        ckpt_io::write_u64(out, uint64_t(opt->buffers.size()));
        for (const auto& [name, shape, data] : opt->buffers)
            ckpt_io::write_array(out, name, shape, data);
    }
    out.flush();
    if (!out) throw IoError("write to checkpoint \"" + path + "\" failed");
}

template <class Real>
struct LoadedCheckpoint {
    ModelWeights<Real> weights;
    bool has_optimizer = false;
    OptimizerCheckpoint<Real> optimizer;
};

template <class Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint \"" + path + "\"");
    char magic[8];
    ckpt_io::read_bytes(in, magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("\"" + path + "\" is not a checkpoint file");
    const uint32_t version = ckpt_io::read_u32(in);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    const uint32_t width = ckpt_io::read_u32(in);
    if (width != sizeof(Real))
        throw IoError("checkpoint scalar width " + std::to_string(width) +
                      " does not match the requested width " + std::to_string(sizeof(Real)));

    LoadedCheckpoint<Real> lc;
    const auto cfg = ckpt_io::config_from_json(ckpt_io::read_string(in));
    lc.weights = init_weights<Real>(cfg, 0);  // structure only; values overwritten below

    std::map<std::string, TensorPtr<Real>> by_name;
    for (const auto& p : lc.weights.named_params()) by_name[p.name] = p.tensor;

    const uint64_t n_arrays = ckpt_io::read_u64(in);
    if (n_arrays != by_name.size())
        throw IoError("checkpoint holds " + std::to_string(n_arrays) + " arrays, expected " +
                      std::to_string(by_name.size()));
    for (uint64_t i = 0; i < n_arrays; ++i) {
        std::string name;
        Shape shape;
        std::vector<Real> data;
        ckpt_io::read_array(in, &name, &shape, &data);
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("unexpected checkpoint array \"" + name + "\"");
        if (it->second->shape != shape)
            throw IoError("checkpoint array \"" + name + "\" has shape " + shape_str(shape) +
                          ", expected " + shape_str(it->second->shape));
        it->second->v = std::move(data);
    }

    char has_opt;
    ckpt_io::read_bytes(in, &has_opt, 1);
    if (has_opt) {
        lc.has_optimizer = true;
        lc.optimizer.step = ckpt_io::read_i64(in);
        const uint64_t n_opt = ckpt_io::read_u64(in);
        for (uint64_t i = 0; i < n_opt; ++i) {
            std::string name;
            Shape shape;
            std::vector<Real> data;
            ckpt_io::read_array(in, &name, &shape, &data);
            lc.optimizer.buffers.emplace_back(std::move(name), std::move(shape), std::move(data));
        }
    }
    if (!in) throw IoError("truncated checkpoint \"" + path + "\"");
    return lc;
}

}  // namespace looplab
