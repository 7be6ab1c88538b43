#include "mlit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mlit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'L', 'I', 'T', 'C', 'K', 'P', 'T'};

class Writer {
public:
    template <class T>
    void pod(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + sizeof(T));
    }
    void str(const std::string& s) {
        pod(static_cast<std::uint32_t>(s.size()));
        out.insert(out.end(), s.begin(), s.end());
    }
    void raw(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out.insert(out.end(), p, p + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes(b) {}
    template <class T>
    T pod() {
        T v;
        std::memcpy(&v, need(sizeof(T)), sizeof(T));
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        const auto* p = need(n);
        return {reinterpret_cast<const char*>(p), n};
    }
    const std::uint8_t* need(std::size_t n) {
        if (bytes.size() - pos < n)
            throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
        const auto* p = bytes.data() + pos;
        pos += n;
        return p;
    }
    bool done() const { return pos == bytes.size(); }

private:
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

} // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name)
            return &t;
    return nullptr;
}

void Checkpoint::put(std::string name, const Tensor& tensor) {
    for (auto& [n, t] : tensors)
        if (n == name) {
            t = tensor.detach().clone();
            return;
        }
    tensors.emplace_back(std::move(name), tensor.detach().clone());
}

std::vector<std::uint8_t> encode(const Checkpoint& c) {
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.pod(Checkpoint::kVersion);
    w.pod(c.seed);
    w.pod(c.epoch);
    w.pod(c.optimizer_step);
    w.pod(static_cast<std::uint32_t>(c.config.size()));
    for (const auto& [k, v] : c.config) {
        w.str(k);
        w.str(v);
    }
    w.pod(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        w.str(name);
        w.pod(static_cast<std::uint8_t>(t.dtype()));
        w.pod(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape())
            w.pod(static_cast<std::int64_t>(d));
        dispatch(t.dtype(), [&]<class T>() {
            auto data = t.data<T>();
            w.raw(data.data(), data.size_bytes());
        });
    }
    return std::move(w.out);
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (std::memcmp(r.need(sizeof kMagic), kMagic, sizeof kMagic) != 0)
        throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = r.pod<std::uint32_t>();
    if (version != Checkpoint::kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.seed = r.pod<std::uint64_t>();
    c.epoch = r.pod<std::int64_t>();
    c.optimizer_step = r.pod<std::int64_t>();
    const auto n_config = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_config; ++i) {
        auto k = r.str();
        c.config[k] = r.str();
    }
    const auto n_tensors = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        auto name = r.str();
        const auto dt = r.pod<std::uint8_t>();
        if (dt > static_cast<std::uint8_t>(DType::f64))
            throw CheckpointError("tensor " + name + ": unknown dtype " + std::to_string(dt));
        const auto ndim = r.pod<std::uint32_t>();
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            const auto v = r.pod<std::int64_t>();
            if (v < 0)
                throw CheckpointError("tensor " + name + ": negative dimension");
            shape.push_back(v);
        }
        const auto numel = static_cast<std::size_t>(shape_numel(shape));
        Tensor t = dispatch(static_cast<DType>(dt), [&]<class T>() {
            std::vector<T> values(numel);
            std::memcpy(values.data(), r.need(numel * sizeof(T)), numel * sizeof(T));
            return Tensor::adopt<T>(shape, std::move(values));
        });
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done())
        throw CheckpointError("trailing bytes after checkpoint payload");
    return c;
}

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt) {
    const auto bytes = encode(ckpt);
    const auto tmp = std::filesystem::path(file.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw CheckpointError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw CheckpointError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, file);
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw CheckpointError("cannot open checkpoint " + file.string());
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode(bytes);
}

void store_params(Checkpoint& ckpt, const ParamList& params) {
    for (const auto& p : params.items())
        ckpt.put(p.name, p.tensor);
}

namespace {

void copy_into(const std::string& name, const Tensor& src, Tensor dst) {
    if (src.shape() != dst.shape())
        throw CheckpointError("tensor " + name + ": checkpoint shape " + shape_str(src.shape()) +
                              " does not match model shape " + shape_str(dst.shape()));
    Tensor converted = src.to(dst.dtype());
    dispatch(dst.dtype(), [&]<class T>() {
        auto from = converted.data<T>();
        auto to = dst.mutable_data<T>();
        std::copy(from.begin(), from.end(), to.begin());
    });
}

} // namespace

void restore_params(const Checkpoint& ckpt, const ParamList& params, const std::vector<std::string>& skip) {
    for (const auto& p : params.items()) {
        bool skipped = false;
        for (const auto& prefix : skip)
            skipped = skipped || p.name.rfind(prefix, 0) == 0;
        if (skipped)
            continue;
        const Tensor* t = ckpt.find(p.name);
        if (!t)
            throw CheckpointError("tensor " + p.name + " not found in checkpoint");
        copy_into(p.name, *t, p.tensor);
    }
}

void store_optimizer(Checkpoint& ckpt, const AdamW& opt) {
    const auto& items = opt.params().items();
    for (std::size_t i = 0; i < items.size(); ++i) {
        ckpt.put("optim.m." + items[i].name, opt.first_moments()[i]);
        ckpt.put("optim.v." + items[i].name, opt.second_moments()[i]);
    }
    ckpt.optimizer_step = opt.steps();
}

void restore_optimizer(const Checkpoint& ckpt, AdamW& opt) {
    std::vector<Tensor> m, v;
    for (const auto& p : opt.params().items()) {
        const Tensor* a = ckpt.find("optim.m." + p.name);
        const Tensor* b = ckpt.find("optim.v." + p.name);
        if (!a || !b)
            throw CheckpointError("optimizer state for " + p.name + " not found in checkpoint");
        if (a->shape() != p.tensor.shape() || b->shape() != p.tensor.shape())
            throw CheckpointError("optimizer state for " + p.name + " has shape " + shape_str(a->shape()) +
                                  ", parameter has " + shape_str(p.tensor.shape()));
        m.push_back(*a);
        v.push_back(*b);
    }
    opt.load_state(ckpt.optimizer_step, std::move(m), std::move(v));
}

} // namespace mlit
