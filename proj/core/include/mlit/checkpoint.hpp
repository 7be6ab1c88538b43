#pragma once

#include "mlit/nn.hpp"
#include "mlit/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mlit {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Binary layout (little-endian):
///   "MLITCKPT" | u32 version | u64 seed | i64 epoch | i64 optimizer_step
///   u32 n_config | n_config x (u32 len, key, u32 len, value)   keys sorted
///   u32 n_tensors | n_tensors x (u32 len, name, u8 dtype, u32 ndim, ndim x i64, raw data)
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t seed = 0;
    std::int64_t epoch = 0;
    std::int64_t optimizer_step = 0;
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
    void put(std::string name, const Tensor& tensor);
};

std::vector<std::uint8_t> encode(const Checkpoint& ckpt);
Checkpoint decode(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& file);

/// Adds every parameter under its ParamList name.
void store_params(Checkpoint& ckpt, const ParamList& params);

/// Copies stored values into the parameters in place. Parameters whose name
/// starts with one of `skip_prefixes` are left alone. Missing tensors and shape
/// mismatches throw CheckpointError naming the tensor.
void restore_params(const Checkpoint& ckpt, const ParamList& params,
                    const std::vector<std::string>& skip_prefixes = {});

/// Optimizer moments as "optim.m.<param>" / "optim.v.<param>".
void store_optimizer(Checkpoint& ckpt, const AdamW& opt);
void restore_optimizer(const Checkpoint& ckpt, AdamW& opt);

} // namespace mlit
