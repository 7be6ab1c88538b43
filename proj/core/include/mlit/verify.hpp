#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mlit {

struct VerifyCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct VerifyOptions {
    /// Replaces the hidden-size schedule under test (mutation testing).
    std::function<std::vector<std::int64_t>(int, std::int64_t, std::int64_t)> hidden_schedule;
};

/// Reference examples: gate worked matrices, schedules, parameter totals,
/// learning-rate scaling and masking counts.
std::vector<VerifyCheck> run_verify(const VerifyOptions& options = {});

/// Reference parameter totals (headless encoders, decoder).
struct ParamReference {
    std::string name;
    double reference;
    double tolerance; // relative
};
std::vector<ParamReference> param_references();

/// Decoder total under both readings of the positional table question:
/// without (default model) and with a decoder-side table.
struct DecoderCounts {
    std::int64_t without_pos_table;
    std::int64_t with_pos_table;
};
DecoderCounts decoder_counts();

} // namespace mlit
