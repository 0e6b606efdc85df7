#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <vector>

#include "embsformer/data.hpp"
#include "embsformer/model.hpp"

namespace embs {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Binary layout, all integers little-endian:
///   "EMBS1"
///   u64 length, model config text (`key = value` lines)
///   u64 tensor count
///   per tensor: u32 name length, name, u32 rank, u64 dims[rank], f64 values
/// Parameters appear in model order followed by "normalizer.mean" and
/// "normalizer.std".
struct Checkpoint {
    ModelConfig config;
    NormalizationStats normalizer;
    std::vector<NamedTensor> tensors;  // model parameters only
};

inline constexpr char kCheckpointMagic[] = "EMBS1";

void write_checkpoint(const EMBSFormer& model, const NormalizationStats& normalizer, std::ostream& out);
void save_checkpoint(const EMBSFormer& model, const NormalizationStats& normalizer, const std::filesystem::path& path);

Checkpoint read_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Builds a model from `checkpoint` over `basis`, checking every parameter
/// name and shape.
EMBSFormer instantiate(const Checkpoint& checkpoint, std::shared_ptr<const ChebyshevBasis> basis);

}  // namespace embs
