#include "embsformer/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace embs {

namespace {

template <typename T>
void put(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
        throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

std::string get_string(std::istream& in, std::uint64_t length, const char* what) {
    if (length > (1u << 26)) throw CheckpointError(std::string("checkpoint: implausible length for ") + what);
    std::string s(length, '\0');
    if (length && !in.read(s.data(), static_cast<std::streamsize>(length))) {
        throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
    }
    return s;
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.values()) put<double>(out, v);
}

}  // namespace

void write_checkpoint(const EMBSFormer& model, const NormalizationStats& normalizer, std::ostream& out) {
    out.write(kCheckpointMagic, 5);
    const std::string config = model.config().to_text();
    put<std::uint64_t>(out, config.size());
    out.write(config.data(), static_cast<std::streamsize>(config.size()));
    put<std::uint64_t>(out, model.parameters().size() + 2);
    for (const auto& [name, t] : model.parameters()) put_tensor(out, name, t);
    put_tensor(out, "normalizer.mean", Tensor({normalizer.mean.size()}, normalizer.mean));
    put_tensor(out, "normalizer.std", Tensor({normalizer.std.size()}, normalizer.std));
    if (!out) throw CheckpointError("checkpoint: write failed");
}

void save_checkpoint(const EMBSFormer& model, const NormalizationStats& normalizer, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
    write_checkpoint(model, normalizer, out);
}

Checkpoint read_checkpoint(std::istream& in) {
    char magic[5] = {};
    if (!in.read(magic, 5) || std::memcmp(magic, kCheckpointMagic, 5) != 0) {
        throw CheckpointError("checkpoint: bad magic, not an EMBS1 file");
    }
    Checkpoint ck;
    const auto config_len = get<std::uint64_t>(in, "config length");
    try {
        ck.config = ModelConfig::from_text(get_string(in, config_len, "config"));
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    const auto count = get<std::uint64_t>(in, "tensor count");
    bool have_mean = false, have_std = false;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = get_string(in, get<std::uint32_t>(in, "name length"), "tensor name");
        const auto rank = get<std::uint32_t>(in, "rank");
        if (rank == 0 || rank > 8) throw CheckpointError("checkpoint: tensor '" + name + "' has invalid rank");
        Shape shape(rank);
        std::size_t size = 1;
        for (auto& d : shape) {
            d = get<std::uint64_t>(in, "dimension");
            if (d == 0 || d > (1u << 26)) throw CheckpointError("checkpoint: tensor '" + name + "' has invalid shape");
            size *= d;
        }
        if (size > (1u << 28)) throw CheckpointError("checkpoint: tensor '" + name + "' is implausibly large");
        std::vector<double> values(size);
        for (double& v : values) v = get<double>(in, "values");
        if (name == "normalizer.mean") {
            ck.normalizer.mean = std::move(values);
            have_mean = true;
        } else if (name == "normalizer.std") {
            ck.normalizer.std = std::move(values);
            have_std = true;
        } else {
            ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
        }
    }
    if (!have_mean || !have_std) throw CheckpointError("checkpoint: normalizer statistics missing");
    if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes after last tensor");
    return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
    return read_checkpoint(in);
}

EMBSFormer instantiate(const Checkpoint& checkpoint, std::shared_ptr<const ChebyshevBasis> basis) {
    EMBSFormer model(checkpoint.config, std::move(basis));
    const auto& params = model.parameters();
    if (params.size() != checkpoint.tensors.size()) {
        throw CheckpointError("checkpoint: holds " + std::to_string(checkpoint.tensors.size()) +
                              " parameters, config implies " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, stored] = checkpoint.tensors[i];
        Tensor live = params[i].second;
        if (name != params[i].first || stored.shape() != live.shape()) {
            throw CheckpointError("checkpoint: tensor '" + name + "' " + shape_to_string(stored.shape()) +
                                  " does not match '" + params[i].first + "' " + shape_to_string(live.shape()));
        }
        std::copy(stored.values().begin(), stored.values().end(), live.mutable_data().begin());
    }
    return model;
}

}  // namespace embs
