// SPDX-License-Identifier: Apache-2.0
#include "eoe/checkpoint.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace eoe {

namespace {

constexpr std::array<char, 4> kMagic{'E', 'O', 'E', 'C'};
constexpr std::size_t kPrefixBytes = 12;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
    }
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::size_t parse_count(const std::string& key, const std::string& value) {
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw FormatError("checkpoint header: '" + key + "' is not a non-negative integer: " + value);
    }
    return out;
}

CheckpointHeader parse_header_text(const std::string& text) {
    static const std::array<const char*, 10> kKeys{"vocab_size", "ctx_len", "n_layers",         "d_model",   "n_heads",
                                                   "d_ff",       "tie_head", "source_expert_id", "best_loss", "step"};
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t index = 0;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos || index >= kKeys.size() || line.substr(0, eq) != kKeys[index]) {
            throw FormatError("checkpoint header: unexpected line '" + line + "'");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
        ++index;
    }
    if (index != kKeys.size()) {
        throw FormatError("checkpoint header: expected " + std::to_string(kKeys.size()) + " keys, found " +
                          std::to_string(index));
    }
    CheckpointHeader h;
    h.config.vocab_size = parse_count("vocab_size", kv["vocab_size"]);
    h.config.ctx_len = parse_count("ctx_len", kv["ctx_len"]);
    h.config.n_layers_total = parse_count("n_layers", kv["n_layers"]);
    h.config.n_experts = 1;
    h.config.d_model = parse_count("d_model", kv["d_model"]);
    h.config.n_heads = parse_count("n_heads", kv["n_heads"]);
    h.config.d_ff = parse_count("d_ff", kv["d_ff"]);
    const std::size_t tie = parse_count("tie_head", kv["tie_head"]);
    if (tie > 1) {
        throw FormatError("checkpoint header: tie_head must be 0 or 1");
    }
    h.config.tie_head = tie == 1;
    h.meta.source_expert_id = parse_count("source_expert_id", kv["source_expert_id"]);
    h.meta.step = parse_count("step", kv["step"]);
    char* end = nullptr;
    h.meta.best_loss = std::strtod(kv["best_loss"].c_str(), &end);
    if (end == kv["best_loss"].c_str() || *end != '\0') {
        throw FormatError("checkpoint header: best_loss is not a number");
    }
    try {
        h.config.validate();
    } catch (const UsageError& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    return h;
}

std::ifstream open_for_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return in;
}

CheckpointHeader read_header(std::ifstream& in, const std::filesystem::path& path) {
    std::array<unsigned char, kPrefixBytes> prefix{};
    in.read(reinterpret_cast<char*>(prefix.data()), prefix.size());
    if (in.gcount() != static_cast<std::streamsize>(prefix.size())) {
        throw LengthError(path.string() + ": file shorter than the checkpoint prefix");
    }
    if (std::memcmp(prefix.data(), kMagic.data(), kMagic.size()) != 0) {
        throw FormatError(path.string() + ": bad magic, not an EOEC checkpoint");
    }
    const std::uint32_t version = get_u32(prefix.data() + 4);
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t header_len = get_u32(prefix.data() + 8);
    const std::uintmax_t actual = std::filesystem::file_size(path);
    if (kPrefixBytes + static_cast<std::uintmax_t>(header_len) > actual) {
        throw LengthError(path.string() + ": header length " + std::to_string(header_len) + " runs past end of file");
    }
    std::string text(header_len, '\0');
    in.read(text.data(), header_len);

    CheckpointHeader h = parse_header_text(text);
    h.scalar_count = count_params(h.config, Scope::full);
    h.file_bytes = kPrefixBytes + header_len + h.scalar_count * sizeof(float);
    if (actual < h.file_bytes) {
        throw LengthError(path.string() + ": truncated tensor data (" + std::to_string(actual) + " of " +
                          std::to_string(h.file_bytes) + " bytes)");
    }
    if (actual > h.file_bytes) {
        throw FormatError(path.string() + ": tensor data larger than the header's config implies (" +
                          std::to_string(actual) + " vs " + std::to_string(h.file_bytes) + " bytes)");
    }
    return h;
}

}  // namespace

std::vector<unsigned char> encode_checkpoint_prefix(const ModelConfig& standalone, const CheckpointMeta& meta) {
    std::string text;
    text += "vocab_size=" + std::to_string(standalone.vocab_size) + "\n";
    text += "ctx_len=" + std::to_string(standalone.ctx_len) + "\n";
    text += "n_layers=" + std::to_string(standalone.n_layers_total) + "\n";
    text += "d_model=" + std::to_string(standalone.d_model) + "\n";
    text += "n_heads=" + std::to_string(standalone.n_heads) + "\n";
    text += "d_ff=" + std::to_string(standalone.ffn_dim()) + "\n";
    text += std::string("tie_head=") + (standalone.tie_head ? "1" : "0") + "\n";
    text += "source_expert_id=" + std::to_string(meta.source_expert_id) + "\n";
    text += "best_loss=" + format_double(meta.best_loss) + "\n";
    text += "step=" + std::to_string(meta.step) + "\n";

    std::vector<unsigned char> out(kMagic.begin(), kMagic.end());
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    return out;
}

void save_best_checkpoint(const ParamStore<float>& params, const BestExpertSnapshot& best,
                          const ModelConfig& model_config, const std::filesystem::path& path) {
    if (params.config != model_config) {
        throw UsageError("parameter store does not match the model config");
    }
    const ParamStore<float> standalone = materialize_best(params, best);
    const CheckpointMeta meta{best.source_expert_id, best.loss, best.step_taken};
    std::vector<unsigned char> bytes = encode_checkpoint_prefix(standalone.config, meta);
    bytes.reserve(bytes.size() + count_params(standalone.config, Scope::full) * sizeof(float));
    for (const auto& ref : standalone.named()) {
        for (float x : ref.tensor->values()) {
            put_u32(bytes, std::bit_cast<std::uint32_t>(x));
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in = open_for_read(path);
    return read_header(in, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in = open_for_read(path);
    const CheckpointHeader h = read_header(in, path);
    LoadedCheckpoint ck{h.config, zero_params<float>(h.config), h.meta};
    std::vector<unsigned char> buf;
    for (auto& ref : ck.params.named()) {
        buf.resize(ref.tensor->size() * sizeof(float));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
            throw LengthError(path.string() + ": truncated tensor " + ref.name);
        }
        for (std::size_t i = 0; i < ref.tensor->size(); ++i) {
            (*ref.tensor)[i] = std::bit_cast<float>(get_u32(buf.data() + 4 * i));
        }
    }
    return ck;
}

}  // namespace eoe
