#include "dps/checkpoint_io.hpp"

#include "dps/error.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dps {

using nlohmann::json;

namespace {

void put_u32(std::string & out, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
}

uint32_t get_u32(const std::string & in, size_t pos) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    }
    return v;
}

uint32_t to_le(uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
}

json config_to_json(const ModelConfig & c) {
    return json{{"num_layers", c.num_layers}, {"num_heads", c.num_heads},   {"d_model", c.d_model},
                {"d_head", c.d_head},         {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
                {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

ModelConfig config_from_json(const json & j) {
    ModelConfig c;
    c.num_layers  = j.at("num_layers").get<uint32_t>();
    c.num_heads   = j.at("num_heads").get<uint32_t>();
    c.d_model     = j.at("d_model").get<uint32_t>();
    c.d_head      = j.at("d_head").get<uint32_t>();
    c.d_ff        = j.at("d_ff").get<uint32_t>();
    c.vocab_size  = j.at("vocab_size").get<uint32_t>();
    c.max_seq_len = j.at("max_seq_len").get<uint32_t>();
    c.seed        = j.at("seed").get<uint64_t>();
    return c;
}

} // namespace

std::string serialize_checkpoint(const ModelCheckpoint & checkpoint) {
    json header;
    header["config"] = config_to_json(checkpoint.config());
    json tensors     = json::array();
    for (const TensorSpec & s : checkpoint.manifest()) {
        tensors.push_back(json{{"name", s.name}, {"shape", s.shape}});
    }
    header["tensors"]    = std::move(tensors);
    header["user_vocab"] = checkpoint.user_vocab();
    const std::string header_text = header.dump();

    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    put_u32(out, kCheckpointFormatVersion);
    put_u32(out, static_cast<uint32_t>(header_text.size()));
    out += header_text;

    const auto params = checkpoint.params();
    const size_t base = out.size();
    out.resize(base + params.size() * 4);
    for (size_t i = 0; i < params.size(); ++i) {
        const uint32_t bits = to_le(std::bit_cast<uint32_t>(params[i]));
        std::memcpy(out.data() + base + i * 4, &bits, 4);
    }
    return out;
}

ModelCheckpoint deserialize_checkpoint(const std::string & bytes) {
    if (bytes.size() < 12) {
        fail(ErrorKind::truncated, "checkpoint: file shorter than the fixed preamble");
    }
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        fail(ErrorKind::magic, "checkpoint: bad magic bytes (expected \"DPSM\")");
    }
    const uint32_t version = get_u32(bytes, 4);
    if (version != kCheckpointFormatVersion) {
        fail(ErrorKind::version, "checkpoint: unsupported format version " + std::to_string(version));
    }
    const uint32_t header_len = get_u32(bytes, 8);
    if (bytes.size() < 12 + size_t{header_len}) {
        fail(ErrorKind::truncated, "checkpoint: header truncated");
    }

    json header;
    try {
        header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, std::string("checkpoint: header is not valid JSON: ") + e.what());
    }

    ModelConfig              config;
    std::vector<std::string> user_vocab;
    json                     tensors;
    try {
        config     = config_from_json(header.at("config"));
        user_vocab = header.value("user_vocab", std::vector<std::string>{});
        tensors    = header.at("tensors");
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, std::string("checkpoint: malformed header: ") + e.what());
    }
    config.validate();

    ModelCheckpoint ckpt(config, std::move(user_vocab));
    const auto &    expected = ckpt.manifest();
    if (!tensors.is_array() || tensors.size() != expected.size()) {
        fail(ErrorKind::shape, "checkpoint: header lists " + std::to_string(tensors.size()) + " tensors, config implies " +
                                   std::to_string(expected.size()));
    }
    for (size_t i = 0; i < expected.size(); ++i) {
        std::string         name;
        std::vector<size_t> shape;
        try {
            name  = tensors[i].at("name").get<std::string>();
            shape = tensors[i].at("shape").get<std::vector<size_t>>();
        } catch (const json::exception & e) {
            fail(ErrorKind::schema, std::string("checkpoint: malformed tensor entry: ") + e.what());
        }
        if (name != expected[i].name) {
            fail(ErrorKind::shape, "checkpoint: tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                                       expected[i].name + "'");
        }
        if (shape != expected[i].shape) {
            fail(ErrorKind::shape, "checkpoint: tensor '" + name + "' shape disagrees with config");
        }
    }

    auto         params = ckpt.params();
    const size_t base   = 12 + size_t{header_len};
    const size_t need   = params.size() * 4;
    if (bytes.size() < base + need) {
        fail(ErrorKind::truncated, "checkpoint: tensor data truncated (" + std::to_string(bytes.size() - base) +
                                       " of " + std::to_string(need) + " bytes)");
    }
    if (bytes.size() > base + need) {
        fail(ErrorKind::shape, "checkpoint: trailing bytes after tensor data");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        uint32_t bits;
        std::memcpy(&bits, bytes.data() + base + i * 4, 4);
        params[i] = std::bit_cast<float>(to_le(bits));
    }
    return ckpt;
}

void save_checkpoint(const ModelCheckpoint & checkpoint, const std::filesystem::path & path) {
    const std::string bytes = serialize_checkpoint(checkpoint);
    std::ofstream     out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        fail(ErrorKind::io, "write to '" + path.string() + "' failed");
    }
}

ModelCheckpoint load_checkpoint(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open checkpoint '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str());
}

} // namespace dps
