#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "param_walk.hpp"
#include "rf/model.hpp"

// Checkpoint container layout:
//   bytes 0..3   magic "RFTC"
//   bytes 4..7   u32 format version (little-endian), currently 1
//   bytes 8..11  u32 header length in bytes
//   header       JSON: {"config": {...}, "tensors": [{name, shape, dtype,
//                offset, nbytes}, ...]} with offsets relative to the start of
//                the data section (which begins right after the header)
//   data         raw little-endian row-major blobs, dtype f64 or f32
//
// This code assumes a little-endian host (checked at save/load).

namespace rf {

namespace {

constexpr char kMagic[4] = {'R', 'F', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;

bool host_is_little_endian() {
    const std::uint32_t x = 1;
    return *reinterpret_cast<const unsigned char*>(&x) == 1;
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
            {"d_mlp", c.d_mlp},       {"vocab", c.vocab},     {"n_ctx", c.n_ctx},
            {"ln_eps", c.ln_eps},     {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.n_ctx = j.at("n_ctx").get<int>();
    c.ln_eps = j.at("ln_eps").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

} // namespace

void save_checkpoint(const std::string& path, const Parameters& p, const std::string& dtype) {
    if (!host_is_little_endian()) throw io_error("checkpoint IO requires a little-endian host");
    if (dtype != "f64" && dtype != "f32") throw io_error("unsupported checkpoint dtype " + dtype);
    const std::size_t elem = dtype == "f64" ? 8 : 4;

    nlohmann::ordered_json header;
    header["config"] = config_to_json(p.cfg);
    header["tensors"] = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for_each_tensor(p, [&](const std::string& name, const Tensor& t) {
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["dtype"] = dtype;
        e["offset"] = offset;
        e["nbytes"] = t.numel() * elem;
        header["tensors"].push_back(e);
        offset += t.numel() * elem;
    });
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 4);
    const std::uint32_t ver = kVersion;
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&ver), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hs.data(), hs.size());
    for_each_tensor(p, [&](const std::string&, const Tensor& t) {
        if (dtype == "f64") {
            f.write(reinterpret_cast<const char*>(t.ptr()), t.numel() * 8);
        } else {
            std::vector<float> buf(t.numel());
            for (std::size_t i = 0; i < t.numel(); ++i) buf[i] = static_cast<float>(t.data[i]);
            f.write(reinterpret_cast<const char*>(buf.data()), buf.size() * 4);
        }
    });
    if (!f) throw io_error("short write while saving checkpoint: " + path);
}

Parameters load_checkpoint(const std::string& path) {
    if (!host_is_little_endian()) throw io_error("checkpoint IO requires a little-endian host");
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("checkpoint file not found: " + path);

    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) {
        throw io_error("bad checkpoint magic in " + path);
    }
    std::uint32_t ver = 0, hlen = 0;
    f.read(reinterpret_cast<char*>(&ver), 4);
    f.read(reinterpret_cast<char*>(&hlen), 4);
    if (!f) throw io_error("truncated checkpoint header in " + path);
    if (ver != kVersion) {
        throw io_error("unsupported checkpoint version " + std::to_string(ver) + " in " + path);
    }
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw io_error("truncated checkpoint header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Parameters p;
    std::map<std::string, nlohmann::json> manifest;
    try {
        p = alloc_params(config_from_json(header.at("config")));
        for (const auto& e : header.at("tensors")) {
            manifest[e.at("name").get<std::string>()] = e;
        }
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("checkpoint manifest malformed: ") + e.what());
    }

    const std::size_t data_start = 12 + static_cast<std::size_t>(hlen);
    std::string first_error;
    for_each_tensor(p, [&](const std::string& name, Tensor& t) {
        if (!first_error.empty()) return;
        auto it = manifest.find(name);
        if (it == manifest.end()) {
            first_error = "checkpoint manifest missing tensor " + name;
            return;
        }
        const auto& e = it->second;
        const auto shape = e.at("shape").get<std::vector<std::size_t>>();
        if (shape != t.shape) {
            first_error = "checkpoint manifest inconsistent: tensor " + name +
                          " shape does not match config";
            return;
        }
        const std::string dtype = e.at("dtype").get<std::string>();
        const std::size_t elem = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
        if (elem == 0) {
            first_error = "checkpoint manifest inconsistent: tensor " + name +
                          " has unsupported dtype " + dtype;
            return;
        }
        const std::size_t nbytes = e.at("nbytes").get<std::size_t>();
        if (nbytes != t.numel() * elem) {
            first_error = "checkpoint manifest inconsistent: tensor " + name +
                          " nbytes does not match shape";
            return;
        }
        f.seekg(data_start + e.at("offset").get<std::size_t>());
        if (dtype == "f64") {
            f.read(reinterpret_cast<char*>(t.ptr()), nbytes);
        } else {
            std::vector<float> buf(t.numel());
            f.read(reinterpret_cast<char*>(buf.data()), nbytes);
            for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = buf[i];
        }
        if (!f) first_error = "checkpoint blob truncated: tensor " + name + " unreadable";
    });
    if (!first_error.empty()) throw io_error(first_error);
    return p;
}

} // namespace rf
