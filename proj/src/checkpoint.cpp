#include "hyperlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "hyperlab/errors.hpp"
#include "hyperlab/rng.hpp"

namespace hyperlab::ckpt {

namespace {

void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f32_le(std::string& out, float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32_le(const unsigned char* p) {
    uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<uint32_t>(p[i]) << (8 * i);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

}  // namespace

void save(const std::string& path, json extra, const std::vector<const ad::Param*>& tensors) {
    json entries = json::array();
    std::string blob;
    uint64_t offset = 0;
    for (const ad::Param* p : tensors) {
        json e;
        e["name"] = p->name;
        e["shape"] = {p->value.rows, p->value.cols};
        e["dtype"] = "f32";
        e["offset"] = offset;
        entries.push_back(e);
        for (double x : p->value.v) put_f32_le(blob, static_cast<float>(x));
        offset += 4 * p->value.size();
    }
    extra["format_version"] = 1;
    extra["tensors"] = entries;

    std::string manifest = extra.dump();
    std::string out;
    put_u64_le(out, manifest.size());
    out += manifest;
    out += blob;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to " + path);
}

Loaded load(const std::string& path) {
    std::string data = read_file(path);
    if (data.size() < 8) throw IoError("checkpoint truncated: " + path);
    const unsigned char* raw = reinterpret_cast<const unsigned char*>(data.data());
    uint64_t mlen = get_u64_le(raw);
    if (8 + mlen > data.size()) throw IoError("checkpoint manifest overruns file: " + path);

    Loaded out;
    out.manifest = json::parse(data.substr(8, mlen));
    const unsigned char* blob = raw + 8 + mlen;
    size_t blob_size = data.size() - 8 - mlen;

    for (const auto& e : out.manifest.at("tensors")) {
        std::string name = e.at("name");
        int rows = e.at("shape")[0];
        int cols = e.at("shape")[1];
        uint64_t off = e.at("offset");
        size_t n = static_cast<size_t>(rows) * static_cast<size_t>(cols);
        if (off + 4 * n > blob_size) throw IoError("tensor " + name + " overruns blob in " + path);
        ad::Mat m(rows, cols);
        for (size_t i = 0; i < n; ++i) m.v[i] = static_cast<double>(get_f32_le(blob + off + 4 * i));
        out.tensors.emplace_back(std::move(name), std::move(m));
    }
    return out;
}

const ad::Mat& Loaded::tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw ConfigError("checkpoint has no tensor " + name);
}

json read_manifest(const std::string& path) {
    std::string data = read_file(path);
    if (data.size() < 8) throw IoError("checkpoint truncated: " + path);
    uint64_t mlen = get_u64_le(reinterpret_cast<const unsigned char*>(data.data()));
    if (8 + mlen > data.size()) throw IoError("checkpoint manifest overruns file: " + path);
    return json::parse(data.substr(8, mlen));
}

void load_into(const Loaded& src, ad::ParamStore& dst) {
    for (const auto& [name, m] : src.tensors) {
        ad::Param& p = dst.at(name);
        if (p.value.rows != m.rows || p.value.cols != m.cols)
            throw ConfigError("tensor shape mismatch for " + name);
        p.value = m;
    }
}

std::string file_hash_hex(const std::string& path) {
    std::string data = read_file(path);
    return hex64(fnv1a64(data.data(), data.size()));
}

std::string required_parent_stage(const std::string& stage) {
    if (stage == "target" || stage == "teacher") return "";
    if (stage == "draft") return "target";
    if (stage == "cfg") return "teacher";
    if (stage == "tscd") return "cfg";
    if (stage == "dmdo") return "tscd";
    if (stage == "adp") return "dmdo";
    if (stage == "refl") return "adp";
    throw ConfigError("unknown stage tag: " + stage);
}

std::string check_parent(const std::string& stage, const std::string& parent_path) {
    std::string want = required_parent_stage(stage);
    json parent = read_manifest(parent_path);
    std::string got = parent.value("stage", "<none>");
    if (got != want)
        throw LineageError("stage '" + stage + "' requires a '" + want + "' parent, got '" + got +
                           "' from " + parent_path);
    return file_hash_hex(parent_path);
}

}  // namespace hyperlab::ckpt
