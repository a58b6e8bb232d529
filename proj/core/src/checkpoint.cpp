#include "unips/checkpoint.hpp"

#include <cstdio>
#include <filesystem>

namespace unips {

namespace {

constexpr char kMagic[] = "UNIPSCKPT";
constexpr size_t kMagicLen = 9;
constexpr uint32_t kVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, size_t n, const std::string& path) {
    if (std::fwrite(p, 1, n, f) != n) throw IoError(cat("short write to ", path));
}

void write_u32(std::FILE* f, uint32_t v, const std::string& path) {
    write_bytes(f, &v, sizeof(v), path);
}

void read_bytes(std::FILE* f, void* p, size_t n, const std::string& path) {
    if (std::fread(p, 1, n, f) != n) {
        throw IoError(cat("checkpoint ", path, ": truncated or unreadable"));
    }
}

uint32_t read_u32(std::FILE* f, const std::string& path) {
    uint32_t v = 0;
    read_bytes(f, &v, sizeof(v), path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& meta_json) {
    const std::string tmp = path + ".tmp";
    {
        FilePtr f(std::fopen(tmp.c_str(), "wb"));
        if (!f) throw IoError(cat("cannot open ", tmp, " for writing"));
        write_bytes(f.get(), kMagic, kMagicLen, tmp);
        write_u32(f.get(), kVersion, tmp);
        write_u32(f.get(), static_cast<uint32_t>(meta_json.size()), tmp);
        write_bytes(f.get(), meta_json.data(), meta_json.size(), tmp);
        write_u32(f.get(), static_cast<uint32_t>(store.entries().size()), tmp);
        for (const auto& e : store.entries()) {
            write_u32(f.get(), static_cast<uint32_t>(e.name.size()), tmp);
            write_bytes(f.get(), e.name.data(), e.name.size(), tmp);
            write_u32(f.get(), static_cast<uint32_t>(e.tensor.rank()), tmp);
            for (int d : e.tensor.shape()) write_u32(f.get(), static_cast<uint32_t>(d), tmp);
            write_bytes(f.get(), e.tensor.ptr(),
                        sizeof(float) * static_cast<size_t>(e.tensor.numel()), tmp);
        }
        if (std::fflush(f.get()) != 0) throw IoError(cat("flush failed for ", tmp));
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError(cat("rename ", tmp, " -> ", path, ": ", ec.message()));
}

Checkpoint load_checkpoint(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError(cat("cannot open checkpoint ", path));
    char magic[kMagicLen];
    read_bytes(f.get(), magic, kMagicLen, path);
    if (std::string(magic, kMagicLen) != kMagic) {
        throw IoError(cat("checkpoint ", path, ": bad magic"));
    }
    const uint32_t version = read_u32(f.get(), path);
    if (version != kVersion) {
        throw IoError(cat("checkpoint ", path, ": unsupported version ", version));
    }
    Checkpoint ckpt;
    const uint32_t meta_len = read_u32(f.get(), path);
    ckpt.meta_json.resize(meta_len);
    if (meta_len) read_bytes(f.get(), ckpt.meta_json.data(), meta_len, path);
    const uint32_t count = read_u32(f.get(), path);
    ckpt.records.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        auto& rec = ckpt.records[i];
        const uint32_t name_len = read_u32(f.get(), path);
        rec.name.resize(name_len);
        read_bytes(f.get(), rec.name.data(), name_len, path);
        const uint32_t rank = read_u32(f.get(), path);
        rec.shape.resize(rank);
        int64_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            rec.shape[d] = static_cast<int>(read_u32(f.get(), path));
            numel *= rec.shape[d];
        }
        rec.values.resize(static_cast<size_t>(numel));
        read_bytes(f.get(), rec.values.data(), sizeof(float) * rec.values.size(), path);
    }
    return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, ParamStore& store) {
    if (ckpt.records.size() != store.entries().size()) {
        throw IoError(cat("checkpoint has ", ckpt.records.size(), " parameters, model expects ",
                          store.entries().size()));
    }
    for (const auto& rec : ckpt.records) {
        Tensor* t = store.find(rec.name);
        if (!t) throw IoError(cat("checkpoint parameter '", rec.name, "' not in model"));
        if (t->shape() != rec.shape) {
            throw IoError(cat("parameter '", rec.name, "': checkpoint shape ",
                              shape_str(rec.shape), " vs model ", shape_str(t->shape())));
        }
        t->data() = rec.values;
    }
}

}  // namespace unips
