#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "cdmamba/errors.hpp"
#include "cdmamba/network.hpp"
#include "cdmamba/tensor.hpp"

// Binary tensor container, named weight store, line config parser, image
// writer, and the epoch log format. All binary payloads are little-endian.
//
// Tensor container layout:
//   magic "CDMT" | u32 version | u32 dtype (0 double, 1 single) |
//   u32 rank | u64 extents[rank] | payload
// Weight store layout:
//   magic "CDMW" | u32 version | u32 count | count * (u32 len | name | tensor)

namespace cdmamba {

inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw IoError("write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n)) throw IoError("unexpected end of stream");
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    read_bytes(is, b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 8);
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    read_bytes(is, b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

template <typename S>
constexpr std::uint32_t dtype_code() {
    return sizeof(S) == 8 ? 0u : 1u;
}

}  // namespace detail

template <typename S>
void write_tensor(std::ostream& os, const TensorT<S>& t) {
    detail::write_bytes(os, "CDMT", 4);
    detail::write_u32(os, kContainerVersion);
    detail::write_u32(os, detail::dtype_code<S>());
    detail::write_u32(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t i = 0; i < t.ndim(); ++i) detail::write_u64(os, t.extent(i));
    if (detail::dtype_code<S>() == 0) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits;
            double v = static_cast<double>(t[i]);
            std::memcpy(&bits, &v, 8);
            detail::write_u64(os, bits);
        }
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint32_t bits;
            float v = static_cast<float>(t[i]);
            std::memcpy(&bits, &v, 4);
            detail::write_u32(os, bits);
        }
    }
}

// reads either stored precision and converts to S
template <typename S>
TensorT<S> read_tensor(std::istream& is) {
    char magic[4];
    detail::read_bytes(is, magic, 4);
    if (std::memcmp(magic, "CDMT", 4) != 0) throw IoError("not a tensor container");
    std::uint32_t version = detail::read_u32(is);
    if (version != kContainerVersion) throw IoError("unsupported container version");
    std::uint32_t dtype = detail::read_u32(is);
    if (dtype > 1) throw IoError("unknown dtype code");
    std::uint32_t rank = detail::read_u32(is);
    if (rank == 0 || rank > 8) throw IoError("bad tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_u64(is);
    TensorT<S> t(shape);
    if (dtype == 0) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits = detail::read_u64(is);
            double v;
            std::memcpy(&v, &bits, 8);
            t[i] = static_cast<S>(v);
        }
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint32_t bits = detail::read_u32(is);
            float v;
            std::memcpy(&v, &bits, 4);
            t[i] = static_cast<S>(v);
        }
    }
    return t;
}

template <typename S>
void save_tensor(const std::string& path, const TensorT<S>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_tensor(os, t);
}

template <typename S>
TensorT<S> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tensor<S>(is);
}

// ---------------------------------------------------------------- weight store

template <typename S>
void write_params(std::ostream& os, const ParamStoreT<S>& ps) {
    detail::write_bytes(os, "CDMW", 4);
    detail::write_u32(os, kContainerVersion);
    detail::write_u32(os, static_cast<std::uint32_t>(ps.count()));
    for (std::size_t i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.name(i);
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        detail::write_bytes(os, name.data(), name.size());
        write_tensor(os, ps.tensor(i));
    }
}

template <typename S>
ParamStoreT<S> read_params(std::istream& is) {
    char magic[4];
    detail::read_bytes(is, magic, 4);
    if (std::memcmp(magic, "CDMW", 4) != 0) throw IoError("not a weight store");
    if (detail::read_u32(is) != kContainerVersion) throw IoError("unsupported store version");
    std::uint32_t count = detail::read_u32(is);
    ParamStoreT<S> ps;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = detail::read_u32(is);
        if (len == 0 || len > 4096) throw IoError("bad name length");
        std::string name(len, '\0');
        detail::read_bytes(is, name.data(), len);
        ps.add(name, read_tensor<S>(is));
    }
    return ps;
}

template <typename S>
void save_params(const std::string& path, const ParamStoreT<S>& ps) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_params(os, ps);
}

template <typename S>
ParamStoreT<S> load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_params<S>(is);
}

// names and shapes must line up exactly with the config's enumeration
template <typename S>
void validate_params(const ParamStoreT<S>& ps, const NetworkConfig& cfg) {
    std::vector<ParamSpec> specs = enumerate_params(cfg);
    if (ps.count() != specs.size()) throw IoError("weight store: parameter count mismatch");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (!ps.has(specs[i].name)) throw IoError("weight store: missing " + specs[i].name);
        if (ps.at(specs[i].name).shape() != specs[i].shape)
            throw IoError("weight store: shape mismatch for " + specs[i].name);
    }
}

// ----------------------------------------------------------------- model box

// weights plus the architecture they belong to, so inference needs only the
// file itself
template <typename S>
void save_model(const std::string& path, const ParamStoreT<S>& ps, const NetworkConfig& cfg) {
    validate_params(ps, cfg);
    ParamStoreT<S> box;
    for (std::size_t i = 0; i < ps.count(); ++i) box.add("param." + ps.name(i), ps.tensor(i));
    TensorT<S> widths({6});
    for (std::size_t i = 0; i < 6; ++i) widths[i] = static_cast<S>(cfg.stage_widths[i]);
    box.add("cfg.stage_widths", widths);
    box.add("cfg.in_bands", TensorT<S>::scalar(static_cast<S>(cfg.in_bands)));
    box.add("cfg.ssm_state_dim", TensorT<S>::scalar(static_cast<S>(cfg.ssm_state_dim)));
    box.add("cfg.groups", TensorT<S>::scalar(static_cast<S>(cfg.groups)));
    box.add("cfg.use_da_block", TensorT<S>::scalar(cfg.use_da_block ? S(1) : S(0)));
    box.add("cfg.use_cloud_smb", TensorT<S>::scalar(cfg.use_cloud_smb ? S(1) : S(0)));
    save_params(path, box);
}

template <typename S>
std::pair<ParamStoreT<S>, NetworkConfig> load_model(const std::string& path) {
    ParamStoreT<S> box = load_params<S>(path);
    NetworkConfig cfg;
    const TensorT<S>& widths = box.at("cfg.stage_widths");
    if (widths.size() != 6) throw IoError("model: malformed stage widths");
    for (std::size_t i = 0; i < 6; ++i) cfg.stage_widths[i] = static_cast<std::size_t>(widths[i]);
    cfg.in_bands = static_cast<std::size_t>(box.at("cfg.in_bands")[0]);
    cfg.ssm_state_dim = static_cast<std::size_t>(box.at("cfg.ssm_state_dim")[0]);
    cfg.groups = static_cast<std::size_t>(box.at("cfg.groups")[0]);
    cfg.use_da_block = box.at("cfg.use_da_block")[0] != S(0);
    cfg.use_cloud_smb = box.at("cfg.use_cloud_smb")[0] != S(0);
    validate_config(cfg);

    ParamStoreT<S> ps;
    for (const ParamSpec& spec : enumerate_params(cfg)) {
        if (!box.has("param." + spec.name)) throw IoError("model: missing param." + spec.name);
        TensorT<S> w = box.at("param." + spec.name);
        if (w.shape() != spec.shape) throw IoError("model: shape mismatch for " + spec.name);
        ps.add(spec.name, std::move(w));
    }
    return {std::move(ps), cfg};
}

// --------------------------------------------------------------- line config

// `key = value` pairs, '#' comments, blank lines ignored
class Config {
public:
    static Config parse(std::istream& is) {
        Config c;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            auto trim = [](std::string s) {
                std::size_t b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string();
                std::size_t e = s.find_last_not_of(" \t\r");
                return s.substr(b, e - b + 1);
            };
            std::string t = trim(line);
            if (t.empty()) continue;
            std::size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw IoError("config line " + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(t.substr(0, eq));
            std::string value = trim(t.substr(eq + 1));
            if (key.empty() || value.empty())
                throw IoError("config line " + std::to_string(lineno) + ": empty key or value");
            if (c.values_.count(key))
                throw IoError("config: duplicate key " + key);
            c.values_[key] = value;
        }
        return c;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config: " + path);
        return parse(is);
    }

    std::string get_string(const std::string& key, const std::string& fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw IoError("config: bad number for " + key);
            return v;
        } catch (const std::logic_error&) {
            throw IoError("config: bad number for " + key);
        }
    }

    std::size_t get_size(const std::string& key, std::size_t fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size() || v < 0) throw IoError("config: bad count for " + key);
            return static_cast<std::size_t>(v);
        } catch (const std::logic_error&) {
            throw IoError("config: bad count for " + key);
        }
    }

    bool get_bool(const std::string& key, bool fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw IoError("config: bad flag for " + key);
    }

    // every present key must have been requested by a getter
    void reject_unknown() const {
        for (const auto& [key, value] : values_)
            if (!consumed_.count(key)) throw IoError("config: unknown key " + key);
    }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

// ----------------------------------------------------------------- ppm output

// rgb [3,h,w] in [0,1], clamped, 8-bit binary ppm
inline void write_ppm(const std::string& path, const Tensor& rgb) {
    if (rgb.ndim() != 3 || rgb.extent(0) != 3) throw ShapeError("write_ppm: want [3,h,w]");
    std::size_t h = rgb.extent(1), w = rgb.extent(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(3 * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double v = rgb[c * h * w + y * w + x];
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                row[3 * x + c] = static_cast<unsigned char>(v * 255.0 + 0.5);
            }
        detail::write_bytes(os, row.data(), row.size());
    }
}

// ------------------------------------------------------------------ log lines

inline std::string format_epoch_line(std::size_t epoch, double lr, double loss, double miou,
                                     double f1, double acc) {
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "epoch=%zu lr=%.8g loss=%.8g val_miou=%.6f val_f1=%.6f val_acc=%.6f", epoch, lr,
                  loss, miou, f1, acc);
    return std::string(buf);
}

}  // namespace cdmamba
