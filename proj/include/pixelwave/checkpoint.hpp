#pragma once

#include <fstream>
#include <map>
#include <set>

#include "pixelwave/optim.hpp"
#include "pixelwave/tape.hpp"

namespace pixelwave {

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
struct CheckpointSection {
    int64_t step = 0;
    std::vector<std::pair<std::string, Tensor<T>>> params, buffers, opt_m, opt_v, ema;
};

// Container holding one named section per network plus the serialized
// configuration and its digest. Loading verifies the digest.
template <typename T>
struct Checkpoint {
    std::string config_json;
    std::map<std::string, CheckpointSection<T>> sections;

    uint64_t digest() const { return fnv1a64(config_json); }

    // Capture the live state of a registry (+ optional optimizer / EMA).
    // Optimizer and EMA entries are filtered to this registry's
    // parameters, so a shared optimizer splits cleanly across sections.
    void capture(const std::string& name, const ParamRegistry<T>& reg, int64_t step,
                 const Optimizer<T>* opt = nullptr, const Sema<T>* sema = nullptr) {
        CheckpointSection<T> s;
        s.step = step;
        std::set<std::string> owned;
        for (auto& [pname, p] : reg.params) {
            s.params.emplace_back(pname, p->value);
            owned.insert(pname);
        }
        for (auto& [bname, b] : reg.buffers) s.buffers.emplace_back(bname, *b);
        if (opt) {
            for (auto& [k, v] : opt->m)
                if (owned.count(k)) s.opt_m.emplace_back(k, v);
            for (auto& [k, v] : opt->v)
                if (owned.count(k)) s.opt_v.emplace_back(k, v);
        }
        if (sema)
            for (auto& [k, v] : sema->shadow)
                if (owned.count(k)) s.ema.emplace_back(k, v);
        sections[name] = std::move(s);
    }

    // Push a stored section back into live objects. Shapes must match;
    // EMA shadows must mirror their parameters.
    int64_t restore(const std::string& name, ParamRegistry<T>& reg, Optimizer<T>* opt = nullptr,
                    Sema<T>* sema = nullptr) const {
        auto it = sections.find(name);
        if (it == sections.end()) throw state_error("checkpoint has no section '" + name + "'");
        const auto& s = it->second;
        for (auto& [pname, stored] : s.params) {
            auto p = reg.find(pname);
            if (!p) throw state_error("checkpoint parameter '" + pname + "' unknown to the model");
            if (!(p->value.shape == stored.shape))
                throw state_error("checkpoint parameter '" + pname + "' shape mismatch");
            p->value = stored;
        }
        std::map<std::string, Tensor<T>*> bufmap;
        for (auto& [bname, b] : reg.buffers) bufmap[bname] = b;
        for (auto& [bname, stored] : s.buffers) {
            auto bit = bufmap.find(bname);
            if (bit == bufmap.end()) throw state_error("checkpoint buffer '" + bname + "' unknown to the model");
            *bit->second = stored;
        }
        if (opt) {
            // merge: a shared optimizer restores several sections in turn
            for (auto& [k, v] : s.opt_m) opt->m[k] = v;
            for (auto& [k, v] : s.opt_v) opt->v[k] = v;
            opt->step_count = s.step;
        }
        if (sema) {
            for (auto& [k, v] : s.ema) {
                auto p = reg.find(k);
                if (p && !(p->value.shape == v.shape))
                    throw state_error("EMA shadow for '" + k + "' does not mirror the parameter shape");
                sema->shadow[k] = v;
            }
        }
        return s.step;
    }
};

namespace ckptdetail {

template <typename T>
void write_named_list(std::ostream& os, const std::vector<std::pair<std::string, Tensor<T>>>& list) {
    io::write_pod<uint32_t>(os, static_cast<uint32_t>(list.size()));
    for (auto& [name, t] : list) {
        io::write_string(os, name);
        save_tensor(os, t);
    }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> read_named_list(std::istream& is) {
    uint32_t n = io::read_pod<uint32_t>(is);
    std::vector<std::pair<std::string, Tensor<T>>> list;
    list.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = io::read_string(is);
        list.emplace_back(std::move(name), load_tensor<T>(is));
    }
    return list;
}

}  // namespace ckptdetail

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw state_error("cannot open for writing: " + path);
    io::write_magic(os, "DCKP");
    io::write_pod<uint32_t>(os, 1);
    io::write_pod<uint64_t>(os, ck.digest());
    io::write_string(os, ck.config_json);
    io::write_pod<uint32_t>(os, static_cast<uint32_t>(ck.sections.size()));
    for (auto& [name, s] : ck.sections) {
        io::write_string(os, name);
        io::write_pod<int64_t>(os, s.step);
        ckptdetail::write_named_list(os, s.params);
        ckptdetail::write_named_list(os, s.buffers);
        ckptdetail::write_named_list(os, s.opt_m);
        ckptdetail::write_named_list(os, s.opt_v);
        ckptdetail::write_named_list(os, s.ema);
    }
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path, const std::string& expected_config_json = "") {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw state_error("cannot open for reading: " + path);
    io::expect_magic(is, "DCKP", "checkpoint");
    uint32_t version = io::read_pod<uint32_t>(is);
    if (version != 1) throw state_error("unsupported checkpoint version");
    uint64_t digest = io::read_pod<uint64_t>(is);
    Checkpoint<T> ck;
    ck.config_json = io::read_string(is);
    if (fnv1a64(ck.config_json) != digest) throw state_error("checkpoint config digest mismatch (corrupt file)");
    if (!expected_config_json.empty() && fnv1a64(expected_config_json) != digest)
        throw state_error("checkpoint was produced under a different configuration");
    uint32_t nsec = io::read_pod<uint32_t>(is);
    for (uint32_t i = 0; i < nsec; ++i) {
        std::string name = io::read_string(is);
        CheckpointSection<T> s;
        s.step = io::read_pod<int64_t>(is);
        s.params = ckptdetail::read_named_list<T>(is);
        s.buffers = ckptdetail::read_named_list<T>(is);
        s.opt_m = ckptdetail::read_named_list<T>(is);
        s.opt_v = ckptdetail::read_named_list<T>(is);
        s.ema = ckptdetail::read_named_list<T>(is);
        ck.sections[name] = std::move(s);
    }
    return ck;
}

}  // namespace pixelwave
