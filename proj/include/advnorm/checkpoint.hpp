#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/mvol_io.hpp"

namespace advnorm {

template <typename T>
constexpr const char* scalar_dtype_name() {
    if constexpr (sizeof(T) == 4)
        return "float32";
    else
        return "float64";
}

/// Accumulates named tensors into one contiguous payload plus a JSON index,
/// for embedding in a container file.
template <typename T>
class TensorArchiveWriter {
public:
    void add(const std::string& name, const std::vector<int>& shape, const T* data,
             std::size_t count) {
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = shape;
        e["offset"] = payload_.size();
        e["count"] = count;
        entries_.push_back(std::move(e));
        const std::size_t old = payload_.size();
        payload_.resize(old + count * sizeof(T));
        std::memcpy(payload_.data() + old, data, count * sizeof(T));
    }

    void add(const std::string& name, const std::vector<int>& shape, const std::vector<T>& data) {
        add(name, shape, data.data(), data.size());
    }

    nlohmann::ordered_json index() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::array();
        for (const auto& e : entries_) j.push_back(e);
        return j;
    }

    const std::vector<std::uint8_t>& payload() const { return payload_; }

private:
    std::vector<nlohmann::ordered_json> entries_;
    std::vector<std::uint8_t> payload_;
};

/// Reads tensors back out of a container payload by name.
template <typename T>
class TensorArchiveReader {
public:
    TensorArchiveReader(const nlohmann::ordered_json& index, std::vector<char> payload)
        : payload_(std::move(payload)) {
        for (const auto& e : index) {
            Entry ent;
            ent.offset = e.at("offset").get<std::uint64_t>();
            ent.count = e.at("count").get<std::uint64_t>();
            if (ent.offset + ent.count * sizeof(T) > payload_.size())
                throw CorruptionError("tensor '" + e.at("name").get<std::string>() +
                                      "' extends past payload end");
            entries_[e.at("name").get<std::string>()] = ent;
        }
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    void read(const std::string& name, std::vector<T>& out) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw CorruptionError("checkpoint missing tensor '" + name + "'");
        if (out.size() != it->second.count)
            throw CorruptionError("tensor '" + name + "' has " + std::to_string(it->second.count) +
                                  " values, expected " + std::to_string(out.size()));
        std::memcpy(out.data(), payload_.data() + it->second.offset, out.size() * sizeof(T));
    }

    std::size_t size() const { return entries_.size(); }

private:
    struct Entry {
        std::uint64_t offset = 0, count = 0;
    };
    std::map<std::string, Entry> entries_;
    std::vector<char> payload_;
};

} // namespace advnorm
