// SPDX-License-Identifier: Apache-2.0
//
// JSON form of TrainConfig. Every key has a default (the toy configuration);
// unknown keys are rejected. Mechanism entries must spell out their fields.
//
//   {
//     "layers": 3, "heads": 4, "model_dim": 32, "head_dim": 8,
//     "mechanisms": [{"type": "softmax", "count": 4},
//                    {"type": "window", "left": 4, "right": 4},
//                    {"type": "favor", "features": 64, "seed": 7}],
//     "diversity_kind": null | "Y" | "A" | "Q" | "K" | "V",
//     "lambda": 0.0, "scale_mode": "paper" | "standard",
//     "steps": 3000, "batch_size": 16, "learning_rate": 0.05, "seed": 1,
//     "log_every": 100,
//     "task": {"seq_len": 24, "vocab": 16, "offsets": [-3, 2],
//              "num_train": 2048, "num_eval": 128}
//   }

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "headdiv/training.hpp"

namespace headdiv {

using json = nlohmann::json;

/// Configuration problem; key() names the offending entry.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error("config key '" + key + "': " + what), key_(std::move(key)) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

struct ConfigKeyDoc {
    const char* key;
    const char* default_value;
    const char* meaning;
};

inline const std::vector<ConfigKeyDoc>& config_key_docs() {
    static const std::vector<ConfigKeyDoc> docs = {
        {"layers", "3", "attention layers P"},
        {"heads", "4", "heads per layer N"},
        {"model_dim", "32", "model dimension D"},
        {"head_dim", "8", "per-head dimension H"},
        {"mechanisms", "[] (all full-context softmax)",
         "per-head list of {type: softmax|window|favor, left, right, features, seed, count}"},
        {"diversity_kind", "null", "trained diversity kind: Y, A, Q, K or V"},
        {"lambda", "0", "diversity loss weight (must be 0 without a kind)"},
        {"scale_mode", "\"paper\"", "logit scale: paper = 1/H, standard = 1/sqrt(H)"},
        {"steps", "3000", "SGD steps"},
        {"batch_size", "16", "sequences per step"},
        {"learning_rate", "0.05", "SGD learning rate"},
        {"seed", "1", "master seed (data, init, batches)"},
        {"log_every", "100", "metric logging interval in steps"},
        {"task.seq_len", "24", "sequence length T"},
        {"task.vocab", "16", "vocabulary size"},
        {"task.offsets", "[-3, 2]", "label[t] = token[t + offsets[t mod len]]"},
        {"task.num_train", "2048", "training sequences"},
        {"task.num_eval", "128", "held-out sequences"},
    };
    return docs;
}

inline std::string config_help() {
    std::string s = "Config keys (JSON):\n";
    for (const auto& d : config_key_docs()) {
        char line[256];
        std::snprintf(line, sizeof line, "  %-16s default %-30s %s\n", d.key, d.default_value, d.meaning);
        s += line;
    }
    return s;
}

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& prefix) {
    for (const auto& [k, v] : obj.items())
        if (!allowed.count(k)) throw ConfigError(prefix + k, "unknown key");
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& prefix) {
    auto it = obj.find(key);
    if (it == obj.end()) return fallback;
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(prefix + key, e.what());
    }
}

template <typename T>
T require(const json& obj, const char* key, const std::string& prefix) {
    auto it = obj.find(key);
    if (it == obj.end()) throw ConfigError(prefix + key, "missing (no default)");
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(prefix + key, e.what());
    }
}

inline std::size_t get_count(const json& obj, const char* key, std::size_t fallback, const std::string& prefix) {
    auto it = obj.find(key);
    if (it == obj.end()) return fallback;
    if (!it->is_number_integer() || (!it->is_number_unsigned() && it->get<long long>() < 0))
        throw ConfigError(prefix + key, "expected a non-negative integer");
    return it->get<std::size_t>();
}

inline std::size_t require_count(const json& obj, const char* key, const std::string& prefix) {
    if (!obj.contains(key)) throw ConfigError(prefix + key, "missing (no default)");
    return get_count(obj, key, 0, prefix);
}

inline std::vector<HeadMechanism> parse_mechanisms(const json& arr) {
    if (!arr.is_array()) throw ConfigError("mechanisms", "expected an array");
    std::vector<HeadMechanism> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const json& e = arr[i];
        const std::string prefix = "mechanisms[" + std::to_string(i) + "].";
        if (!e.is_object()) throw ConfigError(prefix.substr(0, prefix.size() - 1), "expected an object");
        const auto type = require<std::string>(e, "type", prefix);
        const std::size_t count = get_count(e, "count", 1, prefix);
        if (count < 1) throw ConfigError(prefix + "count", "must be >= 1");
        if (type == "softmax") {
            reject_unknown(e, {"type", "count"}, prefix);
            for (std::size_t c = 0; c < count; ++c) out.emplace_back(SoftmaxFull{});
        } else if (type == "window") {
            reject_unknown(e, {"type", "count", "left", "right"}, prefix);
            const auto left = require_count(e, "left", prefix);
            const auto right = require_count(e, "right", prefix);
            for (std::size_t c = 0; c < count; ++c) out.emplace_back(SoftmaxWindow{left, right});
        } else if (type == "favor") {
            reject_unknown(e, {"type", "count", "features", "seed"}, prefix);
            const auto features = require_count(e, "features", prefix);
            if (features < 1) throw ConfigError(prefix + "features", "must be >= 1");
            const std::uint64_t seed = require_count(e, "seed", prefix);
            // repeated entries get consecutive seeds so their projections differ
            for (std::size_t c = 0; c < count; ++c) out.emplace_back(Favor{features, seed + c});
        } else {
            throw ConfigError(prefix + "type", "expected softmax, window or favor, got '" + type + "'");
        }
    }
    return out;
}

inline json mechanism_to_json(const HeadMechanism& m) {
    if (std::holds_alternative<SoftmaxFull>(m)) return {{"type", "softmax"}};
    if (const auto* w = std::get_if<SoftmaxWindow>(&m)) return {{"type", "window"}, {"left", w->left}, {"right", w->right}};
    const auto& f = std::get<Favor>(m);
    return {{"type", "favor"}, {"features", f.num_features}, {"seed", f.feature_seed}};
}

}  // namespace detail

inline TrainConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
    detail::reject_unknown(j,
                           {"layers", "heads", "model_dim", "head_dim", "mechanisms", "diversity_kind", "lambda",
                            "scale_mode", "steps", "batch_size", "learning_rate", "seed", "log_every", "task"},
                           "");
    TrainConfig c;
    c.layers = detail::get_count(j, "layers", c.layers, "");
    c.heads = detail::get_count(j, "heads", c.heads, "");
    c.model_dim = detail::get_count(j, "model_dim", c.model_dim, "");
    c.head_dim = detail::get_count(j, "head_dim", c.head_dim, "");
    if (auto it = j.find("mechanisms"); it != j.end()) c.mechanisms = detail::parse_mechanisms(*it);
    if (auto it = j.find("diversity_kind"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw ConfigError("diversity_kind", "expected a string or null");
        auto k = parse_kind(it->get<std::string>());
        if (!k) throw ConfigError("diversity_kind", "unknown kind '" + it->get<std::string>() + "'");
        c.diversity_kind = k;
    }
    c.lambda = detail::get_or<double>(j, "lambda", c.lambda, "");
    {
        const auto mode = detail::get_or<std::string>(j, "scale_mode", "paper", "");
        if (mode == "paper") c.scale_mode = ScaleMode::paper;
        else if (mode == "standard") c.scale_mode = ScaleMode::standard;
        else throw ConfigError("scale_mode", "expected paper or standard, got '" + mode + "'");
    }
    c.steps = detail::get_count(j, "steps", c.steps, "");
    c.batch_size = detail::get_count(j, "batch_size", c.batch_size, "");
    c.learning_rate = detail::get_or<double>(j, "learning_rate", c.learning_rate, "");
    c.seed = detail::get_count(j, "seed", c.seed, "");
    c.log_every = detail::get_count(j, "log_every", c.log_every, "");
    if (auto it = j.find("task"); it != j.end()) {
        const json& t = *it;
        if (!t.is_object()) throw ConfigError("task", "expected an object");
        detail::reject_unknown(t, {"seq_len", "vocab", "offsets", "num_train", "num_eval"}, "task.");
        c.task.seq_len = detail::get_count(t, "seq_len", c.task.seq_len, "task.");
        c.task.vocab = detail::get_count(t, "vocab", c.task.vocab, "task.");
        c.task.offsets = detail::get_or<std::vector<int>>(t, "offsets", c.task.offsets, "task.");
        c.task.num_train = detail::get_count(t, "num_train", c.task.num_train, "task.");
        c.task.num_eval = detail::get_count(t, "num_eval", c.task.num_eval, "task.");
    }

    auto check = [](bool ok, const char* key, const char* what) {
        if (!ok) throw ConfigError(key, what);
    };
    check(c.heads >= 1, "heads", "must be >= 1");
    check(c.model_dim >= 1, "model_dim", "must be >= 1");
    check(c.head_dim >= 1, "head_dim", "must be >= 1");
    check(c.mechanisms.empty() || c.mechanisms.size() == c.heads, "mechanisms",
          "must list exactly one entry per head");
    check(c.lambda >= 0.0, "lambda", "must be >= 0");
    check(c.diversity_kind.has_value() || c.lambda == 0.0, "lambda", "must be 0 when diversity_kind is null");
    check(c.steps >= 1, "steps", "must be >= 1");
    check(c.batch_size >= 1, "batch_size", "must be >= 1");
    check(c.learning_rate >= 0.0, "learning_rate", "must be >= 0");
    check(c.log_every >= 1, "log_every", "must be >= 1");
    check(c.task.seq_len >= 1, "task.seq_len", "must be >= 1");
    check(c.task.vocab >= 2, "task.vocab", "must be >= 2");
    check(!c.task.offsets.empty(), "task.offsets", "must not be empty");
    for (int o : c.task.offsets)
        check(static_cast<std::size_t>(std::abs(o)) < c.task.seq_len, "task.offsets", "every |offset| must be < seq_len");
    check(c.task.num_train >= 1, "task.num_train", "must be >= 1");
    check(c.task.num_eval >= 1, "task.num_eval", "must be >= 1");
    return c;
}

inline json config_to_json(const TrainConfig& c) {
    json mech = json::array();
    for (const auto& m : c.mechanisms) mech.push_back(detail::mechanism_to_json(m));
    return {
        {"layers", c.layers},
        {"heads", c.heads},
        {"model_dim", c.model_dim},
        {"head_dim", c.head_dim},
        {"mechanisms", mech},
        {"diversity_kind", c.diversity_kind ? json(symbol(*c.diversity_kind)) : json(nullptr)},
        {"lambda", c.lambda},
        {"scale_mode", to_string(c.scale_mode)},
        {"steps", c.steps},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"seed", c.seed},
        {"log_every", c.log_every},
        {"task",
         {{"seq_len", c.task.seq_len},
          {"vocab", c.task.vocab},
          {"offsets", c.task.offsets},
          {"num_train", c.task.num_train},
          {"num_eval", c.task.num_eval}}},
    };
}

inline bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return config_to_json(a) == config_to_json(b);
}

inline TrainConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// 64-bit FNV-1a of the canonical JSON, as 16 hex digits.
inline std::string config_hash(const TrainConfig& c) {
    const std::string canon = config_to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canon) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace headdiv
