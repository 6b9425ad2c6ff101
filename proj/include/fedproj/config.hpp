#pragma once

// JSON experiment configs. Unknown keys are rejected so that typos in a
// config or a --set override never pass silently.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedproj/error.hpp"
#include "fedproj/orchestrator.hpp"

namespace fedproj {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

namespace detail {

class JsonReader {
public:
    JsonReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(field(key) + " has the wrong type");
        }
    }

    JsonReader child(const char* key) {
        seen_.insert(key);
        static const Json empty = Json::object();
        return JsonReader(j_.contains(key) ? j_.at(key) : empty, field(key));
    }

    bool has(const char* key) const { return j_.contains(key); }

    void reject_unknown() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown config field " + field(k.c_str()));
        }
    }

    std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
    ExperimentConfig cfg;
    detail::JsonReader r(j, "");
    std::string method = to_string(cfg.method);
    r.get("method", method);
    if (auto m = parse_method(method)) {
        cfg.method = *m;
    } else {
        throw ConfigError("method must be one of fedavg, fedprox, feddf, fedproj (got '" + method + "')");
    }
    int schema = kSchemaVersion;
    r.get("schema", schema);
    if (schema != kSchemaVersion) throw ConfigError("unsupported config schema " + std::to_string(schema));
    r.get("rounds", cfg.rounds);
    r.get("n_clients", cfg.n_clients);
    r.get("sample_rate", cfg.sample_rate);
    r.get("seed", cfg.master_seed);
    r.get("eval_every", cfg.eval_every);
    r.get("workers", cfg.workers);

    {
        auto d = r.child("dataset");
        auto& ds = cfg.dataset;
        d.get("source", ds.source);
        d.get("csv_path", ds.csv_path);
        d.get("csv_header", ds.csv_header);
        d.get("pca", ds.pca);
        d.get("test_fraction", ds.test_fraction);
        d.get("public_fraction", ds.public_fraction);
        d.get("public_csv", ds.public_csv);
        d.get("memory_size", ds.memory_size);
        if (d.has("blobs")) {
            auto b = d.child("blobs");
            b.get("classes", ds.blob_classes);
            b.get("per_class", ds.blob_per_class);
            b.get("centers", ds.blob_centers);
            b.get("std", ds.blob_std);
            b.reject_unknown();
        } else {
            d.child("blobs");
        }
        d.reject_unknown();
    }
    {
        auto p = r.child("partition");
        p.get("kind", cfg.partition.kind);
        p.get("beta", cfg.partition.beta);
        p.get("dominant", cfg.partition.dominant);
        p.reject_unknown();
    }
    {
        auto m = r.child("model");
        std::vector<int> layers = cfg.shape.sizes();
        m.get("layers", layers);
        try {
            cfg.shape = MlpShape(layers);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("model.layers: ") + e.what());
        }
        m.reject_unknown();
    }
    {
        auto l = r.child("local");
        auto& lc = cfg.local;
        l.get("epochs", lc.epochs);
        l.get("batch_size", lc.batch_size);
        l.get("lr", lc.lr);
        l.get("momentum", lc.momentum);
        l.get("epsilon", lc.epsilon);
        l.get("projection_rate", lc.projection_rate);
        std::string derived_method;  // echoed by config_to_json, recomputed by resolve()
        l.get("method", derived_method);
        l.get("prox_mu", lc.prox_mu);
        l.get("memory_temperature", lc.memory_temperature);
        l.get("labeled_public_gradient", lc.labeled_public_gradient);
        l.reject_unknown();
    }
    {
        auto s = r.child("distill");
        auto& dc = cfg.distill;
        s.get("enabled", dc.enabled);
        s.get("epochs", dc.epochs);
        s.get("lr", dc.lr);
        s.get("temperature", dc.temperature);
        s.get("alpha", dc.alpha);
        s.get("batch_size", dc.batch_size);
        s.reject_unknown();
    }
    r.reject_unknown();
    return cfg;
}

inline Json config_to_json(const ExperimentConfig& cfg) {
    const auto& ds = cfg.dataset;
    Json blobs = {{"classes", ds.blob_classes},
                  {"per_class", ds.blob_per_class},
                  {"centers", ds.blob_centers},
                  {"std", ds.blob_std}};
    return Json{
        {"schema", kSchemaVersion},
        {"method", to_string(cfg.method)},
        {"rounds", cfg.rounds},
        {"n_clients", cfg.n_clients},
        {"sample_rate", cfg.sample_rate},
        {"seed", cfg.master_seed},
        {"eval_every", cfg.eval_every},
        {"workers", cfg.workers},
        {"dataset",
         {{"source", ds.source},
          {"csv_path", ds.csv_path},
          {"csv_header", ds.csv_header},
          {"pca", ds.pca},
          {"test_fraction", ds.test_fraction},
          {"public_fraction", ds.public_fraction},
          {"public_csv", ds.public_csv},
          {"memory_size", ds.memory_size},
          {"blobs", blobs}}},
        {"partition", {{"kind", cfg.partition.kind}, {"beta", cfg.partition.beta}, {"dominant", cfg.partition.dominant}}},
        {"model", {{"layers", cfg.shape.sizes()}}},
        {"local",
         {{"epochs", cfg.local.epochs},
          {"batch_size", cfg.local.batch_size},
          {"lr", cfg.local.lr},
          {"momentum", cfg.local.momentum},
          {"epsilon", cfg.local.epsilon},
          {"projection_rate", cfg.local.projection_rate},
          {"method", to_string(cfg.local.method)},
          {"prox_mu", cfg.local.prox_mu},
          {"memory_temperature", cfg.local.memory_temperature},
          {"labeled_public_gradient", cfg.local.labeled_public_gradient}}},
        {"distill",
         {{"enabled", cfg.distill.enabled},
          {"epochs", cfg.distill.epochs},
          {"lr", cfg.distill.lr},
          {"temperature", cfg.distill.temperature},
          {"alpha", cfg.distill.alpha},
          {"batch_size", cfg.distill.batch_size}}},
    };
}

/// Applies "dotted.key=value". The value is parsed as JSON when possible
/// (numbers, booleans, arrays) and taken as a string otherwise.
inline void apply_override(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    Json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object()) throw ConfigError("override '" + key + "' walks into a non-object");
        node = &(*node)[parts[i]];
        if (node->is_null()) *node = Json::object();
    }
    if (!node->is_object()) throw ConfigError("override '" + key + "' walks into a non-object");
    (*node)[parts.back()] = std::move(value);
}

/// Iris -> PCA 2-D -> 3 skewed clients -> [2, 16, 16, 3] MLP, SGD lr 1e-3
/// with momentum 0.9, 20 rounds of 5 local epochs.
inline ExperimentConfig pilot_config(const std::string& iris_csv) {
    ExperimentConfig cfg;
    cfg.method = Method::fedproj;
    cfg.rounds = 20;
    cfg.n_clients = 3;
    cfg.sample_rate = 1.0;
    cfg.dataset.source = "csv";
    cfg.dataset.csv_path = iris_csv;
    cfg.dataset.csv_header = true;
    cfg.dataset.pca = true;
    cfg.dataset.test_fraction = 0.2;
    cfg.dataset.public_fraction = 0.2;
    cfg.partition.kind = "pilot";
    cfg.shape = MlpShape{2, 16, 16, 3};
    cfg.local.epochs = 5;
    cfg.local.lr = 1e-3;
    cfg.local.momentum = 0.9;
    return cfg;
}

inline Json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    Json j = Json::parse(in, nullptr, false, true);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    return j;
}

/// Relative data paths in a config file resolve against the file's directory.
inline void resolve_paths(ExperimentConfig& cfg, const std::filesystem::path& base_dir) {
    const auto fix = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base_dir / p).lexically_normal().string();
    };
    fix(cfg.dataset.csv_path);
    fix(cfg.dataset.public_csv);
}

}  // namespace fedproj
