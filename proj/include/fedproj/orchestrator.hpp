#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fedproj/client.hpp"
#include "fedproj/data.hpp"
#include "fedproj/error.hpp"
#include "fedproj/nn.hpp"
#include "fedproj/rng.hpp"
#include "fedproj/server.hpp"

namespace fedproj {

enum class Method { fedavg, fedprox, feddf, fedproj };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::fedavg: return "fedavg";
        case Method::fedprox: return "fedprox";
        case Method::feddf: return "feddf";
        case Method::fedproj: return "fedproj";
    }
    return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
    if (s == "fedavg") return Method::fedavg;
    if (s == "fedprox") return Method::fedprox;
    if (s == "feddf") return Method::feddf;
    if (s == "fedproj") return Method::fedproj;
    return std::nullopt;
}

struct DatasetSpec {
    std::string source = "csv";  // "csv" or "blobs"
    std::string csv_path;
    bool csv_header = true;
    int blob_classes = 3;
    int blob_per_class = 50;
    std::vector<std::vector<double>> blob_centers;
    double blob_std = 1.0;
    bool pca = true;
    double test_fraction = 0.2;
    double public_fraction = 0.2;  // of the rows left after the test split
    std::string public_csv;        // separate public set instead of a split
    int memory_size = 0;           // 0 = whole public set
};

struct PartitionSpec {
    std::string kind = "pilot";  // "pilot" or "dirichlet"
    double beta = 0.5;
    double dominant = 0.8;
};

struct ExperimentConfig {
    Method method = Method::fedproj;
    int rounds = 20;
    int n_clients = 3;
    double sample_rate = 1.0;
    std::uint64_t master_seed = 1;
    DatasetSpec dataset;
    PartitionSpec partition;
    MlpShape shape{2, 16, 16, 3};
    LocalConfig local;
    DistillConfig distill;
    int eval_every = 1;
    int workers = 1;
};

/// Applies the settings implied by the method name:
/// fedavg/fedprox run no distillation, feddf never projects and has no
/// weight divergence, fedproj projects and distills as configured.
inline ExperimentConfig resolve(ExperimentConfig cfg) {
    switch (cfg.method) {
        case Method::fedavg:
            cfg.local.method = LocalMethod::fedavg;
            cfg.distill.enabled = false;
            break;
        case Method::fedprox:
            cfg.local.method = LocalMethod::fedprox;
            cfg.distill.enabled = false;
            break;
        case Method::feddf:
            cfg.local.method = LocalMethod::fedavg;
            cfg.local.projection_rate = 0.0;
            cfg.distill.enabled = true;
            cfg.distill.alpha = 0.0;
            break;
        case Method::fedproj:
            cfg.local.method = LocalMethod::fedproj;
            break;
    }
    return cfg;
}

inline void validate(const ExperimentConfig& cfg) {
    if (cfg.rounds < 0) throw ConfigError("rounds must be >= 0");
    if (cfg.n_clients < 1) throw ConfigError("n_clients must be >= 1");
    if (!(cfg.sample_rate > 0.0 && cfg.sample_rate <= 1.0)) throw ConfigError("sample_rate must be in (0, 1]");
    if (cfg.eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (cfg.workers < 1) throw ConfigError("workers must be >= 1");
    const auto& ds = cfg.dataset;
    if (ds.source != "csv" && ds.source != "blobs") throw ConfigError("dataset.source must be 'csv' or 'blobs'");
    if (ds.source == "csv" && ds.csv_path.empty()) throw ConfigError("dataset.csv_path is required for csv source");
    if (!(ds.test_fraction > 0.0 && ds.test_fraction < 1.0)) throw ConfigError("dataset.test_fraction must be in (0, 1)");
    if (ds.public_csv.empty() && !(ds.public_fraction > 0.0 && ds.public_fraction < 1.0)) {
        throw ConfigError("dataset.public_fraction must be in (0, 1)");
    }
    if (ds.memory_size < 0) throw ConfigError("dataset.memory_size must be >= 0");
    if (cfg.partition.kind != "pilot" && cfg.partition.kind != "dirichlet") {
        throw ConfigError("partition.kind must be 'pilot' or 'dirichlet'");
    }
    if (cfg.partition.kind == "dirichlet" && !(cfg.partition.beta > 0.0)) throw ConfigError("partition.beta must be positive");
    cfg.local.validate();
    cfg.distill.validate();
}

/// Seed streams. Client randomness depends only on (master seed, round,
/// client id); server randomness only on (master seed, round).
struct Seeds {
    std::uint64_t master;
    std::uint64_t data() const { return SeedSeq(master).then("data").value(); }
    std::uint64_t init() const { return SeedSeq(master).then("init").value(); }
    std::uint64_t client(int round, int client_id) const {
        return SeedSeq(master).then(static_cast<std::uint64_t>(round)).then(static_cast<std::uint64_t>(client_id)).value();
    }
    std::uint64_t server(int round) const {
        return SeedSeq(master).then(static_cast<std::uint64_t>(round)).then("server").value();
    }
};

struct Bounds {
    double xmin = -1, xmax = 1, ymin = -1, ymax = 1;
};

/// Everything derived from the config before round 0.
struct Federation {
    Dataset full;  // after optional PCA
    Dataset train;
    Dataset test;
    Dataset pub;
    std::optional<PcaTransform> pca;
    ClientPartition partition;
    std::vector<Dataset> client_data;
    ParamVector initial_params;
    std::size_t memory_size = 0;
    Bounds bounds;
};

inline Dataset load_source(const DatasetSpec& spec, std::uint64_t seed) {
    if (spec.source == "blobs") {
        return make_blobs(spec.blob_classes, spec.blob_per_class, spec.blob_centers, spec.blob_std, seed);
    }
    return load_csv(spec.csv_path, CsvOptions{spec.csv_header});
}

inline Bounds data_bounds(const Dataset& d, double margin = 0.5) {
    Bounds b;
    if (d.dim() < 2) return b;
    b.xmin = d.features.col(0).minCoeff() - margin;
    b.xmax = d.features.col(0).maxCoeff() + margin;
    b.ymin = d.features.col(1).minCoeff() - margin;
    b.ymax = d.features.col(1).maxCoeff() + margin;
    return b;
}

inline ClientPartition make_partition(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed) {
    if (cfg.partition.kind == "dirichlet") {
        return dirichlet_partition(train, cfg.n_clients, cfg.partition.beta, seed);
    }
    return pilot_partition(train, cfg.n_clients, seed, cfg.partition.dominant);
}

inline Federation prepare(const ExperimentConfig& cfg) {
    validate(cfg);
    const Seeds seeds{cfg.master_seed};
    Federation fed;
    Dataset raw = load_source(cfg.dataset, SeedSeq(seeds.data()).then("source").value());
    if (cfg.dataset.pca) {
        auto [projected, transform] = pca_fit_transform(raw);
        fed.full = std::move(projected);
        fed.pca = std::move(transform);
    } else {
        fed.full = std::move(raw);
    }
    const auto test_split = stratified_split(fed.full, cfg.dataset.test_fraction, SeedSeq(seeds.data()).then("test").value());
    fed.test = fed.full.subset(test_split.taken);
    Dataset rest = fed.full.subset(test_split.kept);
    if (!cfg.dataset.public_csv.empty()) {
        Dataset pub = load_csv(cfg.dataset.public_csv, CsvOptions{cfg.dataset.csv_header});
        fed.pub = fed.pca ? fed.pca->apply(pub) : std::move(pub);
        fed.train = std::move(rest);
    } else {
        auto split = split_public(rest, cfg.dataset.public_fraction, SeedSeq(seeds.data()).then("public").value());
        fed.train = std::move(split.train);
        fed.pub = std::move(split.pub);
    }
    if (fed.full.dim() != cfg.shape.input_dim()) {
        throw ConfigError("shape input size " + std::to_string(cfg.shape.input_dim()) + " does not match data width " +
                          std::to_string(fed.full.dim()));
    }
    if (fed.full.class_count != cfg.shape.output_dim()) {
        throw ConfigError("shape output size " + std::to_string(cfg.shape.output_dim()) + " does not match class count " +
                          std::to_string(fed.full.class_count));
    }
    if (fed.pub.dim() != fed.full.dim()) throw ConfigError("public set width does not match the training data");
    fed.memory_size = cfg.dataset.memory_size == 0 ? fed.pub.size() : static_cast<std::size_t>(cfg.dataset.memory_size);
    if (fed.memory_size > fed.pub.size()) {
        throw ConfigError("dataset.memory_size " + std::to_string(fed.memory_size) + " exceeds public set size " +
                          std::to_string(fed.pub.size()));
    }
    fed.partition = make_partition(cfg, fed.train, SeedSeq(seeds.data()).then("partition").value());
    for (const auto& rows : fed.partition.assignments) {
        fed.client_data.push_back(fed.train.subset(rows));
    }
    fed.initial_params = flatten(mlp_init(cfg.shape, seeds.init()));
    fed.bounds = data_bounds(fed.full);
    return fed;
}

/// max(ceil(C * N), 1) distinct client ids, sorted.
inline std::vector<int> sample_clients(int n_clients, double sample_rate, int round, std::uint64_t master_seed) {
    if (n_clients < 1) throw ConfigError("n_clients must be >= 1");
    if (!(sample_rate > 0.0 && sample_rate <= 1.0)) throw ConfigError("sample_rate must be in (0, 1]");
    const auto want = static_cast<int>(std::ceil(sample_rate * n_clients - 1e-9));
    const int m = std::clamp(want, 1, n_clients);
    std::vector<int> ids(static_cast<std::size_t>(n_clients));
    std::iota(ids.begin(), ids.end(), 0);
    if (m < n_clients) {
        Rng rng = SeedSeq(master_seed).then("sample_clients").then(static_cast<std::uint64_t>(round)).engine();
        for (int i = 0; i < m; ++i) {
            const auto j = i + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(n_clients - i)));
            std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
        }
        ids.resize(static_cast<std::size_t>(m));
        std::sort(ids.begin(), ids.end());
    }
    return ids;
}

struct Evaluation {
    double accuracy = 0.0;
    double loss = 0.0;
};

/// Accuracy of argmax predictions (ties to the lowest class) and mean
/// cross-entropy.
inline Evaluation evaluate(const ParamVector& params, const MlpShape& shape, const Dataset& test) {
    if (test.size() == 0) throw DataError("evaluate: empty test set");
    const Mlp model = unflatten(shape, params);
    const auto pred = argmax_rows(forward(model, test.features));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == test.labels[i]) ++correct;
    }
    const double loss = ce_loss_grad(model, test.features, test.labels).loss;
    return {static_cast<double>(correct) / static_cast<double>(test.size()), loss};
}

struct GridPoint {
    double x = 0.0;
    double y = 0.0;
    int predicted = 0;
};

/// resolution x resolution lattice over the bounds, rows of constant y from
/// ymin upward, each row from xmin to xmax.
inline std::vector<GridPoint> export_boundary_grid(const ParamVector& params, const MlpShape& shape, const Bounds& b,
                                                   int resolution) {
    if (shape.input_dim() != 2) throw DimensionError("boundary grid needs a model with 2 inputs");
    if (resolution < 2) throw std::invalid_argument("boundary grid resolution must be >= 2");
    const auto r = static_cast<Eigen::Index>(resolution);
    Matrix pts(r * r, 2);
    for (Eigen::Index i = 0; i < r; ++i) {
        const double y = b.ymin + (b.ymax - b.ymin) * static_cast<double>(i) / static_cast<double>(r - 1);
        for (Eigen::Index j = 0; j < r; ++j) {
            pts(i * r + j, 0) = b.xmin + (b.xmax - b.xmin) * static_cast<double>(j) / static_cast<double>(r - 1);
            pts(i * r + j, 1) = y;
        }
    }
    const auto pred = argmax_rows(forward(unflatten(shape, params), pts));
    std::vector<GridPoint> grid(pred.size());
    for (std::size_t k = 0; k < pred.size(); ++k) {
        grid[k] = {pts(static_cast<Eigen::Index>(k), 0), pts(static_cast<Eigen::Index>(k), 1), pred[k]};
    }
    return grid;
}

struct RoundMetrics {
    int round = 0;  // 1-based count of completed rounds
    std::optional<double> accuracy;
    std::optional<double> loss;
    double local_loss = 0.0;  // mean final-epoch local loss over sampled clients
    std::optional<double> l_mem_pre;
    std::optional<double> l_mem_post;
    double proj_active_frac = 0.0;
    double seconds = 0.0;  // wall clock; excluded from reproducibility checks
    std::vector<int> clients;
};

struct RoundReport {
    const RoundMetrics& metrics;
    const ServerState& state;
    std::span<const int> clients;
    std::span<const ClientUpdate> updates;
};

using RoundObserver = std::function<void(const RoundReport&)>;

namespace detail {

// Runs fn(i) for i in [0, count) on up to `workers` threads. Exceptions are
// collected per index; the lowest index is rethrown after all work joins.
template <typename Fn>
void parallel_for(std::size_t count, int workers, Fn&& fn) {
    std::vector<std::exception_ptr> errors(count);
    const auto guarded = [&](std::size_t i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const auto threads = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(workers, 1)));
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) guarded(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < count; i = next++) guarded(i);
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

struct RoundResult {
    ServerState state;
    RoundMetrics metrics;
    std::vector<int> clients;
    std::vector<ClientUpdate> updates;
};

inline RoundResult run_round(const ServerState& state, const ExperimentConfig& cfg, const Federation& fed,
                             bool evaluate_now = true) {
    const auto t0 = std::chrono::steady_clock::now();
    const Seeds seeds{cfg.master_seed};
    const int t = state.round;
    RoundResult out;
    out.clients = sample_clients(cfg.n_clients, cfg.sample_rate, t, cfg.master_seed);
    out.updates.resize(out.clients.size());
    const MemoryBuffer* memory = state.memory ? &*state.memory : nullptr;

    detail::parallel_for(out.clients.size(), cfg.workers, [&](std::size_t i) {
        const int k = out.clients[i];
        try {
            out.updates[i] = local_update(state.global_params, cfg.shape, fed.client_data[static_cast<std::size_t>(k)],
                                          memory, cfg.local, seeds.client(t, k));
        } catch (const DivergenceError& e) {
            throw DivergenceError("round " + std::to_string(t + 1) + ", client " + std::to_string(k) + ": " + e.what());
        }
    });

    std::vector<WeightedParams> weighted;
    std::vector<Mlp> models;
    weighted.reserve(out.updates.size());
    for (const auto& u : out.updates) {
        weighted.push_back({u.params, u.sample_count});
        models.push_back(unflatten(cfg.shape, u.params));
    }
    const ParamVector averaged = fedavg_aggregate(weighted);

    ServerState next;
    next.round = t + 1;
    try {
        next.global_params = distill(averaged, cfg.shape, models, fed.pub, cfg.distill,
                                     SeedSeq(seeds.server(t)).then("distill").value());
    } catch (const DivergenceError& e) {
        throw DivergenceError("round " + std::to_string(t + 1) + ", server: " + e.what());
    }
    const auto mem_rows = sample_memory(fed.pub, fed.memory_size, SeedSeq(seeds.server(t)).then("memory").value());
    next.memory = refresh_memory(models, fed.pub, mem_rows);
    if (!next.global_params.allFinite() || !next.memory->ensemble_logits.allFinite()) {
        throw DivergenceError("round " + std::to_string(t + 1) + ", server: aggregated model became non-finite");
    }

    RoundMetrics& m = out.metrics;
    m.round = t + 1;
    m.clients = out.clients;
    std::vector<double> local_losses, pre, post;
    std::size_t steps = 0, active = 0;
    for (const auto& u : out.updates) {
        if (!u.epoch_losses.empty()) local_losses.push_back(u.epoch_losses.back());
        if (u.memory_loss_before) pre.push_back(*u.memory_loss_before);
        if (u.memory_loss_after) post.push_back(*u.memory_loss_after);
        steps += u.steps;
        active += u.active_steps;
    }
    m.local_loss = detail::mean_of(local_losses);
    if (!pre.empty()) m.l_mem_pre = detail::mean_of(pre);
    if (!post.empty()) m.l_mem_post = detail::mean_of(post);
    m.proj_active_frac = steps == 0 ? 0.0 : static_cast<double>(active) / static_cast<double>(steps);
    if (evaluate_now) {
        const auto ev = evaluate(next.global_params, cfg.shape, fed.test);
        m.accuracy = ev.accuracy;
        m.loss = ev.loss;
    }
    out.state = std::move(next);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

struct ExperimentResult {
    std::vector<RoundMetrics> metrics;
    ParamVector final_params;
};

inline ExperimentResult run_experiment(const ExperimentConfig& raw_cfg, const Federation& fed,
                                       const RoundObserver& observer = {}) {
    const ExperimentConfig cfg = resolve(raw_cfg);
    validate(cfg);
    ServerState state;
    state.global_params = fed.initial_params;
    ExperimentResult result;
    for (int t = 0; t < cfg.rounds; ++t) {
        const bool eval_now = (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds;
        auto r = run_round(state, cfg, fed, eval_now);
        state = std::move(r.state);
        result.metrics.push_back(r.metrics);
        if (observer) observer(RoundReport{result.metrics.back(), state, r.clients, r.updates});
    }
    result.final_params = state.global_params;
    return result;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RoundObserver& observer = {}) {
    const ExperimentConfig resolved = resolve(cfg);
    return run_experiment(resolved, prepare(resolved), observer);
}

}  // namespace fedproj
