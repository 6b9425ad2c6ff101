#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedproj/client.hpp"
#include "fedproj/data.hpp"
#include "fedproj/error.hpp"
#include "fedproj/nn.hpp"
#include "fedproj/rng.hpp"

namespace fedproj {

struct DistillConfig {
    bool enabled = true;
    int epochs = 1;
    double lr = 1e-3;
    double temperature = 3.0;
    double alpha = 0.0;  // weight-divergence coefficient
    int batch_size = 32;

    void validate() const {
        if (epochs < 0) throw ConfigError("distill.epochs must be >= 0");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("distill.lr must be positive");
        if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("distill.temperature must be positive");
        if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("distill.alpha must be >= 0");
        if (batch_size < 1) throw ConfigError("distill.batch_size must be >= 1");
    }
};

struct ServerState {
    ParamVector global_params;
    int round = 0;
    std::optional<MemoryBuffer> memory;
};

struct WeightedParams {
    ParamVector params;
    std::size_t sample_count = 0;
};

/// sum_k (n_k / sum_j n_j) theta_k, accumulated in list order.
inline ParamVector fedavg_aggregate(std::span<const WeightedParams> updates) {
    if (updates.empty()) throw std::invalid_argument("fedavg_aggregate: no updates");
    std::size_t total = 0;
    for (const auto& u : updates) {
        if (u.sample_count < 1) throw std::invalid_argument("fedavg_aggregate: sample_count must be >= 1");
        detail::require_dims(u.params.size() == updates.front().params.size(), "fedavg_aggregate: length mismatch");
        total += u.sample_count;
    }
    ParamVector out = ParamVector::Zero(updates.front().params.size());
    for (const auto& u : updates) {
        const double w = static_cast<double>(u.sample_count) / static_cast<double>(total);
        out += w * u.params;
    }
    return out;
}

/// Row-wise arithmetic mean of the models' logits.
inline Logits ensemble_logits(std::span<const Mlp> models, const Matrix& inputs) {
    if (models.empty()) throw std::invalid_argument("ensemble_logits: no models");
    Logits sum = forward(models.front(), inputs);
    for (std::size_t k = 1; k < models.size(); ++k) {
        detail::require_dims(models[k].shape == models.front().shape, "ensemble_logits: model shapes differ");
        sum += forward(models[k], inputs);
    }
    return sum / static_cast<double>(models.size());
}

/// Loss minimized by distill() at params, evaluated on the full public set.
inline double distill_kd_loss(const MlpShape& shape, const ParamVector& params, const Matrix& inputs,
                              const Logits& teacher, double temperature) {
    return kl_loss_grad(unflatten(shape, params), inputs, teacher, temperature).loss;
}

/// Ensemble distillation into the FedAvg model: E_d epochs of plain SGD over
/// the public set on T^2 KL(teacher || student) + alpha |theta - init|^2.
inline ParamVector distill(const ParamVector& init_params, const MlpShape& shape, std::span<const Mlp> client_models,
                           const Dataset& pub, const DistillConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    detail::require_dims(static_cast<std::size_t>(init_params.size()) == shape.param_count(),
                         "distill: init params do not match the model shape");
    if (!cfg.enabled || cfg.epochs == 0) return init_params;
    if (pub.size() == 0) throw DataError("distill: public set is empty");

    const Logits teacher = ensemble_logits(client_models, pub.features);
    Rng rng = SeedSeq(seed).then("distill").engine();
    ParamVector theta = init_params;
    const auto n = pub.size();
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = permutation(n, rng);
        for (std::size_t start = 0; start < n; start += bs) {
            const std::span<const std::size_t> rows(order.data() + start, std::min(bs, n - start));
            const Matrix x = detail::gather_rows(pub.features, rows);
            const Logits z = detail::gather_rows(teacher, rows);
            LossGrad kd = kl_loss_grad(unflatten(shape, theta), x, z, cfg.temperature);
            const ParamVector drift = theta - init_params;
            const double loss = kd.loss + cfg.alpha * drift.squaredNorm();
            if (!std::isfinite(loss)) {
                throw DivergenceError("distill: non-finite loss at epoch " + std::to_string(epoch));
            }
            theta -= cfg.lr * (kd.grad + (2.0 * cfg.alpha) * drift);
        }
    }
    if (!theta.allFinite()) throw DivergenceError("distill: parameters became non-finite");
    return theta;
}

/// Memory buffer for the next round: selected public rows and the client
/// ensemble's logits on them.
inline MemoryBuffer refresh_memory(std::span<const Mlp> client_models, const Dataset& pub,
                                   std::span<const std::size_t> memory_indices) {
    for (auto i : memory_indices) {
        if (i >= pub.size()) throw std::out_of_range("refresh_memory: index " + std::to_string(i) + " out of range");
    }
    MemoryBuffer mem;
    mem.inputs = detail::gather_rows(pub.features, memory_indices);
    mem.labels.reserve(memory_indices.size());
    for (auto i : memory_indices) mem.labels.push_back(pub.labels[i]);
    mem.ensemble_logits = ensemble_logits(client_models, mem.inputs);
    return mem;
}

}  // namespace fedproj
