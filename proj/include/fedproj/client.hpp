#pragma once

// Client-side local training. In fedproj mode every mini-batch gradient g_new
// is replaced by the closest vector whose inner product with the memory-loss
// gradient g_glob is nonnegative:
//
//   g_proj = g_new                                          if <g_new, g_glob> >= 0
//   g_proj = g_new - <g_new, g_glob> / (|g_glob|^2 + eps) * g_glob    otherwise
//
// so that, to first order, a step never increases the loss on the memory
// buffer of server ensemble logits.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedproj/data.hpp"
#include "fedproj/error.hpp"
#include "fedproj/nn.hpp"
#include "fedproj/rng.hpp"

namespace fedproj {

/// Public-set samples paired with the server's ensemble logits.
struct MemoryBuffer {
    Matrix inputs;             // m x d
    Logits ensemble_logits;    // m x classes
    std::vector<int> labels;   // empty unless the labeled-gradient variant is used

    std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }

    void validate() const {
        if (inputs.rows() != ensemble_logits.rows()) {
            throw DimensionError("memory buffer: inputs and ensemble logits row counts differ");
        }
        if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
            throw DimensionError("memory buffer: label count differs from row count");
        }
        if (!inputs.allFinite() || !ensemble_logits.allFinite()) {
            throw DataError("memory buffer contains non-finite entries");
        }
    }
};

enum class LocalMethod { fedavg, fedprox, fedproj };

inline std::string to_string(LocalMethod m) {
    switch (m) {
        case LocalMethod::fedavg: return "fedavg";
        case LocalMethod::fedprox: return "fedprox";
        case LocalMethod::fedproj: return "fedproj";
    }
    return "?";
}

struct LocalConfig {
    int epochs = 5;
    int batch_size = 8;
    double lr = 1e-3;
    double momentum = 0.9;
    double epsilon = 1e-8;
    double projection_rate = 1.0;  // probability a batch step is projected
    LocalMethod method = LocalMethod::fedavg;
    double prox_mu = 0.0;
    double memory_temperature = 1.0;
    // Use cross-entropy on labeled memory rows instead of KL to ensemble logits.
    bool labeled_public_gradient = false;

    void validate() const {
        if (epochs < 0) throw ConfigError("local.epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("local.batch_size must be >= 1");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("local.lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("local.momentum must be in [0, 1)");
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("local.epsilon must be positive");
        if (!(projection_rate >= 0.0 && projection_rate <= 1.0)) {
            throw ConfigError("local.projection_rate must be in [0, 1]");
        }
        if (!(prox_mu >= 0.0) || !std::isfinite(prox_mu)) throw ConfigError("local.prox_mu must be >= 0");
        if (!(memory_temperature > 0.0) || !std::isfinite(memory_temperature)) {
            throw ConfigError("local.memory_temperature must be positive");
        }
    }
};

struct ClientUpdate {
    ParamVector params;
    std::size_t sample_count = 0;
    std::vector<double> epoch_losses;         // mean cross-entropy per epoch
    std::optional<double> memory_loss_before;  // only when a memory buffer was given
    std::optional<double> memory_loss_after;
    std::size_t steps = 0;
    std::size_t projected_steps = 0;  // steps where g_glob was computed
    std::size_t active_steps = 0;     // steps where the constraint was active
};

/// Squared norm below which g_glob is treated as zero and projection skipped.
inline constexpr double kVanishingGlobalGradSq = 1e-18;

/// A mini-batch cross-entropy above this is treated as numerical divergence.
inline constexpr double kDivergentLoss = 1e6;

inline ParamVector project_gradient(const ParamVector& g_new, const ParamVector& g_glob, double epsilon) {
    detail::require_dims(g_new.size() == g_glob.size(), "project_gradient: length mismatch");
    if (!g_new.allFinite() || !g_glob.allFinite()) {
        throw DivergenceError("project_gradient: non-finite gradient");
    }
    if (!(epsilon >= 0.0)) throw std::invalid_argument("project_gradient: epsilon must be >= 0");
    const double dot = g_new.dot(g_glob);
    if (dot >= 0.0) {
        return g_new;
    }
    return g_new - (dot / (g_glob.squaredNorm() + epsilon)) * g_glob;
}

/// Mean temperature-scaled KL from the stored ensemble logits to the model's
/// logits over the whole buffer, with its gradient.
inline LossGrad memory_loss_grad(const Mlp& model, const MemoryBuffer& memory, double temperature) {
    if (memory.size() == 0) throw DataError("memory_loss_grad: empty memory buffer");
    return kl_loss_grad(model, memory.inputs, memory.ensemble_logits, temperature);
}

namespace detail {

inline LossGrad memory_gradient(const Mlp& model, const MemoryBuffer& memory, const LocalConfig& cfg) {
    if (cfg.labeled_public_gradient) {
        if (memory.labels.empty()) {
            throw ConfigError("labeled_public_gradient needs labels in the memory buffer");
        }
        return ce_loss_grad(model, memory.inputs, memory.labels);
    }
    return memory_loss_grad(model, memory, cfg.memory_temperature);
}

inline Matrix gather_rows(const Matrix& src, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

}  // namespace detail

/// E epochs of mini-batch SGD with momentum from start_params over `data`.
/// Batch order and projection dropout draw from separate streams derived
/// from `seed`, so the projection setting never changes the batch order.
inline ClientUpdate local_update(const ParamVector& start_params, const MlpShape& shape, const Dataset& data,
                                 const MemoryBuffer* memory, const LocalConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (data.size() == 0) throw DataError("local_update: client has no data");
    detail::require_dims(static_cast<std::size_t>(start_params.size()) == shape.param_count(),
                         "local_update: start params do not match the model shape");
    detail::require_dims(data.dim() == shape.input_dim(), "local_update: data width does not match the model input");
    if (memory != nullptr) memory->validate();

    Rng batch_rng = SeedSeq(seed).then("batches").engine();
    Rng drop_rng = SeedSeq(seed).then("projection").engine();

    ClientUpdate out;
    out.sample_count = data.size();
    if (memory != nullptr) {
        out.memory_loss_before = memory_loss_grad(unflatten(shape, start_params), *memory, cfg.memory_temperature).loss;
    }

    ParamVector theta = start_params;
    OptimizerState opt = OptimizerState::zeros(shape.param_count(), cfg.lr, cfg.momentum);
    const bool projecting = cfg.method == LocalMethod::fedproj && memory != nullptr;
    const auto n = data.size();
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = permutation(n, batch_rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t len = std::min(bs, n - start);
            const std::span<const std::size_t> rows(order.data() + start, len);
            const Matrix x = detail::gather_rows(data.features, rows);
            std::vector<int> y(len);
            for (std::size_t i = 0; i < len; ++i) y[i] = data.labels[rows[i]];

            const Mlp model = unflatten(shape, theta);
            LossGrad local = ce_loss_grad(model, x, y);
            if (!std::isfinite(local.loss) || local.loss > kDivergentLoss) {
                throw DivergenceError("local_update: loss " + std::to_string(local.loss) + " at epoch " +
                                      std::to_string(epoch) + ", batch starting at " + std::to_string(start));
            }
            epoch_loss += local.loss * static_cast<double>(len);
            ParamVector g = std::move(local.grad);
            if (cfg.method == LocalMethod::fedprox && cfg.prox_mu > 0.0) {
                g += cfg.prox_mu * (theta - start_params);
            }
            if (projecting && uniform01(drop_rng) < cfg.projection_rate) {
                ++out.projected_steps;
                const ParamVector g_glob = detail::memory_gradient(model, *memory, cfg).grad;
                if (g_glob.squaredNorm() >= kVanishingGlobalGradSq) {
                    if (g.dot(g_glob) < 0.0) ++out.active_steps;
                    g = project_gradient(g, g_glob, cfg.epsilon);
                }
            }
            auto step = sgd_step(theta, g, opt);
            theta = std::move(step.params);
            opt = std::move(step.state);
            ++out.steps;
            if (!theta.allFinite()) {
                throw DivergenceError("local_update: parameters became non-finite at epoch " + std::to_string(epoch));
            }
        }
        out.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
    }

    if (memory != nullptr) {
        out.memory_loss_after = memory_loss_grad(unflatten(shape, theta), *memory, cfg.memory_temperature).loss;
    }
    out.params = std::move(theta);
    return out;
}

struct MemoryCheckRow {
    double eta = 0.0;
    double delta_projected = 0.0;    // L_mem(theta - eta g_proj) - L_mem(theta)
    double delta_unprojected = 0.0;  // L_mem(theta - eta g_new) - L_mem(theta)
};

/// Single-step change of the memory loss along the projected and the raw
/// gradient for each learning rate.
inline std::vector<MemoryCheckRow> first_order_memory_check(const Mlp& model, const MemoryBuffer& memory,
                                                            const ParamVector& g_new, std::span<const double> etas,
                                                            double temperature, double epsilon) {
    const auto base = memory_loss_grad(model, memory, temperature);
    const ParamVector g_proj = project_gradient(g_new, base.grad, epsilon);
    const ParamVector theta = flatten(model);
    std::vector<MemoryCheckRow> rows;
    rows.reserve(etas.size());
    for (double eta : etas) {
        const auto loss_at = [&](const ParamVector& dir) {
            return memory_loss_grad(unflatten(model.shape, theta - eta * dir), memory, temperature).loss;
        };
        rows.push_back({eta, loss_at(g_proj) - base.loss, loss_at(g_new) - base.loss});
    }
    return rows;
}

}  // namespace fedproj
