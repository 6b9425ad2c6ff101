#pragma once

// Dense MLP engine: forward pass, exact backpropagation for cross-entropy
// and temperature-scaled KL losses, parameter flattening and SGD.
//
// Parameter layout (flatten/unflatten): layers in order; within a layer the
// weight matrix (out x in) row by row, followed by the bias vector.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedproj/error.hpp"
#include "fedproj/rng.hpp"

namespace fedproj {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
/// Flat parameter (or gradient) vector of a model.
using ParamVector = Eigen::VectorXd;
/// batch x classes raw model outputs.
using Logits = Matrix;

class MlpShape {
public:
    MlpShape() = default;

    explicit MlpShape(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
        if (sizes_.size() < 2) {
            throw std::invalid_argument("MlpShape needs at least input and output sizes");
        }
        for (int s : sizes_) {
            if (s < 1) {
                throw std::invalid_argument("MlpShape layer sizes must be positive");
            }
        }
    }
    MlpShape(std::initializer_list<int> layer_sizes) : MlpShape(std::vector<int>(layer_sizes)) {}

    const std::vector<int>& sizes() const { return sizes_; }
    std::size_t layer_count() const { return sizes_.empty() ? 0 : sizes_.size() - 1; }
    int input_dim() const { return sizes_.front(); }
    int output_dim() const { return sizes_.back(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            n += static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1] + sizes_[l + 1];
        }
        return n;
    }

    bool operator==(const MlpShape&) const = default;

private:
    std::vector<int> sizes_;
};

/// ReLU on hidden layers, identity on the output layer.
struct Mlp {
    MlpShape shape;
    std::vector<Matrix> weights;  // weights[l] is sizes[l+1] x sizes[l]
    std::vector<Vector> biases;

    bool operator==(const Mlp& other) const {
        if (!(shape == other.shape) || weights.size() != other.weights.size()) {
            return false;
        }
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != other.weights[l].rows() ||
                weights[l].cols() != other.weights[l].cols() ||
                biases[l].size() != other.biases[l].size() ||
                !(weights[l].array() == other.weights[l].array()).all() ||
                !(biases[l].array() == other.biases[l].array()).all()) {
                return false;
            }
        }
        return true;
    }
};

struct LossGrad {
    double loss = 0.0;
    ParamVector grad;
};

struct OptimizerState {
    ParamVector velocity;
    double lr = 0.0;
    double momentum = 0.0;

    static OptimizerState zeros(std::size_t n, double lr, double momentum) {
        if (!(lr > 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
            throw std::invalid_argument("optimizer needs lr > 0 and momentum in [0, 1)");
        }
        return {ParamVector::Zero(static_cast<Eigen::Index>(n)), lr, momentum};
    }
};

struct SgdResult {
    ParamVector params;
    OptimizerState state;
};

inline Mlp zero_mlp(const MlpShape& shape) {
    Mlp m;
    m.shape = shape;
    const auto& s = shape.sizes();
    for (std::size_t l = 0; l < shape.layer_count(); ++l) {
        m.weights.push_back(Matrix::Zero(s[l + 1], s[l]));
        m.biases.push_back(Vector::Zero(s[l + 1]));
    }
    return m;
}

/// Glorot-uniform weights, zero biases.
inline Mlp mlp_init(const MlpShape& shape, std::uint64_t seed) {
    Rng rng(seed);
    Mlp m = zero_mlp(shape);
    const auto& s = shape.sizes();
    for (std::size_t l = 0; l < shape.layer_count(); ++l) {
        const double bound = std::sqrt(6.0 / static_cast<double>(s[l] + s[l + 1]));
        Matrix& w = m.weights[l];
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            for (Eigen::Index j = 0; j < w.cols(); ++j) {
                w(i, j) = (2.0 * uniform01(rng) - 1.0) * bound;
            }
        }
    }
    return m;
}

inline ParamVector flatten(const Mlp& model) {
    ParamVector v(static_cast<Eigen::Index>(model.shape.param_count()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        const Matrix& w = model.weights[l];
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            v[k++] = w.data()[i];
        }
        const Vector& b = model.biases[l];
        for (Eigen::Index i = 0; i < b.size(); ++i) {
            v[k++] = b[i];
        }
    }
    return v;
}

inline Mlp unflatten(const MlpShape& shape, const ParamVector& v) {
    detail::require_dims(static_cast<std::size_t>(v.size()) == shape.param_count(),
                         "unflatten: parameter vector has length " + std::to_string(v.size()) +
                             ", shape expects " + std::to_string(shape.param_count()));
    Mlp m = zero_mlp(shape);
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        Matrix& w = m.weights[l];
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w.data()[i] = v[k++];
        }
        Vector& b = m.biases[l];
        for (Eigen::Index i = 0; i < b.size(); ++i) {
            b[i] = v[k++];
        }
    }
    return m;
}

namespace detail {

// Pre-activations of every layer plus the inputs, kept for backprop.
struct ForwardCache {
    std::vector<Matrix> activations;  // activations[l] feeds layer l
    Matrix logits;
};

inline ForwardCache forward_cached(const Mlp& model, const Matrix& inputs) {
    require_dims(inputs.cols() == model.shape.input_dim(),
                 "forward: input has " + std::to_string(inputs.cols()) + " columns, model expects " +
                     std::to_string(model.shape.input_dim()));
    ForwardCache cache;
    cache.activations.reserve(model.weights.size());
    Matrix h = inputs;
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        Matrix z = h * model.weights[l].transpose();
        z.rowwise() += model.biases[l].transpose();
        cache.activations.push_back(std::move(h));
        if (l + 1 < model.weights.size()) {
            h = z.cwiseMax(0.0);
        } else {
            cache.logits = std::move(z);
        }
    }
    return cache;
}

// Backpropagates dloss/dlogits through the cached forward pass.
inline ParamVector backward(const Mlp& model, const ForwardCache& cache, Matrix dz) {
    std::vector<Matrix> gw(model.weights.size());
    std::vector<Vector> gb(model.weights.size());
    for (std::size_t l = model.weights.size(); l-- > 0;) {
        const Matrix& a = cache.activations[l];
        gw[l] = dz.transpose() * a;
        gb[l] = dz.colwise().sum().transpose();
        if (l > 0) {
            Matrix da = dz * model.weights[l];
            // a is the ReLU output of layer l-1; its derivative is 1 where a > 0.
            dz = (a.array() > 0.0).select(da, 0.0);
        }
    }
    Mlp g;
    g.shape = model.shape;
    g.weights = std::move(gw);
    g.biases = std::move(gb);
    return flatten(g);
}

inline Matrix log_softmax_rows(const Matrix& scaled) {
    Matrix out(scaled.rows(), scaled.cols());
    for (Eigen::Index i = 0; i < scaled.rows(); ++i) {
        const double m = scaled.row(i).maxCoeff();
        const double lse = m + std::log((scaled.row(i).array() - m).exp().sum());
        out.row(i) = scaled.row(i).array() - lse;
    }
    return out;
}

inline void require_temperature(double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw std::invalid_argument("temperature must be positive and finite");
    }
}

}  // namespace detail

inline Logits forward(const Mlp& model, const Matrix& inputs) {
    return detail::forward_cached(model, inputs).logits;
}

/// Row-wise softmax of logits / temperature.
inline Matrix softmax(const Logits& logits, double temperature = 1.0) {
    detail::require_temperature(temperature);
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Eigen::RowVectorXd s = logits.row(i) / temperature;
        const Eigen::RowVectorXd e = (s.array() - s.maxCoeff()).exp();
        p.row(i) = e / e.sum();
    }
    return p;
}

/// Index of the largest entry per row, ties to the lowest index.
inline std::vector<int> argmax_rows(const Logits& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        int best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c) {
            if (logits(i, c) > logits(i, best)) {
                best = static_cast<int>(c);
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

/// Mean cross-entropy over the batch and its exact gradient.
inline LossGrad ce_loss_grad(const Mlp& model, const Matrix& inputs, std::span<const int> labels) {
    detail::require_dims(static_cast<Eigen::Index>(labels.size()) == inputs.rows(),
                         "ce_loss_grad: label count does not match batch size");
    detail::require_dims(inputs.rows() > 0, "ce_loss_grad: empty batch");
    const int classes = model.shape.output_dim();
    for (int y : labels) {
        if (y < 0 || y >= classes) {
            throw std::out_of_range("ce_loss_grad: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(classes) + ")");
        }
    }
    auto cache = detail::forward_cached(model, inputs);
    const Matrix logp = detail::log_softmax_rows(cache.logits);
    const double n = static_cast<double>(inputs.rows());
    double loss = 0.0;
    Matrix dz = logp.array().exp().matrix();
    for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
        const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
        loss -= logp(i, y);
        dz(i, y) -= 1.0;
    }
    dz /= n;
    return {loss / n, detail::backward(model, cache, std::move(dz))};
}

/// T^2 * mean_i KL(softmax(teacher_i / T) || softmax(student_i / T)) and its
/// exact gradient with the teacher held constant.
inline LossGrad kl_loss_grad(const Mlp& model, const Matrix& inputs, const Logits& teacher_logits,
                             double temperature) {
    detail::require_temperature(temperature);
    detail::require_dims(teacher_logits.rows() == inputs.rows() &&
                             teacher_logits.cols() == model.shape.output_dim(),
                         "kl_loss_grad: teacher logits shape does not match model output");
    detail::require_dims(inputs.rows() > 0, "kl_loss_grad: empty batch");
    auto cache = detail::forward_cached(model, inputs);
    const Matrix log_p = detail::log_softmax_rows(cache.logits / temperature);
    const Matrix log_q = detail::log_softmax_rows(teacher_logits / temperature);
    const Matrix q = log_q.array().exp().matrix();
    const Matrix p = log_p.array().exp().matrix();
    const double n = static_cast<double>(inputs.rows());

    double kl = 0.0;
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
        for (Eigen::Index c = 0; c < q.cols(); ++c) {
            if (q(i, c) > 0.0) {
                kl += q(i, c) * (log_q(i, c) - log_p(i, c));
            }
        }
    }
    const double t2 = temperature * temperature;
    // d/dz of T^2 KL(q || softmax(z/T)) = T (p - q)
    Matrix dz = (p - q) * (temperature / n);
    return {std::max(0.0, t2 * kl / n), detail::backward(model, cache, std::move(dz))};
}

/// v' = momentum * v + grad;  params' = params - lr * v'
inline SgdResult sgd_step(const ParamVector& params, const ParamVector& grad,
                          const OptimizerState& state) {
    detail::require_dims(params.size() == grad.size() && params.size() == state.velocity.size(),
                         "sgd_step: params, grad and velocity lengths differ");
    SgdResult out{params, state};
    out.state.velocity = state.momentum * state.velocity + grad;
    out.params = params - state.lr * out.state.velocity;
    return out;
}

inline double l2_sq_dist(const ParamVector& a, const ParamVector& b) {
    detail::require_dims(a.size() == b.size(), "l2_sq_dist: length mismatch");
    return (a - b).squaredNorm();
}

inline bool all_finite(const ParamVector& v) { return v.allFinite(); }

}  // namespace fedproj
