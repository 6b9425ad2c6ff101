#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "fedproj/error.hpp"
#include "fedproj/nn.hpp"
#include "fedproj/rng.hpp"

namespace fedproj {

struct Dataset {
    Matrix features;  // n x d
    std::vector<int> labels;
    int class_count = 0;
    std::vector<std::string> class_names;  // optional, indexed by label id

    std::size_t size() const { return labels.size(); }
    int dim() const { return static_cast<int>(features.cols()); }

    void validate() const {
        if (labels.empty()) {
            throw DataError("dataset is empty");
        }
        if (static_cast<std::size_t>(features.rows()) != labels.size()) {
            throw DataError("dataset feature rows and label count differ");
        }
        for (int y : labels) {
            if (y < 0 || y >= class_count) {
                throw DataError("dataset label " + std::to_string(y) + " outside [0, " +
                                std::to_string(class_count) + ")");
            }
        }
        if (!features.allFinite()) {
            throw DataError("dataset contains non-finite features");
        }
    }

    /// Rows in the given order; class metadata is kept.
    Dataset subset(std::span<const std::size_t> rows) const {
        Dataset out;
        out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
        out.labels.reserve(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= size()) {
                throw std::out_of_range("dataset row " + std::to_string(rows[i]) + " out of range");
            }
            out.features.row(static_cast<Eigen::Index>(i)) =
                features.row(static_cast<Eigen::Index>(rows[i]));
            out.labels.push_back(labels[rows[i]]);
        }
        out.class_count = class_count;
        out.class_names = class_names;
        return out;
    }

    std::vector<std::size_t> class_histogram() const {
        std::vector<std::size_t> h(static_cast<std::size_t>(class_count), 0);
        for (int y : labels) {
            ++h[static_cast<std::size_t>(y)];
        }
        return h;
    }
};

struct CsvOptions {
    bool has_header = false;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        cells.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return cells;
}

inline bool parse_double(std::string_view cell, double& out) {
    if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
    return ec == std::errc{} && ptr == cell.data() + cell.size() && !cell.empty();
}

}  // namespace detail

/// Numeric feature columns followed by one label column. Labels (string or
/// integer) get dense ids in order of first appearance.
inline Dataset load_csv(std::istream& in, const CsvOptions& opts = {},
                        const std::string& source = "<stream>") {
    Dataset ds;
    std::unordered_map<std::string, int> label_ids;
    std::vector<double> values;
    std::size_t width = 0;
    std::string line;
    std::size_t line_no = 0;
    bool header_pending = opts.has_header;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        if (header_pending) {
            header_pending = false;
            continue;
        }
        const auto cells = detail::split_commas(line);
        const auto where = source + ":" + std::to_string(line_no);
        if (cells.size() < 2) {
            throw DataError(where + ": expected at least one feature column and a label");
        }
        if (width == 0) {
            width = cells.size();
        } else if (cells.size() != width) {
            throw DataError(where + ": ragged row with " + std::to_string(cells.size()) +
                            " columns, expected " + std::to_string(width));
        }
        for (std::size_t c = 0; c + 1 < cells.size(); ++c) {
            double v = 0.0;
            if (!detail::parse_double(cells[c], v)) {
                throw DataError(where + ": non-numeric feature '" + std::string(cells[c]) +
                                "' in column " + std::to_string(c + 1));
            }
            values.push_back(v);
        }
        const std::string label(cells.back());
        auto [it, inserted] = label_ids.emplace(label, static_cast<int>(label_ids.size()));
        if (inserted) ds.class_names.push_back(label);
        ds.labels.push_back(it->second);
    }
    if (ds.labels.empty()) {
        throw DataError(source + ": no data rows");
    }
    const auto d = static_cast<Eigen::Index>(width - 1);
    ds.features = Eigen::Map<const Matrix>(values.data(), static_cast<Eigen::Index>(ds.labels.size()), d);
    ds.class_count = static_cast<int>(ds.class_names.size());
    ds.validate();
    return ds;
}

inline Dataset load_csv(const std::string& path, const CsvOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    return load_csv(in, opts, path);
}

// ---------------------------------------------------------------------------
// PCA

struct PcaTransform {
    Vector mean;
    Matrix components;            // 2 x d, orthonormal rows
    Eigen::Vector2d eigenvalues;  // variances along the two components

    Dataset apply(const Dataset& data) const {
        detail::require_dims(data.features.cols() == mean.size(), "pca: feature width mismatch");
        Dataset out = data;
        out.features = (data.features.rowwise() - mean.transpose()) * components.transpose();
        return out;
    }
};

/// Top-2 principal directions of the sample covariance (n - 1 denominator).
/// Each component's largest-magnitude entry is made positive.
inline PcaTransform pca_fit(const Dataset& data) {
    const auto n = data.features.rows();
    const auto d = data.features.cols();
    if (n < 2 || d < 2) {
        throw DataError("pca needs at least 2 rows and 2 feature columns");
    }
    PcaTransform t;
    t.mean = data.features.colwise().mean().transpose();
    const Matrix centered = data.features.rowwise() - t.mean.transpose();
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) {
        throw DataError("pca: eigendecomposition failed");
    }
    // Eigen returns ascending eigenvalues.
    const Eigen::VectorXd& vals = eig.eigenvalues();
    if (!(vals[d - 1] > 0.0)) {
        throw DataError("pca: data has zero variance in every direction");
    }
    t.components.resize(2, d);
    for (int k = 0; k < 2; ++k) {
        Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0.0) v = -v;
        t.components.row(k) = v.transpose();
        t.eigenvalues[k] = std::max(0.0, vals[d - 1 - k]);
    }
    return t;
}

inline std::pair<Dataset, PcaTransform> pca_fit_transform(const Dataset& data) {
    auto t = pca_fit(data);
    return {t.apply(data), std::move(t)};
}

// ---------------------------------------------------------------------------
// Splits and partitions

struct IndexSplit {
    std::vector<std::size_t> kept;   // sorted
    std::vector<std::size_t> taken;  // sorted
};

inline std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& data) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.class_count));
    for (std::size_t i = 0; i < data.size(); ++i) {
        by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
    }
    return by_class;
}

/// Takes round(fraction * n_c) shuffled rows of every class c.
inline IndexSplit stratified_split(const Dataset& data, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ConfigError("split fraction must lie in (0, 1)");
    }
    Rng rng = SeedSeq(seed).then("stratified_split").engine();
    IndexSplit out;
    for (auto& rows : indices_by_class(data)) {
        shuffle(std::span<std::size_t>(rows), rng);
        const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(rows.size())));
        out.taken.insert(out.taken.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take));
        out.kept.insert(out.kept.end(), rows.begin() + static_cast<std::ptrdiff_t>(take), rows.end());
    }
    std::sort(out.kept.begin(), out.kept.end());
    std::sort(out.taken.begin(), out.taken.end());
    if (out.kept.empty() || out.taken.empty()) {
        throw ConfigError("split fraction " + std::to_string(fraction) + " leaves one side empty");
    }
    return out;
}

struct PublicSplit {
    Dataset train;
    Dataset pub;
    IndexSplit rows;
};

inline PublicSplit split_public(const Dataset& data, double fraction, std::uint64_t seed) {
    auto rows = stratified_split(data, fraction, seed);
    return {data.subset(rows.kept), data.subset(rows.taken), std::move(rows)};
}

/// Uniform sample of m distinct rows out of n, returned sorted.
inline std::vector<std::size_t> sample_memory(std::size_t public_n, std::size_t m, std::uint64_t seed) {
    if (m < 1 || m > public_n) {
        throw std::out_of_range("memory size " + std::to_string(m) + " outside [1, " +
                                std::to_string(public_n) + "]");
    }
    Rng rng(SeedSeq(seed).then("memory").value());
    std::vector<std::size_t> idx(public_n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < m; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform_below(rng, public_n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<std::size_t> sample_memory(const Dataset& pub, std::size_t m, std::uint64_t seed) {
    return sample_memory(pub.size(), m, seed);
}

struct ClientPartition {
    std::vector<std::vector<std::size_t>> assignments;  // sorted row ids per client
    double beta = 0.0;  // 0 for non-Dirichlet partitions

    std::size_t client_count() const { return assignments.size(); }

    /// clients x classes sample counts.
    std::vector<std::vector<std::size_t>> class_counts(const Dataset& data) const {
        std::vector<std::vector<std::size_t>> m(assignments.size(),
                                                std::vector<std::size_t>(static_cast<std::size_t>(data.class_count), 0));
        for (std::size_t k = 0; k < assignments.size(); ++k) {
            for (auto r : assignments[k]) {
                ++m[k][static_cast<std::size_t>(data.labels[r])];
            }
        }
        return m;
    }

    /// True when the lists are disjoint, cover [0, n) and every client is nonempty.
    bool is_partition_of(std::size_t n) const {
        std::vector<int> seen(n, 0);
        for (const auto& rows : assignments) {
            if (rows.empty()) return false;
            for (auto r : rows) {
                if (r >= n || seen[r]++) return false;
            }
        }
        return std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; });
    }
};

inline constexpr int kDirichletMaxRetries = 100;

/// Per class: proportions p ~ Dir(beta * 1), shuffled class rows cut at
/// floor(cumsum(p) * n_c). The whole draw is repeated on a fresh substream
/// until every client holds at least one row.
inline ClientPartition dirichlet_partition(const Dataset& data, int n_clients, double beta,
                                           std::uint64_t seed) {
    if (n_clients < 1) throw ConfigError("dirichlet_partition: n_clients must be >= 1");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("dirichlet_partition: beta must be positive");
    const auto k_clients = static_cast<std::size_t>(n_clients);
    const auto by_class = indices_by_class(data);
    for (int attempt = 0; attempt < kDirichletMaxRetries; ++attempt) {
        Rng rng = SeedSeq(seed).then("dirichlet").then(static_cast<std::uint64_t>(attempt)).engine();
        std::gamma_distribution<double> gamma(beta, 1.0);
        ClientPartition part{std::vector<std::vector<std::size_t>>(k_clients), beta};
        bool degenerate = false;
        for (auto rows : by_class) {
            shuffle(std::span<std::size_t>(rows), rng);
            std::vector<double> p(k_clients);
            double total = 0.0;
            for (auto& x : p) {
                x = gamma(rng);
                total += x;
            }
            if (!(total > 0.0)) {
                degenerate = true;
                break;
            }
            double cum = 0.0;
            std::size_t start = 0;
            for (std::size_t k = 0; k < k_clients; ++k) {
                cum += p[k] / total;
                std::size_t end = rows.size();
                if (k + 1 < k_clients) {
                    end = std::min(rows.size(), static_cast<std::size_t>(std::floor(cum * static_cast<double>(rows.size()))));
                    end = std::max(end, start);
                }
                part.assignments[k].insert(part.assignments[k].end(),
                                           rows.begin() + static_cast<std::ptrdiff_t>(start),
                                           rows.begin() + static_cast<std::ptrdiff_t>(end));
                start = end;
            }
        }
        if (degenerate) continue;
        const bool all_nonempty = std::all_of(part.assignments.begin(), part.assignments.end(),
                                              [](const auto& a) { return !a.empty(); });
        if (all_nonempty) {
            for (auto& a : part.assignments) std::sort(a.begin(), a.end());
            return part;
        }
    }
    throw ConfigError("dirichlet_partition: no draw gave every one of " + std::to_string(n_clients) +
                      " clients a sample after " + std::to_string(kDirichletMaxRetries) + " retries");
}

/// Fixed skewed split: client (c mod K) gets round(dominant * n_c) rows of
/// class c, every other client round((1 - dominant) / (K - 1) * n_c); the
/// rounding remainder goes to client 0. Rows within a class are shuffled.
inline ClientPartition pilot_partition(const Dataset& data, int n_clients, std::uint64_t seed,
                                       double dominant = 0.8) {
    if (n_clients < 1) throw ConfigError("pilot_partition: n_clients must be >= 1");
    if (!(dominant >= 0.0 && dominant <= 1.0)) throw ConfigError("pilot_partition: dominant share must be in [0, 1]");
    const auto k_clients = static_cast<std::size_t>(n_clients);
    Rng rng = SeedSeq(seed).then("pilot_partition").engine();
    ClientPartition part{std::vector<std::vector<std::size_t>>(k_clients), 0.0};
    auto by_class = indices_by_class(data);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& rows = by_class[c];
        shuffle(std::span<std::size_t>(rows), rng);
        const double n_c = static_cast<double>(rows.size());
        const std::size_t owner = c % k_clients;
        std::vector<std::size_t> counts(k_clients, 0);
        if (k_clients == 1) {
            counts[0] = rows.size();
        } else {
            const double minor = (1.0 - dominant) / static_cast<double>(k_clients - 1);
            std::size_t assigned = 0;
            for (std::size_t k = 0; k < k_clients; ++k) {
                counts[k] = static_cast<std::size_t>(std::lround((k == owner ? dominant : minor) * n_c));
                assigned += counts[k];
            }
            // Rounding can overshoot; take the excess back from the largest shares.
            while (assigned > rows.size()) {
                auto it = std::max_element(counts.begin(), counts.end());
                --*it;
                --assigned;
            }
            counts[0] += rows.size() - assigned;
        }
        std::size_t start = 0;
        for (std::size_t k = 0; k < k_clients; ++k) {
            part.assignments[k].insert(part.assignments[k].end(),
                                       rows.begin() + static_cast<std::ptrdiff_t>(start),
                                       rows.begin() + static_cast<std::ptrdiff_t>(start + counts[k]));
            start += counts[k];
        }
    }
    for (auto& a : part.assignments) {
        std::sort(a.begin(), a.end());
        if (a.empty()) throw ConfigError("pilot_partition: a client received no rows");
    }
    return part;
}

/// Isotropic Gaussian clusters, per_class_n samples around each center.
inline Dataset make_blobs(int class_count, int per_class_n, const std::vector<std::vector<double>>& centers,
                          double stddev, std::uint64_t seed) {
    if (class_count < 1 || per_class_n < 1) throw ConfigError("make_blobs: counts must be positive");
    if (static_cast<int>(centers.size()) != class_count) {
        throw ConfigError("make_blobs: need one center per class");
    }
    if (!(stddev >= 0.0)) throw ConfigError("make_blobs: stddev must be nonnegative");
    const auto d = static_cast<Eigen::Index>(centers.front().size());
    for (const auto& c : centers) {
        if (static_cast<Eigen::Index>(c.size()) != d || d == 0) {
            throw ConfigError("make_blobs: centers must share a positive dimension");
        }
    }
    Rng rng = SeedSeq(seed).then("blobs").engine();
    std::normal_distribution<double> normal(0.0, 1.0);
    Dataset ds;
    ds.class_count = class_count;
    ds.features.resize(static_cast<Eigen::Index>(class_count) * per_class_n, d);
    Eigen::Index row = 0;
    for (int c = 0; c < class_count; ++c) {
        ds.class_names.push_back(std::to_string(c));
        for (int i = 0; i < per_class_n; ++i, ++row) {
            for (Eigen::Index j = 0; j < d; ++j) {
                ds.features(row, j) = centers[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] +
                                      stddev * normal(rng);
            }
            ds.labels.push_back(c);
        }
    }
    return ds;
}

}  // namespace fedproj
