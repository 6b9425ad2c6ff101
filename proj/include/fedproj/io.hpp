#pragma once

// On-disk artifacts:
//   metrics.jsonl  one self-contained JSON object per completed round
//   *.csv grids    "# key=value ..." provenance line, then x,y,class rows
//   model.txt      text header (schema, method, seed, shape, count), then
//                  one parameter per line in flatten() order

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedproj/config.hpp"
#include "fedproj/error.hpp"
#include "fedproj/nn.hpp"
#include "fedproj/orchestrator.hpp"

namespace fedproj {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

struct RunInfo {
    std::string method;
    std::uint64_t seed = 0;
};

inline Json metrics_record(const RoundMetrics& m, const RunInfo& info) {
    const auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    return Json{{"schema", kSchemaVersion},
                {"method", info.method},
                {"seed", info.seed},
                {"round", m.round},
                {"acc", opt(m.accuracy)},
                {"loss", opt(m.loss)},
                {"local_loss", m.local_loss},
                {"l_mem_pre", opt(m.l_mem_pre)},
                {"l_mem_post", opt(m.l_mem_post)},
                {"proj_active_frac", m.proj_active_frac},
                {"clients", m.clients},
                {"seconds", m.seconds}};
}

/// The record without its wall-clock field, for reproducibility checks.
inline std::string comparable_line(const std::string& jsonl_line) {
    Json j = Json::parse(jsonl_line);
    j.erase("seconds");
    return j.dump();
}

inline void write_grid_csv(std::ostream& out, const std::vector<GridPoint>& grid, const std::string& provenance) {
    out << "# schema=" << kSchemaVersion << ' ' << provenance << '\n';
    out << "x,y,class\n";
    for (const auto& p : grid) {
        out << format_double(p.x) << ',' << format_double(p.y) << ',' << p.predicted << '\n';
    }
}

struct ModelDump {
    MlpShape shape;
    ParamVector params;
    std::string method;
    std::uint64_t seed = 0;
};

inline void write_model(std::ostream& out, const ModelDump& m) {
    out << "# fedproj model\n";
    out << "schema " << kSchemaVersion << '\n';
    out << "method " << m.method << '\n';
    out << "seed " << m.seed << '\n';
    out << "shape";
    for (int s : m.shape.sizes()) out << ' ' << s;
    out << '\n';
    out << "params " << m.params.size() << '\n';
    for (Eigen::Index i = 0; i < m.params.size(); ++i) out << format_double(m.params[i]) << '\n';
}

inline ModelDump read_model(std::istream& in) {
    ModelDump m;
    std::string line;
    std::size_t count = 0;
    bool have_count = false;
    std::vector<int> sizes;
    while (!have_count && std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "schema") {
            int v = 0;
            ls >> v;
            if (v != kSchemaVersion) throw DataError("model file: unsupported schema " + std::to_string(v));
        } else if (key == "method") {
            ls >> m.method;
        } else if (key == "seed") {
            ls >> m.seed;
        } else if (key == "shape") {
            for (int s; ls >> s;) sizes.push_back(s);
        } else if (key == "params") {
            ls >> count;
            have_count = true;
        } else {
            throw DataError("model file: unexpected header line '" + line + "'");
        }
    }
    if (!have_count) throw DataError("model file: missing params header");
    try {
        m.shape = MlpShape(sizes);
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("model file: bad shape: ") + e.what());
    }
    if (count != m.shape.param_count()) throw DataError("model file: parameter count does not match shape");
    m.params.resize(static_cast<Eigen::Index>(count));
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw DataError("model file: truncated parameter list");
        double v = 0.0;
        if (!detail::parse_double(detail::trim(line), v)) throw DataError("model file: bad parameter '" + line + "'");
        m.params[static_cast<Eigen::Index>(i)] = v;
    }
    return m;
}

}  // namespace fedproj
