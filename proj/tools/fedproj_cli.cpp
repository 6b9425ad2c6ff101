// fedproj command-line front end.
//
//   fedproj run               one experiment, metrics + grids + final model
//   fedproj pilot             fedavg / feddf / fedproj on the Iris pilot, 3 seeds
//   fedproj ablate            projection-rate or weight-divergence sweeps
//   fedproj partition-report  per-client class counts
//   fedproj boundary          decision-boundary grid of a saved model
//
// Exit codes: 0 success, 1 other failure, 2 configuration/input error,
// 3 numerical divergence.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedproj/config.hpp"
#include "fedproj/io.hpp"
#include "fedproj/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace fedproj;

namespace {

struct CommonOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::optional<int> workers;
    int grid_resolution = 60;
};

std::string default_data_dir() {
    if (const char* env = std::getenv("FEDPROJ_DATA_DIR")) return env;
    return FEDPROJ_DATA_DIR;
}

fs::path output_dir(const CommonOptions& o) {
    if (!o.out_dir.empty()) return o.out_dir;
    if (const char* env = std::getenv("FEDPROJ_OUT_DIR")) return env;
    return "fedproj_out";
}

/// Config file (or the built-in pilot config) with overrides and flags applied.
ExperimentConfig load_config(const CommonOptions& o) {
    Json j;
    fs::path base_dir = fs::current_path();
    if (o.config_path.empty()) {
        j = config_to_json(pilot_config((fs::path(default_data_dir()) / "iris.csv").string()));
    } else {
        j = read_json_file(o.config_path);
        base_dir = fs::absolute(o.config_path).parent_path();
    }
    for (const auto& kv : o.overrides) apply_override(j, kv);
    if (o.seed) j["seed"] = *o.seed;
    if (o.workers) j["workers"] = *o.workers;
    ExperimentConfig cfg = config_from_json(j);
    resolve_paths(cfg, base_dir);
    cfg = resolve(cfg);
    validate(cfg);
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void write_grid(const fs::path& path, const ParamVector& params, const ExperimentConfig& cfg, const Bounds& b,
                int resolution, const std::string& what) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    std::ostringstream prov;
    prov << "seed=" << cfg.master_seed << " method=" << to_string(cfg.method) << ' ' << what
         << " resolution=" << resolution;
    write_grid_csv(out, export_boundary_grid(params, cfg.shape, b, resolution), prov.str());
}

enum class GridPolicy { snapshots, every_round };

/// Runs one experiment, streaming metrics to <dir>/metrics.jsonl.
ExperimentResult run_into(const ExperimentConfig& cfg, const Federation& fed, const fs::path& dir,
                          GridPolicy grids, int resolution) {
    fs::create_directories(dir);
    write_text(dir / "config.resolved.json", config_to_json(cfg).dump(2) + "\n");
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
    const RunInfo info{to_string(cfg.method), cfg.master_seed};
    const bool two_d = cfg.shape.input_dim() == 2;
    const std::set<int> snapshot_rounds{1, std::max(1, cfg.rounds / 2), cfg.rounds};

    auto result = run_experiment(cfg, fed, [&](const RoundReport& r) {
        metrics << metrics_record(r.metrics, info).dump() << '\n';
        metrics.flush();
        if (!two_d) return;
        const int t = r.metrics.round;
        const bool all = grids == GridPolicy::every_round;
        if (all || snapshot_rounds.count(t)) {
            write_grid(dir / ("boundary_round" + std::to_string(t) + "_global.csv"), r.state.global_params, cfg,
                       fed.bounds, resolution, "round=" + std::to_string(t) + " model=global");
        }
        if (all || t == cfg.rounds) {
            for (std::size_t i = 0; i < r.clients.size(); ++i) {
                const auto k = std::to_string(r.clients[i]);
                write_grid(dir / ("boundary_round" + std::to_string(t) + "_client" + k + ".csv"), r.updates[i].params,
                           cfg, fed.bounds, resolution, "round=" + std::to_string(t) + " model=client" + k);
            }
        }
    });
    std::ofstream model(dir / "model.txt");
    write_model(model, {cfg.shape, result.final_params, info.method, cfg.master_seed});
    return result;
}

double final_accuracy(const ExperimentResult& r) {
    for (auto it = r.metrics.rbegin(); it != r.metrics.rend(); ++it) {
        if (it->accuracy) return *it->accuracy;
    }
    return std::nan("");
}

int cmd_run(const CommonOptions& o) {
    const auto cfg = load_config(o);
    const auto dir = output_dir(o);
    const auto result = run_into(cfg, prepare(cfg), dir, GridPolicy::snapshots, o.grid_resolution);
    std::cout << "method=" << to_string(cfg.method) << " seed=" << cfg.master_seed << " rounds=" << cfg.rounds
              << " final_acc=" << format_double(final_accuracy(result)) << " out=" << dir.string() << '\n';
    return 0;
}

struct SummaryRow {
    std::string group;
    std::string value;
    std::uint64_t seed;
    double acc;
    double loss;
};

void print_summary(const std::vector<SummaryRow>& rows, const std::string& value_header, const fs::path& csv) {
    std::ofstream out(csv);
    out << "group," << value_header << ",seed,final_acc,final_loss\n";
    std::map<std::pair<std::string, std::string>, std::vector<double>> by_cell;
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto& r : rows) {
        out << r.group << ',' << r.value << ',' << r.seed << ',' << format_double(r.acc) << ','
            << format_double(r.loss) << '\n';
        const auto key = std::make_pair(r.group, r.value);
        if (!by_cell.count(key)) order.push_back(key);
        by_cell[key].push_back(r.acc);
    }
    std::cout << std::left << std::setw(12) << "group" << std::setw(12) << value_header << "mean_acc  per-seed\n";
    for (const auto& key : order) {
        const auto& accs = by_cell[key];
        double mean = 0.0;
        for (double a : accs) mean += a;
        mean /= static_cast<double>(accs.size());
        std::cout << std::left << std::setw(12) << key.first << std::setw(12) << key.second << std::fixed
                  << std::setprecision(4) << mean << "   ";
        for (double a : accs) std::cout << ' ' << a;
        std::cout << '\n' << std::defaultfloat;
    }
    std::cout << "summary written to " << csv.string() << '\n';
}

double final_loss(const ExperimentResult& r) {
    for (auto it = r.metrics.rbegin(); it != r.metrics.rend(); ++it) {
        if (it->loss) return *it->loss;
    }
    return std::nan("");
}

int cmd_pilot(CommonOptions o, int seed_count) {
    const auto base = load_config(o);
    if (!fs::exists(base.dataset.csv_path)) {
        throw DataError("pilot dataset not found: " + base.dataset.csv_path);
    }
    const auto dir = output_dir(o) / "pilot";
    std::vector<SummaryRow> rows;
    for (Method m : {Method::fedavg, Method::feddf, Method::fedproj}) {
        for (int s = 0; s < seed_count; ++s) {
            ExperimentConfig cfg = base;
            cfg.method = m;
            cfg.master_seed = base.master_seed + static_cast<std::uint64_t>(s);
            cfg = resolve(cfg);
            const auto sub = dir / (to_string(m) + "_seed" + std::to_string(cfg.master_seed));
            const auto r = run_into(cfg, prepare(cfg), sub, GridPolicy::every_round, o.grid_resolution);
            rows.push_back({to_string(m), "-", cfg.master_seed, final_accuracy(r), final_loss(r)});
        }
    }
    print_summary(rows, "setting", dir / "pilot_summary.csv");
    return 0;
}

int cmd_ablate(const CommonOptions& o, const std::string& kind, int seed_count) {
    const auto base = load_config(o);
    const auto dir = output_dir(o) / ("ablate_" + kind);
    std::vector<std::pair<std::string, ExperimentConfig>> cells;
    if (kind == "projection") {
        for (double rate : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            ExperimentConfig cfg = base;
            cfg.method = Method::fedproj;
            cfg.local.projection_rate = rate;
            cells.emplace_back(format_double(rate), cfg);
        }
    } else if (kind == "weight_divergence") {
        for (double alpha : {0.1, 0.3, 0.5}) {
            ExperimentConfig cfg = base;
            cfg.method = Method::fedproj;
            cfg.distill.alpha = alpha;
            cells.emplace_back(format_double(alpha), cfg);
        }
        ExperimentConfig off = base;
        off.method = Method::fedproj;
        off.distill.alpha = 0.0;
        cells.emplace_back("off", off);
    } else {
        throw ConfigError("ablation kind must be 'projection' or 'weight_divergence'");
    }
    std::vector<SummaryRow> rows;
    for (const auto& [label, cell] : cells) {
        for (int s = 0; s < seed_count; ++s) {
            ExperimentConfig cfg = cell;
            cfg.master_seed = base.master_seed + static_cast<std::uint64_t>(s);
            cfg = resolve(cfg);
            const auto sub = dir / (label + "_seed" + std::to_string(cfg.master_seed));
            const auto r = run_into(cfg, prepare(cfg), sub, GridPolicy::snapshots, o.grid_resolution);
            rows.push_back({kind, label, cfg.master_seed, final_accuracy(r), final_loss(r)});
        }
    }
    print_summary(rows, kind == "projection" ? "rate" : "alpha", dir / "summary.csv");
    return 0;
}

int cmd_partition_report(const CommonOptions& o) {
    const auto cfg = load_config(o);
    const auto fed = prepare(cfg);
    const auto counts = fed.partition.class_counts(fed.train);
    std::cout << "# schema=" << kSchemaVersion << " seed=" << cfg.master_seed << " partition=" << cfg.partition.kind;
    if (cfg.partition.kind == "dirichlet") std::cout << " beta=" << format_double(cfg.partition.beta);
    std::cout << '\n' << "client,n";
    for (int c = 0; c < fed.train.class_count; ++c) std::cout << ",class_" << c;
    std::cout << '\n';
    for (std::size_t k = 0; k < counts.size(); ++k) {
        std::cout << k << ',' << fed.partition.assignments[k].size();
        for (auto v : counts[k]) std::cout << ',' << v;
        std::cout << '\n';
    }
    return 0;
}

int cmd_boundary(const CommonOptions& o, const std::string& model_path, const std::string& grid_out,
                 const std::vector<double>& bounds_arg) {
    std::ifstream in(model_path);
    if (!in) throw DataError("cannot open model " + model_path);
    const auto dump = read_model(in);
    Bounds b;
    if (bounds_arg.size() == 4) {
        b = {bounds_arg[0], bounds_arg[1], bounds_arg[2], bounds_arg[3]};
    } else if (bounds_arg.empty()) {
        b = prepare(load_config(o)).bounds;
    } else {
        throw ConfigError("--bounds takes xmin,xmax,ymin,ymax");
    }
    std::ofstream out(grid_out);
    if (!out) throw std::runtime_error("cannot write " + grid_out);
    write_grid_csv(out, export_boundary_grid(dump.params, dump.shape, b, o.grid_resolution),
                   "seed=" + std::to_string(dump.seed) + " method=" + dump.method + " model=" + model_path);
    return 0;
}

void add_common(CLI::App* cmd, CommonOptions& o, bool with_config = true) {
    if (with_config) cmd->add_option("--config", o.config_path, "Experiment config (JSON); default: built-in pilot");
    cmd->add_option("--set", o.overrides, "Override a config value, e.g. --set local.lr=0.01");
    cmd->add_option("--seed", o.seed, "Master seed");
    cmd->add_option("--out", o.out_dir, "Output directory (default $FEDPROJ_OUT_DIR or ./fedproj_out)");
    cmd->add_option("--workers", o.workers, "Parallel client workers");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedproj: federated learning with gradient projection and ensemble distillation"};
    app.require_subcommand(1);
    CommonOptions o;
    int seeds = 3;
    std::string kind;
    std::string model_path, grid_out;
    std::vector<double> bounds;

    auto* run = app.add_subcommand("run", "Run one experiment");
    add_common(run, o);
    run->add_option("--resolution", o.grid_resolution, "Boundary grid resolution");

    auto* pilot = app.add_subcommand("pilot", "FedAvg, FedDF and FedProj on the Iris pilot");
    add_common(pilot, o);
    pilot->add_option("--seeds", seeds, "Number of seeds per method");
    pilot->add_option("--resolution", o.grid_resolution, "Boundary grid resolution");

    auto* ablate = app.add_subcommand("ablate", "Projection-rate or weight-divergence sweep");
    add_common(ablate, o);
    ablate->add_option("--kind", kind, "projection | weight_divergence")->required();
    ablate->add_option("--seeds", seeds, "Number of seeds per cell");
    ablate->add_option("--resolution", o.grid_resolution, "Boundary grid resolution");

    auto* report = app.add_subcommand("partition-report", "Per-client class counts");
    add_common(report, o);

    auto* boundary = app.add_subcommand("boundary", "Decision-boundary grid of a saved model");
    add_common(boundary, o);
    boundary->add_option("--model", model_path, "Model file written by run")->required();
    boundary->add_option("--grid-out", grid_out, "Output CSV")->required();
    boundary->add_option("--resolution", o.grid_resolution, "Grid resolution");
    boundary->add_option("--bounds", bounds, "xmin,xmax,ymin,ymax")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) return cmd_run(o);
        if (*pilot) return cmd_pilot(o, seeds);
        if (*ablate) return cmd_ablate(o, kind, seeds);
        if (*report) return cmd_partition_report(o);
        if (*boundary) return cmd_boundary(o, model_path, grid_out, bounds);
    } catch (const DivergenceError& e) {
        std::cerr << "error: numerical divergence: " << e.what() << '\n';
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: invalid configuration: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: bad input: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
