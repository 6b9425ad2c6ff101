#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "fedproj/config.hpp"
#include "fedproj/io.hpp"
#include "fedproj/orchestrator.hpp"
#include "test_util.hpp"

namespace {

using namespace fedproj;

const std::string kIris = std::string(FEDPROJ_DATA_DIR) + "/iris.csv";

ExperimentConfig blob_config(Method method) {
    ExperimentConfig c;
    c.method = method;
    c.rounds = 4;
    c.n_clients = 4;
    c.dataset.source = "blobs";
    c.dataset.pca = false;
    c.dataset.blob_classes = 3;
    c.dataset.blob_per_class = 40;
    c.dataset.blob_centers = {{-2, 0}, {2, 0}, {0, 2.5}};
    c.dataset.blob_std = 0.8;
    c.partition.kind = "dirichlet";
    c.partition.beta = 0.5;
    c.shape = MlpShape{2, 8, 3};
    c.local.epochs = 2;
    c.local.lr = 0.02;
    c.master_seed = 7;
    return c;
}

std::vector<std::string> stream(const ExperimentResult& r, const std::string& method, std::uint64_t seed) {
    std::vector<std::string> lines;
    for (const auto& m : r.metrics) lines.push_back(comparable_line(metrics_record(m, {method, seed}).dump()));
    return lines;
}

std::vector<std::string> run_stream(const ExperimentConfig& c) {
    return stream(run_experiment(c), "x", c.master_seed);
}

TEST(SampleClients, FullRateIsEveryone) {
    EXPECT_EQ(sample_clients(4, 1.0, 3, 1), (std::vector<int>{0, 1, 2, 3}));
}

TEST(SampleClients, TenPercentOfHundred) {
    const auto ids = sample_clients(100, 0.1, 2, 9);
    EXPECT_EQ(ids.size(), 10u);
    EXPECT_EQ(std::set<int>(ids.begin(), ids.end()).size(), 10u);
    EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
    EXPECT_EQ(ids, sample_clients(100, 0.1, 2, 9));
    EXPECT_NE(ids, sample_clients(100, 0.1, 3, 9));
}

TEST(SampleClients, AtLeastOne) { EXPECT_EQ(sample_clients(5, 0.01, 0, 1).size(), 1u); }

TEST(Resolve, ForcesMethodConsistency) {
    ExperimentConfig c;
    c.local.projection_rate = 0.7;
    c.distill.alpha = 0.3;
    c.method = Method::feddf;
    auto r = resolve(c);
    EXPECT_EQ(r.local.projection_rate, 0.0);
    EXPECT_EQ(r.distill.alpha, 0.0);
    EXPECT_TRUE(r.distill.enabled);
    c.method = Method::fedavg;
    r = resolve(c);
    EXPECT_FALSE(r.distill.enabled);
    EXPECT_EQ(r.local.method, LocalMethod::fedavg);
    c.method = Method::fedproj;
    r = resolve(c);
    EXPECT_EQ(r.local.method, LocalMethod::fedproj);
    EXPECT_EQ(r.local.projection_rate, 0.7);
}

TEST(Validate, NamesTheField) {
    auto c = blob_config(Method::fedavg);
    c.sample_rate = 0;
    try {
        validate(c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("sample_rate"), std::string::npos);
    }
    c = blob_config(Method::fedavg);
    c.partition.kind = "zipf";
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(Prepare, PilotIrisLayout) {
    const auto c = pilot_config(kIris);
    const auto fed = prepare(resolve(c));
    EXPECT_EQ(fed.full.size(), 150u);
    EXPECT_EQ(fed.full.dim(), 2);
    EXPECT_EQ(fed.test.size(), 30u);
    EXPECT_EQ(fed.test.class_histogram(), (std::vector<std::size_t>{10, 10, 10}));
    EXPECT_EQ(fed.pub.size() + fed.train.size(), 120u);
    EXPECT_EQ(fed.memory_size, fed.pub.size());
    ASSERT_EQ(fed.client_data.size(), 3u);
    std::size_t total = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        total += fed.client_data[k].size();
        const auto h = fed.client_data[k].class_histogram();
        EXPECT_EQ(std::max_element(h.begin(), h.end()) - h.begin(), static_cast<long>(k));
    }
    EXPECT_EQ(total, fed.train.size());
}

TEST(Evaluate, PerfectAndTieBreak) {
    Dataset d;
    d.class_count = 3;
    d.features.resize(6, 2);
    d.features << 1, 0, 0, 1, -1, -1, 2, 0, 0, 2, -2, -2;
    d.labels = {0, 1, 2, 0, 1, 2};
    Mlp m = zero_mlp({2, 3});
    m.weights[0] << 1, 0, 0, 1, -1, -1;
    EXPECT_EQ(evaluate(flatten(m), m.shape, d).accuracy, 1.0);
    EXPECT_NEAR(evaluate(flatten(zero_mlp({2, 3})), m.shape, d).accuracy, 1.0 / 3.0, 1e-15);
}

TEST(Evaluate, MatchesRowLoop) {
    std::mt19937_64 rng(3);
    const Dataset d = make_blobs(3, 20, {{0, 0}, {1, 1}, {2, 0}}, 1.0, 4);
    const Mlp m = fedproj::testing::random_mlp({2, 5, 3}, rng);
    int correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto z = forward(m, d.features.row(static_cast<Eigen::Index>(i)));
        int best = 0;
        for (int c = 1; c < 3; ++c)
            if (z(0, c) > z(0, best)) best = c;
        correct += best == d.labels[i];
    }
    EXPECT_NEAR(evaluate(flatten(m), m.shape, d).accuracy, correct / 60.0, 1e-15);
}

TEST(BoundaryGrid, SizeConstantAndPointwise) {
    std::mt19937_64 rng(5);
    const Mlp m = fedproj::testing::random_mlp({2, 6, 3}, rng, 1.0);
    const Bounds b{-3, 3, -2, 4};
    const auto grid = export_boundary_grid(flatten(m), m.shape, b, 17);
    ASSERT_EQ(grid.size(), 17u * 17);
    EXPECT_EQ(grid.front().x, -3.0);
    EXPECT_EQ(grid.front().y, -2.0);
    EXPECT_EQ(grid.back().x, 3.0);
    EXPECT_EQ(grid.back().y, 4.0);
    std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
    for (int i = 0; i < 100; ++i) {
        const auto& p = grid[pick(rng)];
        Matrix x(1, 2);
        x << p.x, p.y;
        EXPECT_EQ(argmax_rows(forward(m, x))[0], p.predicted);
    }
    Mlp constant = zero_mlp({2, 3});
    constant.biases[0] << 0, 0, 1;
    for (const auto& p : export_boundary_grid(flatten(constant), constant.shape, b, 5)) EXPECT_EQ(p.predicted, 2);
    EXPECT_THROW(export_boundary_grid(ParamVector::Zero(4 * 3 + 3), MlpShape{4, 3}, b, 5), DimensionError);
    EXPECT_THROW(export_boundary_grid(flatten(m), m.shape, b, 1), std::invalid_argument);
}

TEST(RunExperiment, ZeroRoundsReturnsInitial) {
    auto c = blob_config(Method::fedproj);
    c.rounds = 0;
    const auto fed = prepare(resolve(c));
    const auto r = run_experiment(c, fed);
    EXPECT_TRUE(r.metrics.empty());
    EXPECT_TRUE((r.final_params.array() == fed.initial_params.array()).all());
}

TEST(RunExperiment, ZeroEpochsKeepsGlobal) {
    auto c = blob_config(Method::fedavg);
    c.local.epochs = 0;
    c.rounds = 2;
    const auto fed = prepare(resolve(c));
    const auto r = run_experiment(c, fed);
    EXPECT_LE((r.final_params - fed.initial_params).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(RunExperiment, SingleClientIsPlainLocalTraining) {
    auto c = blob_config(Method::fedavg);
    c.n_clients = 1;
    c.rounds = 1;
    const auto fed = prepare(resolve(c));
    const auto r = run_experiment(c, fed);
    const auto local = local_update(fed.initial_params, c.shape, fed.client_data[0], nullptr, resolve(c).local,
                                    Seeds{c.master_seed}.client(0, 0));
    EXPECT_TRUE((r.final_params.array() == local.params.array()).all());
}

TEST(RunExperiment, DeterministicAndWorkerInvariant) {
    auto c = blob_config(Method::fedproj);
    const auto a = run_stream(c);
    EXPECT_EQ(a, run_stream(c));
    c.workers = 3;
    EXPECT_EQ(a, run_stream(c));
    c.master_seed = 8;
    EXPECT_NE(a, run_stream(c));
}

TEST(RunExperiment, MetricsShape) {
    auto c = blob_config(Method::fedproj);
    c.eval_every = 3;
    c.rounds = 4;
    const auto r = run_experiment(c);
    ASSERT_EQ(r.metrics.size(), 4u);
    EXPECT_FALSE(r.metrics[0].accuracy.has_value());
    EXPECT_TRUE(r.metrics[2].accuracy.has_value());
    EXPECT_TRUE(r.metrics[3].accuracy.has_value());
    EXPECT_FALSE(r.metrics[0].l_mem_pre.has_value());
    EXPECT_EQ(r.metrics[0].proj_active_frac, 0.0);
    EXPECT_TRUE(r.metrics[1].l_mem_pre.has_value());
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(r.metrics[i].round, static_cast<int>(i) + 1);
        EXPECT_GE(r.metrics[i].proj_active_frac, 0.0);
        EXPECT_LE(r.metrics[i].proj_active_frac, 1.0);
    }
    EXPECT_GE(*r.metrics[3].accuracy, 0.0);
    EXPECT_LE(*r.metrics[3].accuracy, 1.0);
}

TEST(ModeLattice, ZeroRateNoDistillIsFedAvg) {
    auto proj = blob_config(Method::fedproj);
    proj.local.projection_rate = 0.0;
    proj.distill.enabled = false;
    EXPECT_EQ(run_stream(proj), run_stream(blob_config(Method::fedavg)));
}

TEST(ModeLattice, ZeroRateZeroAlphaIsFedDf) {
    auto proj = blob_config(Method::fedproj);
    proj.local.projection_rate = 0.0;
    proj.distill.alpha = 0.0;
    EXPECT_EQ(run_stream(proj), run_stream(blob_config(Method::feddf)));
}

TEST(ModeLattice, ZeroMuProxIsFedAvg) {
    auto prox = blob_config(Method::fedprox);
    prox.local.prox_mu = 0.0;
    EXPECT_EQ(run_stream(prox), run_stream(blob_config(Method::fedavg)));
}

TEST(ModeLattice, MethodsActuallyDiffer) {
    EXPECT_NE(run_stream(blob_config(Method::fedproj)), run_stream(blob_config(Method::fedavg)));
    EXPECT_NE(run_stream(blob_config(Method::feddf)), run_stream(blob_config(Method::fedavg)));
}

TEST(RunExperiment, AggregateInsideClientHull) {
    auto c = blob_config(Method::fedavg);
    c.sample_rate = 0.5;
    int rounds = 0;
    run_experiment(c, [&](const RoundReport& r) {
        ++rounds;
        for (Eigen::Index i = 0; i < r.state.global_params.size(); ++i) {
            double lo = r.updates[0].params[i], hi = lo;
            for (const auto& u : r.updates) {
                lo = std::min(lo, u.params[i]);
                hi = std::max(hi, u.params[i]);
            }
            EXPECT_GE(r.state.global_params[i], lo);
            EXPECT_LE(r.state.global_params[i], hi);
        }
        EXPECT_EQ(r.clients.size(), 2u);
    });
    EXPECT_EQ(rounds, c.rounds);
}

TEST(RunExperiment, DivergenceCarriesRoundAndClient) {
    auto c = blob_config(Method::fedavg);
    c.local.lr = 1e9;
    try {
        run_experiment(c);
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("round 1, "), std::string::npos) << e.what();
    }
}

TEST(ParallelFor, LowestIndexErrorWins) {
    try {
        detail::parallel_for(6, 3, [](std::size_t i) {
            if (i == 2 || i == 4) throw std::runtime_error("fail " + std::to_string(i));
        });
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_STREQ(e.what(), "fail 2");
    }
}

}  // namespace
