#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <sstream>

#include "oracle.hpp"
#include "p4c/config.hpp"
#include "p4c/harness.hpp"
#include "p4c/report_io.hpp"

using namespace p4c;

namespace {

/// Small fast configuration for harness-level tests; `extra` keys override.
TrainConfig tiny_config(const std::string& extra = "") {
    auto kv = parse_config_text(
        "corpus.train_scenes = 3\n"
        "corpus.test_scenes = 2\n"
        "corpus.primitives = 2\n"
        "corpus.points_per_primitive = 48\n"
        "model.hidden = 8\n"
        "model.dim = 8\n"
        "model.knn_k = 3\n"
        "batch_size = 8\n"
        "iterations = 20\n"
        "probe.steps = 60\n"
        "opt.base_lr = 0.05\n");
    for (const auto& [k, v] : parse_config_text(extra)) kv[k] = v;
    return TrainConfig::from_map(kv);
}

}  // namespace

TEST_CASE("config parsing applies defaults and rejects typos") {
    TrainConfig cfg = TrainConfig::from_text("");
    REQUIRE(cfg.batch_size == 16);
    REQUIRE(cfg.opt_base_lr == 0.8);
    REQUIRE(cfg.opt_weight_decay == 1e-4);
    REQUIRE(cfg.opt_power == 0.9);
    REQUIRE(cfg.schedule.h0 == Catch::Approx(1.0 / cfg.corpus_extent));
    REQUIRE(cfg.schedule.epsilon == Catch::Approx(20.0 / cfg.corpus_extent));
    // slope reaches epsilon at 80% of the budget
    REQUIRE(hardness_bound(std::int64_t(0.8 * double(cfg.iterations)), cfg.schedule) ==
            Catch::Approx(cfg.schedule.epsilon));
    REQUIRE(cfg.aug.sigma_xyz == Catch::Approx(0.02 * cfg.corpus_extent));

    REQUIRE_THROWS_AS(TrainConfig::from_text("iterations = ten\n"), config_error);
    REQUIRE_THROWS_AS(TrainConfig::from_text("iteations = 10\n"), config_error);
    REQUIRE_THROWS_AS(TrainConfig::from_text("seed = 1\nseed = 2\n"), config_error);
    REQUIRE_THROWS_AS(TrainConfig::from_text("objective = crossmodal\nfusion = hybrid\n"), config_error);
    REQUIRE_NOTHROW(TrainConfig::from_text("objective = crossmodal\n"));
}

TEST_CASE("fingerprints identify resolved configurations") {
    TrainConfig a = TrainConfig::from_text("seed = 1\n");
    TrainConfig b = TrainConfig::from_text("seed = 1\n# comment\n");
    TrainConfig c = TrainConfig::from_text("seed = 2\n");
    REQUIRE(a.fingerprint() == b.fingerprint());
    REQUIRE(a.fingerprint() != c.fingerprint());
    // canonical text round trips
    TrainConfig d = TrainConfig::from_text(a.to_text());
    REQUIRE(d.fingerprint() == a.fingerprint());
}

TEST_CASE("collapse_metric matches its closed forms") {
    Eigen::MatrixXd same(4, 3);
    same.col(0) = same.col(1) = same.col(2) = Eigen::Vector4d(1, 0, 0, 0);
    REQUIRE(collapse_metric(same) == Catch::Approx(1.0));

    Eigen::MatrixXd ortho = Eigen::MatrixXd::Identity(4, 2);
    REQUIRE(collapse_metric(ortho) == Catch::Approx(0.0).margin(1e-15));

    Rng rng(6);
    Eigen::MatrixXd sphere = oracle::random_unit_columns(32, 1000, rng);
    REQUIRE(std::abs(collapse_metric(sphere)) < 0.05);

    Eigen::MatrixXd bad = same;
    bad(0, 0) = 2.0;
    REQUIRE_THROWS_AS(collapse_metric(bad), contract_error);
    REQUIRE_THROWS_AS(collapse_metric(Eigen::MatrixXd::Identity(4, 1)), contract_error);
}

TEST_CASE("a linear probe separates one-hot features perfectly") {
    const int c = 4, per = 50;
    Eigen::MatrixXd train_f = Eigen::MatrixXd::Zero(c, c * per);
    std::vector<std::uint32_t> train_y;
    for (int i = 0; i < c * per; ++i) {
        train_f(i % c, i) = 1.0;
        train_y.push_back(i % c);
    }
    ProbeResult res = linear_probe(train_f, train_y, train_f, train_y, c, 200, 0.5);
    REQUIRE(res.mean_iou == Catch::Approx(1.0));
}

TEST_CASE("a collapsed representation probes at chance level") {
    const int c = 4, n = 200;
    Eigen::MatrixXd f = Eigen::MatrixXd::Constant(6, n, 0.3);
    std::vector<std::uint32_t> y;
    for (int i = 0; i < n; ++i) y.push_back(i % c);
    ProbeResult res = linear_probe(f, y, f, y, c, 200, 0.5);
    REQUIRE(res.mean_iou <= 1.0 / c + 1e-9);
    REQUIRE(res.mean_iou < 0.2);
}

TEST_CASE("probing is invariant to a permutation of feature dimensions") {
    Rng rng(11);
    const int d = 6, n = 120, c = 3;
    Eigen::MatrixXd f = oracle::random_unit_columns(d, n, rng);
    std::vector<std::uint32_t> y;
    for (int i = 0; i < n; ++i) y.push_back(i % c);
    ProbeResult base = linear_probe(f, y, f, y, c, 100, 0.3);
    std::vector<int> perm = {3, 5, 0, 2, 4, 1};
    Eigen::MatrixXd g(d, n);
    for (int r = 0; r < d; ++r) g.row(r) = f.row(perm[r]);
    ProbeResult perm_res = linear_probe(g, y, g, y, c, 100, 0.3);
    REQUIRE(perm_res.mean_iou == Catch::Approx(base.mean_iou).epsilon(1e-12));
}

TEST_CASE("classes absent from the train split are flagged and excluded") {
    const int c = 3, n = 60;
    Eigen::MatrixXd f = Eigen::MatrixXd::Random(4, n);
    std::vector<std::uint32_t> train_y, test_y;
    for (int i = 0; i < n; ++i) train_y.push_back(i % 2);  // class 2 never seen
    for (int i = 0; i < n; ++i) test_y.push_back(i % c);
    ProbeResult res = linear_probe(f, train_y, f, test_y, c, 50, 0.3);
    REQUIRE(res.class_in_train[0] == 1);
    REQUIRE(res.class_in_train[1] == 1);
    REQUIRE(res.class_in_train[2] == 0);
}

TEST_CASE("the pointcontrast objective is PairInfoNCE with an empty disturbed set") {
    TrainConfig cfg = tiny_config("objective = pointcontrast\nfusion = hybrid\n");
    Corpus corpus = build_corpus(cfg);
    EncoderParams params = EncoderParams::init(cfg.fusion, cfg.model_hidden, cfg.model_dim, cfg.model_knn_k, 5);
    ViewPair views = make_views(corpus.train[0], cfg.aug, 17);
    Rng rng(3);
    PairBatch batch = build_pair_batch(views, 0, cfg.batch_size, cfg.effective_schedule(), rng);

    ModelInputs in = assemble_inputs(views, batch, params, MaskStyle::Full, false);
    detail::StepOutcome step = detail::run_step(in, params, cfg);

    ForwardResult r = forward(in, params);
    double expect = pair_info_nce(r.f_anchor, r.f_positive, Eigen::MatrixXd(r.f_positive.rows(), 0), cfg.loss).loss;
    REQUIRE(step.loss == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("zero iterations keep the initialization and empty curves") {
    TrainConfig cfg = tiny_config("iterations = 0\n");
    PretrainResult a = pretrain(cfg);
    REQUIRE(a.report.loss_curve.empty());
    REQUIRE(a.report.bound_curve.empty());
    EncoderParams fresh = EncoderParams::init(cfg.fusion, cfg.model_hidden, cfg.model_dim, cfg.model_knn_k,
                                              splitmix64(cfg.seed ^ 0x5eed));
    REQUIRE(a.params.t.W1 == fresh.t.W1);
    REQUIRE(a.params.t.V2 == fresh.t.V2);
    // random-init control equals the probe when nothing was trained
    REQUIRE(a.report.probe.mean_iou == Catch::Approx(a.report.probe_random.mean_iou));
}

TEST_CASE("pretraining is deterministic: identical checkpoints and reports") {
    TrainConfig cfg = tiny_config();
    PretrainResult a = pretrain(cfg);
    PretrainResult b = pretrain(cfg);

    std::stringstream ca, cb;
    save_checkpoint(ca, a.params);
    save_checkpoint(cb, b.params);
    REQUIRE(ca.str() == cb.str());
    REQUIRE(report_to_json(a.report) == report_to_json(b.report));

    std::stringstream ma, mb;
    write_metrics_csv(ma, a.report);
    write_metrics_csv(mb, b.report);
    REQUIRE(ma.str() == mb.str());
    REQUIRE(a.report.fingerprint == cfg.fingerprint());
}

TEST_CASE("training losses stay finite and the report is fully populated") {
    TrainConfig cfg = tiny_config();
    PretrainResult res = pretrain(cfg);
    REQUIRE(int(res.report.loss_curve.size()) == 20);
    REQUIRE(int(res.report.bound_curve.size()) == 20);
    REQUIRE(int(res.report.collapse_curve.size()) == 20);
    for (double v : res.report.loss_curve) REQUIRE(std::isfinite(v));
    REQUIRE_FALSE(res.report.collapse_checkpoints.empty());
    REQUIRE(res.report.probe.per_class_iou.size() == 4);
    REQUIRE(res.report.probe_random.per_class_iou.size() == 4);
}

TEST_CASE("every objective trains end to end") {
    for (const char* extra : {"objective = p4contrast\nfusion = early\n",
                              "objective = p4contrast\nfusion = late\n",
                              "objective = p4contrast\nfusion = hybrid\ntrain_branches = separate-then-fuse\n",
                              "objective = pointcontrast\nfusion = hybrid\n",
                              "objective = crossmodal\nfusion = late\n"}) {
        TrainConfig cfg = tiny_config(extra);
        PretrainResult res = pretrain(cfg);
        INFO(extra);
        REQUIRE(int(res.report.loss_curve.size()) == 20);
        for (double v : res.report.loss_curve) REQUIRE(std::isfinite(v));
    }
}

TEST_CASE("easy and hard modes hold the bound constant") {
    TrainConfig e = tiny_config("hardness.mode = easy\n");
    PretrainResult easy = pretrain(e);
    for (double b : easy.report.bound_curve) REQUIRE(b == e.schedule.h0);

    TrainConfig h = tiny_config("hardness.mode = hard\n");
    PretrainResult hard = pretrain(h);
    for (double b : hard.report.bound_curve) REQUIRE(b == h.schedule.epsilon);

    TrainConfig p = tiny_config();
    PretrainResult prog = pretrain(p);
    REQUIRE(prog.report.bound_curve.front() == p.schedule.h0);
    REQUIRE(prog.report.bound_curve.back() == p.schedule.epsilon);  // ramp done by 80%
}

TEST_CASE("grid expansion builds the sorted cross product") {
    std::string grid =
        "hardness.mode = easy | hard | progressive\n"
        "corpus.primitives = 2\n";
    std::vector<AblationCell> cells = expand_grid(grid);
    REQUIRE(cells.size() == 3);
    REQUIRE(cells[0].descriptor == "hardness.mode=easy");
    REQUIRE(cells[1].descriptor == "hardness.mode=hard");
    REQUIRE(cells[2].descriptor == "hardness.mode=progressive");
    for (const auto& c : cells) REQUIRE(c.overrides.at("corpus.primitives") == "2");

    std::vector<AblationCell> multi = expand_grid("a.b = 1 | 2\nc.d = x | y | z\n");
    REQUIRE(multi.size() == 6);
}

TEST_CASE("the ablation runner emits one row per cell and seed") {
    std::string grid =
        "hardness.mode = easy | hard | progressive\n"
        "corpus.train_scenes = 3\n"
        "corpus.test_scenes = 2\n"
        "corpus.primitives = 2\n"
        "corpus.points_per_primitive = 48\n"
        "model.hidden = 8\n"
        "model.dim = 8\n"
        "model.knn_k = 3\n"
        "batch_size = 8\n"
        "iterations = 5\n"
        "probe.steps = 20\n"
        "opt.base_lr = 0.05\n";
    std::vector<AblationRow> rows = ablate(grid, 2);
    REQUIRE(rows.size() == 6);
    for (const auto& r : rows) {
        INFO(r.cell << " seed " << r.seed << " " << r.error);
        REQUIRE(r.ok);
    }
    REQUIRE(rows[0].cell == "hardness.mode=easy");
    REQUIRE(rows[0].seed == 1);
    REQUIRE(rows[1].seed == 2);

    std::stringstream csv;
    write_ablation_csv(csv, rows);
    std::string first_line;
    std::getline(csv, first_line);
    REQUIRE(first_line == "cell,seed,miou,collapse,fallbacks,status");
}

TEST_CASE("ablation failures become error rows without stopping the run") {
    std::string grid = "objective = p4contrast | bogus\niterations = 1\ncorpus.train_scenes = 2\n"
                       "corpus.test_scenes = 1\ncorpus.primitives = 2\ncorpus.points_per_primitive = 48\n"
                       "model.hidden = 8\nmodel.dim = 8\nmodel.knn_k = 3\nbatch_size = 8\nprobe.steps = 10\n";
    std::vector<AblationRow> rows = ablate(grid, 1);
    REQUIRE(rows.size() == 2);
    int ok = 0, failed = 0;
    for (const auto& r : rows) {
        if (r.ok) {
            ++ok;
        } else {
            ++failed;
            REQUIRE_FALSE(r.error.empty());
        }
    }
    REQUIRE(ok == 1);
    REQUIRE(failed == 1);
}

TEST_CASE("csv fields quote per RFC 4180") {
    REQUIRE(csv_field("plain") == "plain");
    REQUIRE(csv_field("a,b") == "\"a,b\"");
    REQUIRE(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
}

TEST_CASE("corpora round trip through scene files") {
    TrainConfig cfg = tiny_config();
    Corpus corpus = build_corpus(cfg);
    std::string dir = (std::filesystem::temp_directory_path() / "p4c_corpus_test").string();
    std::filesystem::remove_all(dir);
    save_corpus(dir, corpus);
    Corpus loaded = load_corpus(dir);
    REQUIRE(loaded.train.size() == corpus.train.size());
    REQUIRE(loaded.test.size() == corpus.test.size());
    REQUIRE(loaded.train[0].points == corpus.train[0].points);
    REQUIRE(loaded.test[1].labels == corpus.test[1].labels);
    std::filesystem::remove_all(dir);
}

TEST_CASE("the fine-tuned probe runs and reports every class") {
    TrainConfig cfg = tiny_config();
    Corpus corpus = build_corpus(cfg);
    EncoderParams params = EncoderParams::init(cfg.fusion, cfg.model_hidden, cfg.model_dim, cfg.model_knn_k, 5);
    FinetuneOptions opt;
    opt.steps = 5;
    opt.samples_per_scene = 32;
    ProbeResult res = finetune_probe(corpus, params, opt);
    REQUIRE(res.per_class_iou.size() == 4);
    REQUIRE(std::isfinite(res.mean_iou));
}
