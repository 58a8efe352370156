// Command-line front end: pretraining, probing, ablation grids, gradient
// checks, and a self-contained demo experiment.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "p4c/config.hpp"
#include "p4c/harness.hpp"
#include "p4c/report_io.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw p4c::config_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void print_probe(const char* name, const p4c::ProbeResult& probe) {
    std::printf("%s: mean IoU %.4f\n", name, probe.mean_iou);
    for (std::size_t c = 0; c < probe.per_class_iou.size(); ++c)
        std::printf("  class %zu: IoU %.4f%s\n", c, probe.per_class_iou[c],
                    probe.class_in_train[c] ? "" : " (absent from train split, excluded)");
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir) {
    p4c::TrainConfig cfg = p4c::TrainConfig::from_text(read_file(config_path));
    std::printf("fingerprint %s\n", cfg.fingerprint().c_str());
    p4c::PretrainResult res = p4c::pretrain(cfg);

    fs::create_directories(out_dir);
    p4c::save_checkpoint_file((fs::path(out_dir) / "checkpoint.p4cckp").string(), res.params);
    {
        std::ofstream os(fs::path(out_dir) / "metrics.csv", std::ios::binary);
        p4c::write_metrics_csv(os, res.report);
    }
    p4c::write_report_file((fs::path(out_dir) / "report.json").string(), res.report);
    {
        std::ofstream os(fs::path(out_dir) / "config.txt", std::ios::binary);
        os << cfg.to_text();
    }
    p4c::save_corpus((fs::path(out_dir) / "corpus").string(), p4c::build_corpus(cfg));

    if (!res.report.loss_curve.empty())
        std::printf("loss %.4f -> %.4f over %zu iterations\n", res.report.loss_curve.front(),
                    res.report.loss_curve.back(), res.report.loss_curve.size());
    std::printf("final collapse %.4f, sampler fallbacks %lld\n", res.report.final_collapse,
                (long long)res.report.fallback_total);
    print_probe("probe (pretrained)", res.report.probe);
    print_probe("probe (random init)", res.report.probe_random);
    std::printf("wall time %.1f s\n", res.report.wall_time_sec);
    std::printf("wrote %s\n", out_dir.c_str());
    return 0;
}

int cmd_probe(const std::string& ckpt_path, const std::string& corpus_path, bool finetune, int steps, double lr,
              int samples, int ft_steps, double ft_lr) {
    p4c::EncoderParams params = p4c::load_checkpoint_file(ckpt_path);
    p4c::Corpus corpus = p4c::load_corpus(corpus_path);
    p4c::ProbeResult frozen = p4c::probe_params(corpus, params, steps, lr, samples);
    print_probe("probe (frozen features)", frozen);
    if (finetune) {
        p4c::FinetuneOptions opt;
        opt.steps = ft_steps;
        opt.encoder_lr = ft_lr;
        opt.head_lr = lr;
        opt.samples_per_scene = samples;
        p4c::ProbeResult tuned = p4c::finetune_probe(corpus, params, opt);
        print_probe("probe (encoder fine-tuned)", tuned);
    }
    return 0;
}

int cmd_ablate(const std::string& grid_path, int seeds, const std::string& out_csv) {
    std::vector<p4c::AblationRow> rows = p4c::ablate(read_file(grid_path), seeds);
    std::ofstream os(out_csv, std::ios::binary);
    if (!os) throw p4c::config_error("cannot open output csv: " + out_csv);
    p4c::write_ablation_csv(os, rows);
    int failures = 0;
    for (const auto& r : rows)
        if (!r.ok) ++failures;
    std::printf("wrote %zu rows to %s (%d failed)\n", rows.size(), out_csv.c_str(), failures);
    return failures == 0 ? 0 : 1;
}

int cmd_gradcheck(int trials) {
    double worst = 0.0;
    for (p4c::FusionMode fusion : {p4c::FusionMode::Early, p4c::FusionMode::Late, p4c::FusionMode::Hybrid}) {
        for (bool include_positive : {false, true}) {
            p4c::GradCheckResult r = p4c::gradient_check(trials, fusion, include_positive);
            std::printf("fusion %-6s include_positive %d: max rel err %.3e over %d instances\n",
                        p4c::to_string(fusion).c_str(), int(include_positive), r.max_rel_err, r.instances);
            worst = std::max(worst, r.max_rel_err);
        }
    }
    std::printf("worst relative error %.3e (tolerance 1e-5)\n", worst);
    return worst < 1e-5 ? 0 : 1;
}

int cmd_demo() {
    auto run = [](const char* name, const std::string& text) {
        p4c::TrainConfig cfg = p4c::TrainConfig::from_text(text);
        p4c::PretrainResult res = p4c::pretrain(cfg);
        std::printf("%-24s mIoU %.4f (random-init control %.4f), final collapse %.4f, %.0f s\n", name,
                    res.report.probe.mean_iou, res.report.probe_random.mean_iou, res.report.final_collapse,
                    res.report.wall_time_sec);
        return res;
    };
    std::printf("running the default experiment, one seed; see the acceptance suite for the 5-seed version\n");
    run("p4contrast (hybrid)", "objective = p4contrast\nfusion = hybrid\nseed = 1\n");
    run("pointcontrast (early)", "objective = pointcontrast\nfusion = early\nseed = 1\n");
    run("crossmodal (late)", "objective = crossmodal\nfusion = late\nseed = 1\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrastive pretraining over pairs of point-pixel pairs"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    auto* pre = app.add_subcommand("pretrain", "run one pretraining configuration");
    pre->add_option("--config", config_path, "flat key=value config file")->required()->check(CLI::ExistingFile);
    pre->add_option("--out", out_dir, "output directory");

    std::string ckpt_path, corpus_path;
    bool finetune = false;
    int probe_steps = 500, probe_samples = 256, ft_steps = 100;
    double probe_lr = 0.1, ft_lr = 0.02;
    auto* probe = app.add_subcommand("probe", "linear probe of a checkpoint on a corpus directory");
    probe->add_option("--checkpoint", ckpt_path, "checkpoint file")->required()->check(CLI::ExistingFile);
    probe->add_option("--corpus", corpus_path, "corpus directory")->required();
    probe->add_flag("--finetune-encoder", finetune, "also fine-tune the encoder weights");
    probe->add_option("--steps", probe_steps, "probe gradient steps");
    probe->add_option("--lr", probe_lr, "probe learning rate");
    probe->add_option("--samples-per-scene", probe_samples, "train rows sampled per scene (0 = all)");
    probe->add_option("--finetune-steps", ft_steps, "fine-tuning steps");
    probe->add_option("--finetune-lr", ft_lr, "encoder learning rate while fine-tuning");

    std::string grid_path, out_csv = "ablation.csv";
    int seeds = 5;
    auto* abl = app.add_subcommand("ablate", "run a config grid and write a CSV");
    abl->add_option("--grid", grid_path, "grid file ('|' separates swept values)")->required()->check(CLI::ExistingFile);
    abl->add_option("--seeds", seeds, "seeds per cell");
    abl->add_option("--out", out_csv, "output CSV path");

    int trials = 20;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
    grad->add_option("--trials", trials, "instances per fusion mode and loss variant");

    app.add_subcommand("demo", "run the default experiment once");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) return cmd_pretrain(config_path, out_dir);
        if (probe->parsed()) return cmd_probe(ckpt_path, corpus_path, finetune, probe_steps, probe_lr, probe_samples,
                                              ft_steps, ft_lr);
        if (abl->parsed()) return cmd_ablate(grid_path, seeds, out_csv);
        if (grad->parsed()) return cmd_gradcheck(trials);
        return cmd_demo();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
