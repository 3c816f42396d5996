// layton: staged training and evaluation driver for the latent-consistency
// tokenizer pipeline. One command per process; each validates its stage
// prerequisites before touching the run directory.

#include <CLI11.hpp>

#include "layton/pipeline.hpp"

using namespace layton;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "runs/default";
    std::string resume;
    int seed = -1;
};

RunConfig make_config(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg.load_file(args.config_path);
    cfg.apply_env_overrides();
    if (args.seed >= 0) cfg.set("seed", std::to_string(args.seed), "--seed");
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool with_resume = false) {
    cmd->add_option("--config", args.config_path, "config file (key = value lines)");
    cmd->add_option("--out", args.out_dir, "run directory")->capture_default_str();
    cmd->add_option("--seed", args.seed, "override the config seed");
    if (with_resume) cmd->add_option("--resume", args.resume, "warm-start from this checkpoint");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layton: discrete tokenizer with a latent consistency decoder"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string input_dir, caption, report_path, plot_out = "plot.png";
    double scale = 1.5;
    int count = 8;

    auto* c_gen_data = app.add_subcommand("gen-data", "render the synthetic corpus");
    add_common(c_gen_data, args);
    auto* c_vq = app.add_subcommand("train-vq", "stage 0a: pretrain the VQ tokenizer");
    add_common(c_vq, args, true);
    auto* c_ldm = app.add_subcommand("train-ldm", "stage 0b: pretrain VAE and eps-denoiser");
    add_common(c_ldm, args, true);
    auto* c_ladd = app.add_subcommand("train-ladd", "stage 1: conditional diffusion decoder");
    add_common(c_ladd, args, true);
    auto* c_cm = app.add_subcommand("distill-cm", "consistency distillation of the decoder");
    add_common(c_cm, args);
    auto* c_pixel = app.add_subcommand("train-pixel", "stage 2: pixel reconstruction loss");
    add_common(c_pixel, args);
    auto* c_argen = app.add_subcommand("train-argen", "train the autoregressive generator");
    add_common(c_argen, args, true);

    auto* c_recon = app.add_subcommand("reconstruct", "tokenize and reconstruct images");
    add_common(c_recon, args);
    c_recon->add_option("--input", input_dir, "directory of PNGs (default: holdout split)");

    auto* c_generate = app.add_subcommand("generate", "caption -> tokens -> image");
    add_common(c_generate, args);
    c_generate->add_option("--caption", caption, "caption text (default: holdout captions)");
    c_generate->add_option("--scale", scale, "CFG scale")->capture_default_str();
    c_generate->add_option("--count", count, "number of images")->capture_default_str();

    auto* c_eval = app.add_subcommand("eval", "reconstruction (and generation) metrics");
    add_common(c_eval, args);
    auto* c_sweep_tok = app.add_subcommand("sweep-tokens", "reconstruction metrics per token budget");
    add_common(c_sweep_tok, args);
    auto* c_sweep_cfg = app.add_subcommand("sweep-cfg", "generation metrics per CFG scale");
    add_common(c_sweep_cfg, args);

    auto* c_plot = app.add_subcommand("plot", "render curves from a sweep report");
    add_common(c_plot, args);
    c_plot->add_option("--report", report_path, "sweep report json")->required();
    c_plot->add_option("--output", plot_out, "output PNG")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = make_config(args);
        Pipeline pipe(cfg, args.out_dir);
        RunLock lock(pipe.paths());
        pipe.log_resolved_config();

        if (c_gen_data->parsed()) {
            pipe.gen_data();
        } else if (c_vq->parsed()) {
            pipe.train_vq_stage(args.resume);
        } else if (c_ldm->parsed()) {
            pipe.train_ldm_stage(args.resume);
        } else if (c_ladd->parsed()) {
            auto vq = pipe.load_vq("train-ladd");
            auto ldm = pipe.load_ldm("train-ladd");
            pipe.train_ladd_stage(vq, ldm, args.resume);
        } else if (c_cm->parsed()) {
            auto vq = pipe.load_vq("distill-cm");
            auto ldm = pipe.load_ldm("distill-cm");
            pipe.distill_stage(vq, ldm);
        } else if (c_pixel->parsed()) {
            auto vq = pipe.load_vq("train-pixel");
            auto ldm = pipe.load_ldm("train-pixel");
            pipe.train_pixel_stage(vq, ldm);
        } else if (c_argen->parsed()) {
            auto vq = pipe.load_vq("train-argen");
            pipe.train_argen_stage(vq, args.resume);
        } else if (c_recon->parsed()) {
            pipe.reconstruct_cmd(input_dir);
        } else if (c_generate->parsed()) {
            pipe.generate_cmd(caption, scale, count);
        } else if (c_eval->parsed()) {
            auto rep = pipe.eval_cmd();
            std::printf("%s\n", rep.to_json().dump(2).c_str());
        } else if (c_sweep_tok->parsed()) {
            auto rows = pipe.sweep_tokens_cmd();
            std::printf("%s\n", rows.dump(2).c_str());
        } else if (c_sweep_cfg->parsed()) {
            auto rows = pipe.sweep_cfg_cmd();
            std::printf("%s\n", rows.dump(2).c_str());
        } else if (c_plot->parsed()) {
            pipe.plot_cmd(report_path, plot_out);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "[config error] %s\n", e.what());
        return 6;
    } catch (const StageOrderError& e) {
        std::fprintf(stderr, "[stage error] %s\n", e.what());
        return 3;
    } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "[training failure] %s\n", e.what());
        return 4;
    } catch (const IntegrityError& e) {
        std::fprintf(stderr, "[integrity error] %s\n", e.what());
        return 5;
    } catch (const ContractViolation& e) {
        std::fprintf(stderr, "[contract violation] %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "[error] %s\n", e.what());
        return 1;
    }
    return 0;
}
