// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// dids: dataset synthesis, training, generation, refinement, conversion and evaluation.
//
// Exit codes: 0 success, 2 invalid input, 3 degenerate layout, 4 numerical failure, 1 other.
//
#include <dids/cli/commands.hpp>

#include "CLI11.hpp"

#include <iostream>

namespace {

using namespace dids;
using namespace dids::cli;

int guarded(const std::function<void()>& fn) {
    try {
        fn();
        return kOk;
    } catch (const DegenerateLayout& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kDegenerateLayout;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumericalError;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternalError;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse latent diffusion for indoor 3D scenes"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    Overrides ov;
    std::string out;
    app.add_option("--config", config_path, "configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "random seed (default: random, echoed in the log)");
    app.add_option("--fusion", ov.fusion, "crop fusion: stochastic, average or independent")
        ->check(CLI::IsMember({"stochastic", "average", "independent"}));
    app.add_option("--threads", ov.threads, "worker threads for crop fusion")->check(CLI::PositiveNumber);
    app.add_option("--steps", ov.steps, "sampling steps (generate, refine) or iterations (train)")
        ->check(CLI::PositiveNumber);
    app.add_option("--out", out, "output directory, or checkpoint file for train");

    SynthArgs synth;
    std::vector<int> synth_extent{64, 64, 32};
    auto* c_synth = app.add_subcommand("synth", "write synthetic rooms as TSDF1 + PLY pairs");
    c_synth->add_option("--count", synth.count, "number of rooms")->check(CLI::NonNegativeNumber);
    c_synth->add_option("--extent", synth_extent, "room extent in voxels (H W L)")->expected(3);

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "train one model");
    c_train->add_option("--stage", train.stage, "vq, 1, 2, 3 or refine")->required();
    c_train->add_option("--data", train.data, "directory of .tsdf training scenes")->required();
    c_train->add_option("--vq", train.vq, "autoencoder checkpoint (stages 1 to 3)");
    c_train->add_option("--resume", train.resume, "checkpoint to continue from")->check(CLI::ExistingFile);

    GenerateArgs gen;
    std::vector<int> gen_extent{64, 64, 32};
    auto* c_gen = app.add_subcommand("generate", "generate a scene with the three-stage cascade");
    c_gen->add_option("--vq", gen.vq, "autoencoder checkpoint")->required()->check(CLI::ExistingFile);
    c_gen->add_option("--stage1", gen.stages[0], "stage 1 checkpoint")->required()->check(CLI::ExistingFile);
    c_gen->add_option("--stage2", gen.stages[1], "stage 2 checkpoint")->required()->check(CLI::ExistingFile);
    c_gen->add_option("--stage3", gen.stages[2], "stage 3 checkpoint")->required()->check(CLI::ExistingFile);
    c_gen->add_option("--extent", gen_extent, "scene extent in voxels (H W L)")->expected(3);
    c_gen->add_option("--mask", gen.mask, "SVOX1 stage 1 mask at extent / 8")->check(CLI::ExistingFile);

    RefineArgs ref;
    auto* c_ref = app.add_subcommand("refine", "refine a scene on a given occupancy");
    c_ref->add_option("--checkpoint", ref.checkpoint, "refinement checkpoint")->required()->check(CLI::ExistingFile);
    c_ref->add_option("--occupancy", ref.occupancy, "TSDF1 or SVOX1 volume whose active voxels are refined")
        ->required()
        ->check(CLI::ExistingFile);
    c_ref->add_option("--condition", ref.condition, "TSDF1 or SVOX1 coarse TSDF on the same voxels")
        ->check(CLI::ExistingFile);

    ConvertArgs conv;
    auto* c_conv = app.add_subcommand("convert", "convert between meshes and TSDF volumes");
    c_conv->add_option("input", conv.in, "input .ply/.obj/.tsdf/.svox")->required()->check(CLI::ExistingFile);
    c_conv->add_option("output", conv.out, "output .ply/.obj/.tsdf/.svox")->required();

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "mesh quality and normal-error report");
    c_eval->add_option("--pred", ev.pred, "predicted mesh")->required()->check(CLI::ExistingFile);
    c_eval->add_option("--gt", ev.gt, "ground-truth mesh")->check(CLI::ExistingFile);
    c_eval->add_option("--samples", ev.samples, "surface samples for normal errors")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kInputError;
    }

    return guarded([&] {
        CascadeConfig cfg = config_path.empty() ? CascadeConfig{} : load_cascade_config(config_path);
        auto& log = std::cout;
        if (*c_synth) {
            synth.seed = resolve_seed(seed, log);
            synth.extent = extent_from(synth_extent);
            synth.out = out;
            cmd_synth(synth, cfg, log);
        } else if (*c_train) {
            train.seed = resolve_seed(seed, log);
            train.out = out;
            if (ov.steps)
                train.iterations = *ov.steps;
            const long step = cmd_train(train, cfg, log);
            log << "trained to step " << step << '\n';
        } else if (*c_gen) {
            apply(ov, cfg);
            gen.seed = resolve_seed(seed, log);
            gen.extent = extent_from(gen_extent);
            gen.out = out;
            cmd_generate(gen, cfg, log);
        } else if (*c_ref) {
            apply(ov, cfg);
            ref.seed = resolve_seed(seed, log);
            ref.out = out;
            cmd_refine(ref, cfg, log);
        } else if (*c_conv) {
            cmd_convert(conv, cfg, log);
        } else if (*c_eval) {
            ev.seed = resolve_seed(seed, log);
            ev.out = out;
            cmd_eval(ev, log);
        }
    });
}
