// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Commands behind the `dids` executable. Each command takes parsed arguments and a log stream
// and throws the library exceptions; the executable maps those to exit codes.
//
#pragma once

#include <dids/cascade/training.hpp>
#include <dids/eval/metrics.hpp>
#include <dids/geometry/synthetic.hpp>
#include <dids/geometry/voxelize.hpp>
#include <dids/sparse/svox_io.hpp>

#include <filesystem>
#include <optional>
#include <ostream>
#include <random>

namespace dids::cli {

enum ExitCode : int {
    kOk = 0,
    kInternalError = 1,
    kInputError = 2,
    kDegenerateLayout = 3,
    kNumericalError = 4,
};

inline std::uint64_t resolve_seed(std::optional<std::uint64_t> seed, std::ostream& log) {
    if (seed)
        return *seed;
    std::random_device rd;
    const std::uint64_t s = (std::uint64_t(rd()) << 32) ^ rd();
    log << "seed = " << s << " (random)\n";
    return s;
}

inline std::string extent_string(const GridExtent& e) {
    return std::to_string(e.h) + " " + std::to_string(e.w) + " " + std::to_string(e.l);
}

inline GridExtent extent_from(const std::vector<int>& v) {
    if (v.size() != 3)
        throw InputError("extent needs three integers");
    const GridExtent e{v[0], v[1], v[2]};
    if (!e.valid())
        throw InputError("extent must be positive");
    return e;
}

inline std::filesystem::path prepare_dir(const std::string& dir) {
    if (dir.empty())
        throw InputError("an output directory is required (--out)");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir))
        throw InputError("cannot create output directory " + dir);
    return dir;
}

/// Command-line overrides shared by the sampling commands.
struct Overrides {
    std::optional<std::string> fusion;
    std::optional<int> threads;
    std::optional<int> steps;
};

inline void apply(const Overrides& o, CascadeConfig& cfg) {
    if (o.fusion)
        cfg.fusion = parse_fusion_mode(*o.fusion);
    if (o.threads) {
        DIDS_CHECK(*o.threads >= 1, "--threads must be positive");
        cfg.threads = *o.threads;
    }
    if (o.steps) {
        DIDS_CHECK(*o.steps >= 1, "--steps must be positive");
        for (auto& s : cfg.stage)
            s.sampler.steps = *o.steps;
        cfg.refine.sampler.steps = *o.steps;
    }
}

/// TSDF1 files load as they are; SVOX1 files are placed on a grid at the origin with the configured
/// voxel size and must carry one channel of normalized TSDF values.
inline TsdfVolume load_volume(const std::string& path, const CascadeConfig& cfg) {
    const auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".tsdf")
        return load_tsdf(path);
    if (ext == ".svox") {
        const auto v = load_svox(path);
        if (v.channels() != 1)
            throw InputError(path + ": expected a single-channel volume");
        return tsdf_from_sparse(v, VoxelGrid{{0, 0, 0}, cfg.voxel_size, v.extent()}, cfg.truncation);
    }
    throw InputError("unsupported volume format: " + path);
}

// ---- synth ----

struct SynthArgs {
    std::uint64_t seed = 0;
    int count = 8;
    GridExtent extent{64, 64, 32};
    std::string out;
};

inline Manifest cmd_synth(const SynthArgs& a, const CascadeConfig& cfg, std::ostream& log) {
    const auto dir = prepare_dir(a.out);
    RoomOptions opt;
    opt.voxel_size = cfg.voxel_size;
    opt.truncation = cfg.truncation;
    const auto rooms = synthetic_rooms(a.seed, a.extent, a.count, opt);
    Manifest m{{"command", "synth"},
               {"seed", std::to_string(a.seed)},
               {"count", std::to_string(a.count)},
               {"extent", extent_string(a.extent)},
               {"voxel_size", std::to_string(cfg.voxel_size)},
               {"truncation", std::to_string(cfg.truncation)}};
    for (std::size_t r = 0; r < rooms.size(); ++r) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "room_%04zu", r);
        const auto tsdf = (dir / (std::string(stem) + ".tsdf")).string();
        const auto ply = (dir / (std::string(stem) + ".ply")).string();
        save_tsdf(tsdf, rooms[r].tsdf);
        save_mesh(rooms[r].mesh, ply);
        m[std::string("file.") + stem + ".tsdf"] = io::file_hash(tsdf);
        m[std::string("file.") + stem + ".ply"] = io::file_hash(ply);
        log << stem << ": " << rooms[r].tsdf.values.size() << " active voxels, " << rooms[r].mesh.triangles.size()
            << " triangles\n";
    }
    save_manifest((dir / "manifest.txt").string(), m);
    return m;
}

// ---- train ----

struct TrainArgs {
    std::string stage; // vq, 1, 2, 3 or refine
    std::string data;
    std::string out;
    std::string vq;     // frozen autoencoder, stages 1 to 3
    std::string resume; // checkpoint to continue from
    std::optional<long> iterations;
    std::uint64_t seed = 0;
};

namespace detail {

/// Runs `train(from, to)` in chunks that end on checkpoint boundaries and calls `save(step)`
/// after every chunk but the last.
template <typename Train, typename Save>
void run_chunks(long from, long to, long every, Train&& train, Save&& save) {
    for (long step = from; step < to;) {
        const long next = every > 0 ? std::min(to, (step / every + 1) * every) : to;
        train(step, next);
        step = next;
        if (every > 0 && step < to)
            save(step);
    }
}

inline Checkpoint load_kind(const std::string& path, const std::string& kind) {
    auto ck = load_checkpoint(path);
    if (ck.kind != kind)
        throw InputError(path + " is a " + ck.kind + " checkpoint, expected " + kind);
    return ck;
}

inline void check_spec(const DenoiserSpec& got, const DenoiserSpec& want, const std::string& path) {
    if (got.in_channels != want.in_channels || got.cond_channels != want.cond_channels)
        throw InputError(path + " does not match the configured channel counts");
}

/// Training crops of stages 1 to 3 must pass through the encoder and every denoiser level.
inline void check_training_crop(int stage, const CascadeConfig& cfg) {
    const GridExtent c = cfg.train.crop;
    const auto fits = [](const GridExtent& e, int levels) { return e.valid() && e.divisible_by(1 << levels); };
    bool ok = c.divisible_by(VqSpec::kStride1);
    if (ok && stage == 1)
        ok = fits(c.coarsened(VqSpec::kStride1), cfg.stage[0].denoiser.levels);
    if (ok && stage == 2)
        ok = fits(c.coarsened(VqSpec::kStride2), cfg.stage[1].denoiser.levels);
    if (ok && stage == 3)
        ok = fits(c, cfg.stage[2].denoiser.levels);
    if (!ok)
        throw InputError("training crop " + extent_string(c) + " does not fit the stage " + std::to_string(stage) +
                         " encoder and denoiser strides");
}

} // namespace detail

/// Trains one model and writes its checkpoint to `a.out`. Returns the final step count.
inline long cmd_train(const TrainArgs& a, const CascadeConfig& cfg, std::ostream& log) {
    const std::string& stage = a.stage;
    const bool is_vq = stage == "vq", is_refine = stage == "refine";
    const int s = stage == "1" ? 1 : stage == "2" ? 2 : stage == "3" ? 3 : 0;
    if (!is_vq && !is_refine && s == 0)
        throw InputError("invalid stage '" + stage + "' (expected vq, 1, 2, 3 or refine)");
    if (a.out.empty())
        throw InputError("an output checkpoint is required (--out)");
    if (s > 0 && a.vq.empty())
        throw InputError("stage " + stage + " needs a trained autoencoder (--vq)");
    if (s > 0 || is_vq)
        detail::check_training_crop(s, cfg);
    const long iterations = a.iterations.value_or(cfg.train.iterations);
    DIDS_CHECK(iterations >= 0, "iteration count must be non-negative");
    const auto data = load_tsdf_dir(a.data);
    const long every = cfg.train.checkpoint_every;
    std::optional<Checkpoint> resume;
    long step = 0;

    if (is_vq) {
        if (!a.resume.empty())
            resume = detail::load_kind(a.resume, "vq");
        Rng init(Rng::mix(a.seed ^ 0x1417));
        OccupancyAutoencoder<float> model = resume ? vq_from_checkpoint(*resume, cfg.vq) : OccupancyAutoencoder<float>(cfg.vq, init);
        Adam<float> opt(cfg.vq_adam), opt_disc(cfg.disc_adam);
        if (resume) {
            resume->restore_optimizer("adam", opt);
            resume->restore_optimizer("adam_disc", opt_disc);
            step = resume->step;
        }
        Rng rng(Rng::mix(a.seed ^ Rng::mix(std::uint64_t(step) + 0x7a11)));
        const auto save = [&](long at) {
            auto ck = vq_checkpoint(model, at, &opt, &opt_disc);
            ck.meta["seed"] = std::to_string(a.seed);
            save_checkpoint(a.out, ck);
        };
        const auto report = [&](long at, const VqLossReport& r) {
            log << "step " << at << " loss " << r.total << " bce_x " << r.bce_x << " l1 " << r.l1 << " iou " << r.iou_x
                << '\n';
        };
        detail::run_chunks(step, step + iterations, every,
                           [&](long from, long to) { train_vq(model, opt, opt_disc, data, cfg.train, rng, from, to, report); },
                           save);
        save(step + iterations);
        return step + iterations;
    }

    const StageConfig& st = is_refine ? cfg.refine : cfg.stage[std::size_t(s - 1)];
    const std::string kind = is_refine ? "refine" : "stage" + stage;
    std::optional<OccupancyAutoencoder<float>> vq;
    if (s > 0) {
        vq = vq_from_checkpoint(load_checkpoint(a.vq), cfg.vq);
        if (vq->spec().latent_dim != cfg.vq.latent_dim)
            throw InputError(a.vq + " has latent size " + std::to_string(vq->spec().latent_dim) + ", config has " +
                             std::to_string(cfg.vq.latent_dim));
    }
    if (!a.resume.empty()) {
        resume = detail::load_kind(a.resume, kind);
        check_schedule_meta(*resume, st.schedule, a.resume);
    }
    Rng init(Rng::mix(a.seed ^ 0x1417));
    Denoiser<float> model = resume ? denoiser_from_checkpoint(*resume) : Denoiser<float>(st.denoiser, init);
    detail::check_spec(model.spec(), st.denoiser, resume ? a.resume : std::string("config"));
    Adam<float> opt(st.adam);
    if (resume) {
        resume->restore_optimizer("adam", opt);
        step = resume->step;
    }
    Rng rng(Rng::mix(a.seed ^ Rng::mix(std::uint64_t(step) + 0x7a11)));
    const auto sched = st.schedule.make();
    const auto save = [&](long at) {
        auto ck = denoiser_checkpoint(kind, model, at, &opt);
        add_schedule_meta(ck, st.schedule);
        ck.meta["seed"] = std::to_string(a.seed);
        save_checkpoint(a.out, ck);
    };
    const TrainLog report = [&](long at, double loss) { log << "step " << at << " loss " << loss << '\n'; };
    detail::run_chunks(step, step + iterations, every,
                       [&](long from, long to) {
                           if (is_refine)
                               train_refine(model, opt, data, cfg.train, sched, cfg.tsdf_limit(), rng, from, to, report);
                           else
                               train_stage(s, model, opt, *vq, data, cfg.train, sched, rng, from, to, report);
                       },
                       save);
    save(step + iterations);
    return step + iterations;
}

// ---- generate ----

struct GenerateArgs {
    std::string vq;
    std::array<std::string, 3> stages;
    GridExtent extent{64, 64, 32};
    std::uint64_t seed = 0;
    std::string mask; // optional SVOX1 stage-1 mask at extent / 8
    std::string out;
};

inline void save_outputs(const std::filesystem::path& dir, const std::string& stem, const TsdfVolume& tsdf,
                         const TriangleMesh& mesh, Manifest& m, std::ostream& log) {
    const auto svox = (dir / (stem + ".svox")).string();
    const auto t = (dir / (stem + ".tsdf")).string();
    save_svox(svox, tsdf.values);
    save_tsdf(t, tsdf);
    m["file." + stem + ".svox"] = io::file_hash(svox);
    m["file." + stem + ".tsdf"] = io::file_hash(t);
    if (mesh.empty()) {
        log << "surface is empty, no mesh written\n";
        return;
    }
    const auto ply = (dir / (stem + ".ply")).string();
    save_mesh(mesh, ply);
    m["file." + stem + ".ply"] = io::file_hash(ply);
}

inline GeneratedScene cmd_generate(const GenerateArgs& a, const CascadeConfig& cfg, std::ostream& log) {
    check_scene_extent(a.extent, cfg);
    const auto dir = prepare_dir(a.out);
    const auto models = load_cascade_models(a.vq, a.stages, cfg);
    std::optional<OccupancyMask> mask;
    if (!a.mask.empty())
        mask = load_svox(a.mask).mask();
    Manifest m{{"command", "generate"},
               {"seed", std::to_string(a.seed)},
               {"extent", extent_string(a.extent)},
               {"fusion", to_string(cfg.fusion)},
               {"checkpoint.vq", models.hashes[0]}};
    for (std::size_t s = 0; s < 3; ++s) {
        m["checkpoint.stage" + std::to_string(s + 1)] = models.hashes[s + 1];
        m["sample_steps.stage" + std::to_string(s + 1)] = std::to_string(cfg.stage[s].sampler.steps);
    }
    if (mask)
        m["mask"] = io::file_hash(a.mask);
    const auto manifest = (dir / "manifest.txt").string();
    GeneratedScene g;
    try {
        g = generate_scene(models, cfg, a.extent, a.seed, mask ? &*mask : nullptr);
    } catch (const DegenerateLayout& e) {
        m["status"] = "degenerate-layout";
        save_manifest(manifest, m);
        throw;
    }
    save_svox((dir / "z1.svox").string(), g.stages.z1.volume);
    save_svox((dir / "z2.svox").string(), g.stages.z2.volume);
    m["file.z1.svox"] = io::file_hash((dir / "z1.svox").string());
    m["file.z2.svox"] = io::file_hash((dir / "z2.svox").string());
    save_outputs(dir, "scene", g.tsdf, g.mesh, m, log);
    m["status"] = "ok";
    m["voxels.z1"] = std::to_string(g.stages.mask_z1.size());
    m["voxels.z2"] = std::to_string(g.stages.mask_z2.size());
    m["voxels.x"] = std::to_string(g.stages.mask_x.size());
    save_manifest(manifest, m);
    log << "z1 " << g.stages.mask_z1.size() << " z2 " << g.stages.mask_z2.size() << " x " << g.stages.mask_x.size()
        << " voxels, " << g.mesh.triangles.size() << " triangles\n";
    return g;
}

// ---- refine ----

struct RefineArgs {
    std::string checkpoint;
    std::string occupancy; // TSDF1 or SVOX1; its active set is refined
    std::string condition; // optional TSDF1 or SVOX1 on the same voxels; empty for occupancy-only
    std::uint64_t seed = 0;
    std::string out;
};

inline RefineResult cmd_refine(const RefineArgs& a, const CascadeConfig& cfg, std::ostream& log) {
    const auto ck = detail::load_kind(a.checkpoint, "refine");
    check_schedule_meta(ck, cfg.refine.schedule, a.checkpoint);
    const auto model = std::make_shared<const Denoiser<float>>(denoiser_from_checkpoint(ck));
    detail::check_spec(model->spec(), cfg.refine.denoiser, a.checkpoint);
    const TsdfVolume occ = load_volume(a.occupancy, cfg);
    std::optional<TsdfVolume> cond;
    if (!a.condition.empty())
        cond = load_volume(a.condition, cfg);
    const auto dir = prepare_dir(a.out);

    RefineOptions opt;
    opt.crop = cfg.crop;
    opt.overlap = cfg.overlap;
    opt.fusion = {cfg.fusion, cfg.threads};
    opt.sampler = cfg.refine.sampler;
    opt.truncation = cfg.truncation;
    const auto r = refine_from_occupancy(occ.values.mask(), cond ? &cond->values : nullptr, model->predictor(),
                                         cfg.refine.schedule.make(), occ.grid, opt, a.seed);
    Manifest m{{"command", "refine"},
               {"seed", std::to_string(a.seed)},
               {"fusion", to_string(cfg.fusion)},
               {"mode", cond ? "conditioned" : "occupancy-only"},
               {"sample_steps", std::to_string(opt.sampler.steps)},
               {"checkpoint.refine", io::file_hash(a.checkpoint)},
               {"input.occupancy", io::file_hash(a.occupancy)},
               {"extent", extent_string(occ.grid.extent)}};
    if (cond)
        m["input.condition"] = io::file_hash(a.condition);
    save_outputs(dir, "refined", r.tsdf, r.mesh, m, log);
    save_manifest((dir / "manifest.txt").string(), m);
    log << "refined " << occ.values.size() << " voxels, " << r.mesh.triangles.size() << " triangles\n";
    return r;
}

// ---- convert ----

struct ConvertArgs {
    std::string in, out;
};

/// Mesh (.ply/.obj) to volume (.tsdf/.svox), or volume to mesh or to the other volume format.
inline void cmd_convert(const ConvertArgs& a, const CascadeConfig& cfg, std::ostream& log) {
    namespace fs = std::filesystem;
    const auto in_ext = fs::path(a.in).extension().string();
    const auto out_ext = fs::path(a.out).extension().string();
    const auto is_mesh = [](const std::string& e) { return e == ".ply" || e == ".obj"; };
    if (is_mesh(in_ext)) {
        if (out_ext != ".tsdf" && out_ext != ".svox")
            throw InputError("a mesh converts to .tsdf or .svox");
        const auto mesh = load_mesh(a.in);
        DIDS_CHECK(!mesh.empty(), "input mesh is empty");
        Vec3 lo = mesh.vertices.front(), hi = lo;
        for (const auto& v : mesh.vertices) {
            lo = min3(lo, v);
            hi = max3(hi, v);
        }
        const int pad = int(std::ceil(cfg.truncation / cfg.voxel_size)) + 1;
        const auto cells = [&](double span) { return int(std::ceil(span / cfg.voxel_size)) + 2 * pad; };
        const VoxelGrid grid{lo - Vec3{1, 1, 1} * (pad * cfg.voxel_size), cfg.voxel_size,
                             {cells(hi.x - lo.x), cells(hi.y - lo.y), cells(hi.z - lo.z)}};
        const auto tsdf = truncate_and_normalize(voxelize_to_sdf(mesh, grid, 2 * cfg.truncation), grid, cfg.truncation);
        if (out_ext == ".tsdf")
            save_tsdf(a.out, tsdf);
        else
            save_svox(a.out, tsdf.values);
        log << "voxelized to " << extent_string(grid.extent) << ", " << tsdf.values.size() << " active voxels\n";
        return;
    }
    const auto tsdf = load_volume(a.in, cfg);
    if (is_mesh(out_ext)) {
        const auto mesh = marching_cubes(tsdf);
        save_mesh(mesh, a.out);
        log << mesh.triangles.size() << " triangles\n";
    } else if (out_ext == ".tsdf") {
        save_tsdf(a.out, tsdf);
    } else if (out_ext == ".svox") {
        save_svox(a.out, tsdf.values);
    } else {
        throw InputError("unsupported output format: " + a.out);
    }
}

// ---- eval ----

struct EvalArgs {
    std::string pred, gt;
    std::size_t samples = 100000;
    std::uint64_t seed = 0;
    std::string out; // optional report file
};

/// Mesh quality of `pred`, plus normal errors against `gt` when given.
inline KeyValues cmd_eval(const EvalArgs& a, std::ostream& log) {
    const auto pred = load_mesh(a.pred);
    const auto q = mesh_quality_summary(pred);
    print_quality(log, q);
    KeyValues kv = to_key_values(q);
    if (!a.gt.empty()) {
        const auto r = normal_error(pred, load_mesh(a.gt), a.samples, {90.0, 45.0, 30.0}, a.seed);
        print_normals(log, r);
        kv.merge(to_key_values(r));
    }
    if (!a.out.empty()) {
        auto os = io::open_out(a.out);
        write_key_values(os, kv);
        os << "seed = " << a.seed << '\n';
        if (!os)
            throw InputError("failed writing report: " + a.out);
    }
    return kv;
}

} // namespace dids::cli
