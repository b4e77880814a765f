// Joint optimization of the field network, the embedding network, per-vertex
// latent codes, and per-frame poses against a monocular frame sequence.
//
// One logical loop owns the parameter store. Within a step, ray chunks fan
// out to workers with private tapes and private gradient buffers; buffers are
// merged in worker order, so a run is bitwise reproducible for a fixed
// configuration.
#pragma once

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "mgnerf/autodiff.hpp"
#include "mgnerf/embedding.hpp"
#include "mgnerf/errors.hpp"
#include "mgnerf/field.hpp"
#include "mgnerf/metrics.hpp"
#include "mgnerf/render.hpp"
#include "mgnerf/rig.hpp"
#include "mgnerf/synth.hpp"

namespace mgnerf {

// ---------------------------------------------------------------------------
// Experiment configuration (the single JSON schema all commands share).

struct ExperimentConfig {
    uint64_t seed = 1;
    std::string dataset;
    std::string out_dir;
    int iterations = 8000;
    int rays_per_batch = 256;
    int workers = 8;
    int ray_chunk = 8;
    double lr_field = 1e-4;  // field, embedding network, latent codes
    double lr_pose = 5e-4;
    double lambda_pose = 2.0;
    double bbox_pad = 1.2;
    double bbox_prob = 0.7;
    int n_coarse = 16;
    int n_fine = 16;
    double ray_pad = 0.04;
    bool optimize_poses = true;
    int probe_every = 500;
    int checkpoint_every = 2000;
    EmbeddingConfig embedding;
    int field_width = 256;
    int field_depth = 8;
    int field_skip = 4;

    FieldConfig field_config() const {
        FieldConfig f;
        f.input_dim = embedding.psi_width;
        f.width = field_width;
        f.depth = field_depth;
        f.skip_layer = field_skip;
        return f;
    }

    RenderParams render_params() const {
        RenderParams rp;
        rp.n_coarse = n_coarse;
        rp.n_fine = n_fine;
        rp.ray_pad = ray_pad;
        return rp;
    }

    void validate() const {
        if (iterations < 0 || rays_per_batch < 1 || workers < 1 || ray_chunk < 1)
            throw ConfigError("config: invalid batch/worker settings");
        if (lr_field < 0 || lr_pose < 0 || lambda_pose < 0)
            throw ConfigError("config: negative rate or weight");
        if (bbox_prob < 0.0 || bbox_prob > 1.0)
            throw ConfigError("config: bbox_prob must be in [0,1]");
        if (bbox_pad <= 0.0) throw ConfigError("config: bbox_pad must be positive");
        if (n_coarse < 2 || n_fine < 1) throw ConfigError("config: need n_coarse >= 2, n_fine >= 1");
        if (probe_every < 1 || checkpoint_every < 1)
            throw ConfigError("config: probe/checkpoint intervals must be >= 1");
        embedding.validate();
        field_config().validate();
    }
};

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    return {{"seed", c.seed},
            {"dataset", c.dataset},
            {"out_dir", c.out_dir},
            {"iterations", c.iterations},
            {"rays_per_batch", c.rays_per_batch},
            {"workers", c.workers},
            {"ray_chunk", c.ray_chunk},
            {"lr_field", c.lr_field},
            {"lr_pose", c.lr_pose},
            {"lambda_pose", c.lambda_pose},
            {"bbox_pad", c.bbox_pad},
            {"bbox_prob", c.bbox_prob},
            {"n_coarse", c.n_coarse},
            {"n_fine", c.n_fine},
            {"ray_pad", c.ray_pad},
            {"optimize_poses", c.optimize_poses},
            {"probe_every", c.probe_every},
            {"checkpoint_every", c.checkpoint_every},
            {"embedding", embedding_config_to_json(c.embedding)},
            {"field", {{"width", c.field_width}, {"depth", c.field_depth}, {"skip_layer", c.field_skip}}}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "seed",        "dataset",      "out_dir",       "iterations",       "rays_per_batch",
        "workers",     "ray_chunk",    "lr_field",      "lr_pose",          "lambda_pose",
        "bbox_pad",    "bbox_prob",    "n_coarse",      "n_fine",           "ray_pad",
        "optimize_poses", "probe_every", "checkpoint_every", "embedding",   "field"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw DataError("config: unknown key '" + it.key() + "'");
    }
    ExperimentConfig c;
    try {
        if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
        if (j.contains("dataset")) c.dataset = j["dataset"].get<std::string>();
        if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
        if (j.contains("iterations")) c.iterations = j["iterations"].get<int>();
        if (j.contains("rays_per_batch")) c.rays_per_batch = j["rays_per_batch"].get<int>();
        if (j.contains("workers")) c.workers = j["workers"].get<int>();
        if (j.contains("ray_chunk")) c.ray_chunk = j["ray_chunk"].get<int>();
        if (j.contains("lr_field")) c.lr_field = j["lr_field"].get<double>();
        if (j.contains("lr_pose")) c.lr_pose = j["lr_pose"].get<double>();
        if (j.contains("lambda_pose")) c.lambda_pose = j["lambda_pose"].get<double>();
        if (j.contains("bbox_pad")) c.bbox_pad = j["bbox_pad"].get<double>();
        if (j.contains("bbox_prob")) c.bbox_prob = j["bbox_prob"].get<double>();
        if (j.contains("n_coarse")) c.n_coarse = j["n_coarse"].get<int>();
        if (j.contains("n_fine")) c.n_fine = j["n_fine"].get<int>();
        if (j.contains("ray_pad")) c.ray_pad = j["ray_pad"].get<double>();
        if (j.contains("optimize_poses")) c.optimize_poses = j["optimize_poses"].get<bool>();
        if (j.contains("probe_every")) c.probe_every = j["probe_every"].get<int>();
        if (j.contains("checkpoint_every")) c.checkpoint_every = j["checkpoint_every"].get<int>();
        if (j.contains("embedding")) c.embedding = embedding_config_from_json(j["embedding"]);
        if (j.contains("field")) {
            const auto& f = j["field"];
            for (auto it = f.begin(); it != f.end(); ++it)
                if (it.key() != "width" && it.key() != "depth" && it.key() != "skip_layer")
                    throw DataError("config: unknown field key '" + it.key() + "'");
            if (f.contains("width")) c.field_width = f["width"].get<int>();
            if (f.contains("depth")) c.field_depth = f["depth"].get<int>();
            if (f.contains("skip_layer")) c.field_skip = f["skip_layer"].get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("config: ") + e.what());
    }
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw DataError(e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Dataset.

struct Frame {
    Image image;  // rgb
    Image mask;   // 1 channel
    Pose initial_pose;
    std::vector<std::pair<double, double>> keypoints;  // projected joints (pixels)
};

struct Dataset {
    Rig rig;
    Camera camera;
    std::vector<Frame> frames;
    std::vector<Pose> gt_poses;  // known for synthetic sequences

    static Dataset from_sequence(SynthSequence seq) {
        Dataset d;
        d.rig = std::move(seq.rig);
        d.camera = seq.camera;
        d.gt_poses = seq.gt_poses;
        for (size_t i = 0; i < seq.images.size(); ++i) {
            Frame f;
            f.image = std::move(seq.images[i]);
            f.mask = std::move(seq.masks[i]);
            f.initial_pose = seq.init_poses[i];
            PartTransforms g = forward_kinematics(d.rig.skeleton, f.initial_pose);
            for (int jidx = 0; jidx < d.rig.skeleton.part_count(); ++jidx) {
                Vec3d p = joint_world_position(d.rig.skeleton, g, jidx);
                double u, v;
                if (d.camera.project(p, u, v)) f.keypoints.push_back({u, v});
            }
            d.frames.push_back(std::move(f));
        }
        return d;
    }

    static Dataset load(const std::string& dir) { return from_sequence(load_sequence(dir)); }
};

// ---------------------------------------------------------------------------
// Loss terms (public ops).

inline double photometric_loss(const std::vector<Vec3d>& rendered,
                               const std::vector<Vec3d>& target) {
    if (rendered.size() != target.size())
        throw ArgumentError("photometric_loss: length mismatch");
    double loss = 0.0;
    for (size_t i = 0; i < rendered.size(); ++i) loss += norm2(rendered[i] - target[i]);
    return loss;
}

inline double pose_regularizer(const std::vector<Pose>& poses, const std::vector<Pose>& initial,
                               double lambda_pose) {
    if (poses.size() != initial.size()) throw ArgumentError("pose_regularizer: length mismatch");
    double reg = 0.0;
    for (size_t i = 0; i < poses.size(); ++i) {
        if (poses[i].size() != initial[i].size())
            throw ArgumentError("pose_regularizer: pose length mismatch");
        for (size_t jidx = 0; jidx < poses[i].size(); ++jidx)
            reg += norm2(poses[i].joint_rotations[jidx] - initial[i].joint_rotations[jidx]);
        reg += norm2(poses[i].root_translation - initial[i].root_translation);
    }
    return lambda_pose * reg;
}

// Mean geodesic angle between corresponding joint rotations, over all frames.
inline double mean_joint_angle_error(const std::vector<Pose>& a, const std::vector<Pose>& b) {
    if (a.size() != b.size()) throw ArgumentError("mean_joint_angle_error: length mismatch");
    double sum = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t jidx = 0; jidx < a[i].size(); ++jidx) {
            sum += rotation_angle_between(rotation_from_axis_angle(a[i].joint_rotations[jidx]),
                                          rotation_from_axis_angle(b[i].joint_rotations[jidx]));
            ++n;
        }
    return n ? sum / double(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Training-ray sampling: within the padded keypoint bounding box with
// probability bbox_prob, uniform over the whole image otherwise. A degenerate
// box falls back to all-uniform.
inline std::vector<int> sample_training_rays(const Frame& frame, const Camera& cam,
                                             double bbox_pad, double bbox_prob, int n, Rng& rng) {
    int x0 = 0, y0 = 0, x1 = cam.width - 1, y1 = cam.height - 1;
    bool have_box = false;
    if (!frame.keypoints.empty()) {
        double lo_u = 1e30, hi_u = -1e30, lo_v = 1e30, hi_v = -1e30;
        for (auto [u, v] : frame.keypoints) {
            lo_u = std::min(lo_u, u);
            hi_u = std::max(hi_u, u);
            lo_v = std::min(lo_v, v);
            hi_v = std::max(hi_v, v);
        }
        double cu = 0.5 * (lo_u + hi_u), cv = 0.5 * (lo_v + hi_v);
        double hu = 0.5 * (hi_u - lo_u) * bbox_pad, hv = 0.5 * (hi_v - lo_v) * bbox_pad;
        x0 = std::max(0, int(std::floor(cu - hu)));
        x1 = std::min(cam.width - 1, int(std::ceil(cu + hu)));
        y0 = std::max(0, int(std::floor(cv - hv)));
        y1 = std::min(cam.height - 1, int(std::ceil(cv + hv)));
        have_box = x1 >= x0 && y1 >= y0 && (x1 > x0 || y1 > y0);
    }
    std::vector<int> pixels;
    pixels.reserve(size_t(n));
    const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
    for (int i = 0; i < n; ++i) {
        if (have_box && rng.uniform() < bbox_prob) {
            int x = x0 + int(rng.below(uint64_t(bw)));
            int y = y0 + int(rng.below(uint64_t(bh)));
            pixels.push_back(y * cam.width + x);
        } else {
            pixels.push_back(int(rng.below(uint64_t(cam.width) * uint64_t(cam.height))));
        }
    }
    return pixels;
}

// ---------------------------------------------------------------------------
// Checkpoints (ckpt_v1): 8-byte magic, little-endian u64 header length, JSON
// header, then every parameter array and its Adam moments as little-endian
// 64-bit floats in declaration order.

constexpr char kCheckpointMagic[8] = {'c', 'k', 'p', 't', '_', 'v', '1', '\n'};

struct CheckpointHeader {
    int64_t iteration = 0;
    nlohmann::json config;
    std::vector<std::pair<std::string, size_t>> arrays;
};

template <class R>
void save_checkpoint_file(const std::string& path, const ParamStore<R>& store,
                          const nlohmann::json& config) {
    nlohmann::json header;
    header["version"] = "ckpt_v1";
    header["iteration"] = store.step;
    header["config"] = config;
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& a : store.arrays) arrays.push_back({{"name", a.name}, {"size", a.w.size()}});
    header["arrays"] = arrays;
    std::string hs = header.dump();

    std::string tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot open for writing: " + path);
    out.write(kCheckpointMagic, 8);
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), std::streamsize(hs.size()));
    auto write_array = [&](const std::vector<R>& v) {
        std::vector<double> tmp64(v.begin(), v.end());
        out.write(reinterpret_cast<const char*>(tmp64.data()), std::streamsize(tmp64.size() * 8));
    };
    for (const auto& a : store.arrays) {
        write_array(a.w);
        write_array(a.m);
        write_array(a.v);
    }
    out.close();
    if (!out) throw DataError("checkpoint: write failed: " + path);
    std::filesystem::rename(tmp, path);
}

inline CheckpointHeader read_checkpoint_header(std::ifstream& in, const std::string& path) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("checkpoint: bad magic or version (expected ckpt_v1): " + path);
    uint64_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), 8) || hlen > (1ull << 30))
        throw DataError("checkpoint: corrupt header length: " + path);
    std::string hs(hlen, '\0');
    if (!in.read(hs.data(), std::streamsize(hlen)))
        throw DataError("checkpoint: truncated header: " + path);
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: malformed header JSON: ") + e.what());
    }
    if (!h.contains("version") || h["version"] != "ckpt_v1")
        throw DataError("checkpoint: version mismatch (expected ckpt_v1)");
    CheckpointHeader out;
    out.iteration = h.at("iteration").get<int64_t>();
    out.config = h.at("config");
    for (const auto& a : h.at("arrays"))
        out.arrays.push_back({a.at("name").get<std::string>(), a.at("size").get<size_t>()});
    return out;
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open: " + path);
    return read_checkpoint_header(in, path);
}

// Loads array payloads into an existing store whose layout must match.
template <class R>
CheckpointHeader load_checkpoint_file(const std::string& path, ParamStore<R>& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open: " + path);
    CheckpointHeader header = read_checkpoint_header(in, path);
    if (header.arrays.size() != store.arrays.size())
        throw DataError("checkpoint: array count does not match this configuration");
    for (size_t a = 0; a < store.arrays.size(); ++a) {
        if (header.arrays[a].first != store.arrays[a].name ||
            header.arrays[a].second != store.arrays[a].w.size())
            throw DataError("checkpoint: array layout mismatch at '" + store.arrays[a].name + "'");
    }
    // Read everything before mutating the store: a truncated file must not
    // leave partial state behind.
    std::vector<std::vector<double>> payload;
    payload.reserve(store.arrays.size() * 3);
    for (size_t a = 0; a < store.arrays.size(); ++a) {
        for (int part = 0; part < 3; ++part) {
            std::vector<double> buf(store.arrays[a].w.size());
            if (!in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 8)))
                throw DataError("checkpoint: truncated payload: " + path);
            payload.push_back(std::move(buf));
        }
    }
    size_t idx = 0;
    for (auto& arr : store.arrays) {
        auto assign = [&](std::vector<R>& dst) {
            const auto& src = payload[idx++];
            for (size_t i = 0; i < dst.size(); ++i) dst[i] = R(src[i]);
        };
        assign(arr.w);
        assign(arr.m);
        assign(arr.v);
    }
    store.step = header.iteration;
    return header;
}

// ---------------------------------------------------------------------------
// The trainer.

struct StepLog {
    int64_t iter = 0;
    int frame = 0;
    double loss = 0, photo = 0, reg = 0, pose_drift = 0, psnr_probe = 0;
};

class TrainLogCsv {
public:
    void open(const std::string& path) {
        out_.open(path, std::ios::binary);
        if (!out_) throw DataError("train log: cannot open " + path);
        out_ << "iter,loss,photo,reg,pose_drift,psnr_probe\n";
    }
    void row(const StepLog& s) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.8g,%.8g,%.8g,%.4f\n",
                      (long long)s.iter, s.loss, s.photo, s.reg, s.pose_drift, s.psnr_probe);
        out_ << buf;
    }
    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

template <class R>
class Trainer {
public:
    Trainer(const Dataset& data, const ExperimentConfig& cfg) : data_(&data), cfg_(cfg) {
        cfg_.validate();
        if (data.frames.empty()) throw ArgumentError("trainer: dataset has no frames");
        if (data.rig.mesh.latent_dim != cfg.embedding.latent_dim)
            throw ConfigError("trainer: rig latent_dim does not match embedding config");
        fcfg_ = cfg_.field_config();

        psi_a_ = store_.add_array(
            "psi", init_mlp<R>(cfg_.embedding.psi_shape(), derive_seed(cfg_.seed, 0x707369)));
        field_a_ = store_.add_array("field", init_field<R>(derive_seed(cfg_.seed, 0x6669656c64), fcfg_));
        std::vector<R> lat(data.rig.mesh.latents.begin(), data.rig.mesh.latents.end());
        latent_a_ = store_.add_array("latents", std::move(lat));
        for (size_t f = 0; f < data.frames.size(); ++f) {
            char name[32];
            std::snprintf(name, sizeof(name), "pose_%04zu", f);
            auto flat = data.frames[f].initial_pose.to_flat();
            pose_a_.push_back(store_.add_array(name, std::vector<R>(flat.begin(), flat.end())));
        }

        lrs_.assign(store_.arrays.size(), cfg_.lr_field);
        for (int a : pose_a_) lrs_[size_t(a)] = cfg_.optimize_poses ? cfg_.lr_pose : 0.0;

        grads_.init_like(store_);
        worker_grads_.resize(size_t(cfg_.workers));
        for (auto& g : worker_grads_) g.init_like(store_);
        posed_cache_.resize(data.frames.size());
        posed_cache_key_.resize(data.frames.size());
    }

    ParamStore<R>& params() { return store_; }
    const ParamStore<R>& params() const { return store_; }
    const ExperimentConfig& config() const { return cfg_; }
    const FieldConfig& field_config() const { return fcfg_; }
    int64_t iteration() const { return store_.step; }

    Pose current_pose(int frame) const {
        const auto& w = store_.arrays[size_t(pose_a_[size_t(frame)])].w;
        std::vector<double> flat(w.begin(), w.end());
        return Pose::from_flat(flat.begin(), data_->rig.skeleton.joints.size());
    }

    struct BatchPlan {
        int64_t iter = 0;
        int frame = 0;
        std::vector<int> pixels;
    };

    BatchPlan plan_batch(int64_t iter) const {
        BatchPlan plan;
        plan.iter = iter;
        plan.frame = int(iter % int64_t(data_->frames.size()));
        Rng rng(derive_seed(cfg_.seed, 0x70697863, uint64_t(iter)));
        plan.pixels = sample_training_rays(data_->frames[size_t(plan.frame)], data_->camera,
                                           cfg_.bbox_pad, cfg_.bbox_prob, cfg_.rays_per_batch, rng);
        return plan;
    }

    // Photometric + regularizer at the current parameters, plain evaluation.
    // Pure in the store contents; used by the finite-difference audit.
    double loss_only(const BatchPlan& plan) {
        Pose pose = current_pose(plan.frame);
        PosedMesh mesh = PosedMesh::build(data_->rig.mesh, data_->rig.skeleton, pose);
        PlainCtx<R> ctx = plain_ctx();
        DiffBody<R> body(data_->rig.mesh, lift_part_transforms<R>(mesh.part_transforms));
        auto rays = make_rays(plan);
        auto res = render_rays(ctx, body, mesh, cfg_.render_params(), rays);
        double photo = 0.0;
        const Frame& frame = data_->frames[size_t(plan.frame)];
        for (size_t i = 0; i < res.size(); ++i) {
            Vec3d target = pixel_color(frame, plan.pixels[i]);
            Vec3d diff{value_of(res[i].color.x) - target.x, value_of(res[i].color.y) - target.y,
                       value_of(res[i].color.z) - target.z};
            photo += dot(diff, diff);
        }
        return photo + regularizer_value(plan.frame);
    }

    // Tape evaluation: fills `grads` (which must be init_like the store) and
    // returns the loss components.
    std::pair<double, double> loss_and_grad(const BatchPlan& plan, GradBuffers<R>& grads) {
        const PosedMesh& mesh = posed(plan.frame);
        const Frame& frame = data_->frames[size_t(plan.frame)];
        const int n_rays = int(plan.pixels.size());
        const int n_chunks = (n_rays + cfg_.ray_chunk - 1) / cfg_.ray_chunk;
        const int workers = std::min(cfg_.workers, std::max(1, n_chunks));

        std::vector<double> worker_photo(size_t(workers), 0.0);
        std::vector<std::vector<int>> worker_bad(static_cast<size_t>(workers));
        auto rays = make_rays(plan);

        auto run_worker = [&](int w) {
            GradBuffers<R>& sink = worker_grads_[size_t(w)];
            for (int c = w; c < n_chunks; c += workers) {
                Tape<R> tape;
                TapeCtx<R> ctx{&cfg_.embedding, &fcfg_, &tape, &store_,
                               psi_a_,          field_a_, latent_a_};
                auto parts = tape_parts(tape, plan.frame);
                DiffBody<Var<R>> body(data_->rig.mesh, std::move(parts));
                const int begin = c * cfg_.ray_chunk;
                const int end = std::min(n_rays, begin + cfg_.ray_chunk);
                std::vector<RaySpec> chunk(rays.begin() + begin, rays.begin() + end);
                auto res = render_rays(ctx, body, mesh, cfg_.render_params(), chunk);
                Var<R> loss = 0.0;
                for (int i = begin; i < end; ++i) {
                    const auto& rr = res[size_t(i - begin)];
                    Vec3d target = pixel_color(frame, plan.pixels[size_t(i)]);
                    auto dx = rr.color.x - target.x;
                    auto dy = rr.color.y - target.y;
                    auto dz = rr.color.z - target.z;
                    loss += dx * dx + dy * dy + dz * dz;
                    if (!std::isfinite(value_of(rr.color.x)) || !std::isfinite(value_of(rr.color.y)) ||
                        !std::isfinite(value_of(rr.color.z)) || !std::isfinite(value_of(rr.alpha)))
                        worker_bad[size_t(w)].push_back(i);
                }
                worker_photo[size_t(w)] += value_of(loss);
                tape.backward(loss, sink);
            }
        };

        for (auto& g : worker_grads_) g.zero();
        if (workers == 1) {
            run_worker(0);
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < workers; ++w) pool.emplace_back(run_worker, w);
            for (auto& t : pool) t.join();
        }

        double photo = 0.0;
        std::vector<int> bad;
        for (int w = 0; w < workers; ++w) {
            photo += worker_photo[size_t(w)];
            bad.insert(bad.end(), worker_bad[size_t(w)].begin(), worker_bad[size_t(w)].end());
        }
        for (int w = 0; w < workers; ++w) grads.merge(worker_grads_[size_t(w)]);

        // Pose regularizer: gradient added in closed form, 2*lambda*(theta - theta0).
        double reg = regularizer_value(plan.frame);
        {
            const auto& w = store_.arrays[size_t(pose_a_[size_t(plan.frame)])].w;
            auto flat0 = frame.initial_pose.to_flat();
            R* g = grads.data(pose_a_[size_t(plan.frame)]);
            for (size_t i = 0; i < w.size(); ++i)
                g[i] += R(2.0 * cfg_.lambda_pose) * (w[i] - R(flat0[i]));
        }

        if (!std::isfinite(photo) || !std::isfinite(reg) || !bad.empty()) {
            std::string rays_str;
            for (size_t i = 0; i < bad.size() && i < 8; ++i)
                rays_str += (i ? "," : "") + std::to_string(bad[i]);
            throw NumericalError("train_step: non-finite loss at iteration " +
                                 std::to_string(plan.iter) + ", frame " +
                                 std::to_string(plan.frame) + ", rays [" + rays_str + "]");
        }
        return {photo, reg};
    }

    StepLog train_step() {
        const int64_t iter = store_.step;
        BatchPlan plan = plan_batch(iter);
        grads_.zero();
        auto [photo, reg] = loss_and_grad(plan, grads_);
        // Only the visited frame's pose takes an optimizer step; the other
        // pose arrays must not coast on stale momentum between visits.
        std::vector<bool> active(store_.arrays.size(), true);
        for (size_t f = 0; f < pose_a_.size(); ++f)
            active[size_t(pose_a_[f])] = int(f) == plan.frame;
        adam_step(store_, grads_, lrs_, {}, active);

        StepLog log;
        log.iter = iter;
        log.frame = plan.frame;
        log.photo = photo;
        log.reg = reg;
        log.loss = photo + reg;
        log.pose_drift = pose_drift();
        if ((iter + 1) % cfg_.probe_every == 0 || iter + 1 == cfg_.iterations)
            last_probe_ = render_probe(0);
        log.psnr_probe = last_probe_;
        return log;
    }

    // Full render of a training frame at its current pose; PSNR against the
    // stored ground-truth image. Uses the same rng streams as the render
    // command so the two agree.
    double render_probe(int frame) {
        Image img = render_frame_rgba(current_pose(frame), probe_stream(frame));
        Image rgb(img.width, img.height, 3);
        for (size_t p = 0; p < rgb.pixel_count(); ++p)
            for (int c = 0; c < 3; ++c) rgb.data[p * 3 + c] = img.data[p * 4 + c];
        return psnr(rgb, data_->frames[size_t(frame)].image);
    }

    uint64_t probe_stream(int frame) const {
        return derive_seed(cfg_.seed, 0x52454e44, uint64_t(frame));
    }

    Image render_frame_rgba(const Pose& pose, uint64_t stream, int n_coarse = -1, int n_fine = -1) {
        PosedMesh mesh = PosedMesh::build(data_->rig.mesh, data_->rig.skeleton, pose);
        PlainCtx<R> ctx = plain_ctx();
        RenderParams rp = cfg_.render_params();
        if (n_coarse > 0) rp.n_coarse = n_coarse;
        if (n_fine > 0) rp.n_fine = n_fine;
        auto rgba = render_image_rgba<R>(ctx, data_->rig.mesh, mesh, data_->camera, rp, stream,
                                         cfg_.workers);
        Image img(data_->camera.width, data_->camera.height, 4);
        img.data = std::move(rgba);
        return img;
    }

    double pose_drift() const {
        double sum = 0.0;
        for (size_t f = 0; f < data_->frames.size(); ++f) {
            const auto& w = store_.arrays[size_t(pose_a_[f])].w;
            auto flat0 = data_->frames[f].initial_pose.to_flat();
            double d2 = 0.0;
            for (size_t i = 0; i < w.size(); ++i) d2 += sqr(double(w[i]) - flat0[i]);
            sum += std::sqrt(d2);
        }
        return sum / double(data_->frames.size());
    }

    void save_checkpoint(const std::string& path) const {
        save_checkpoint_file(path, store_, experiment_config_to_json(cfg_));
    }
    void load_checkpoint(const std::string& path) {
        load_checkpoint_file(path, store_);
        posed_cache_key_.assign(posed_cache_key_.size(), {});
    }

    std::vector<Pose> current_poses() const {
        std::vector<Pose> out;
        for (size_t f = 0; f < data_->frames.size(); ++f) out.push_back(current_pose(int(f)));
        return out;
    }

private:
    const Dataset* data_;
    ExperimentConfig cfg_;
    FieldConfig fcfg_;
    ParamStore<R> store_;
    int psi_a_ = -1, field_a_ = -1, latent_a_ = -1;
    std::vector<int> pose_a_;
    std::vector<double> lrs_;
    GradBuffers<R> grads_;
    std::vector<GradBuffers<R>> worker_grads_;
    double last_probe_ = 0.0;

    std::vector<std::optional<PosedMesh>> posed_cache_;
    std::vector<std::vector<R>> posed_cache_key_;

    PlainCtx<R> plain_ctx() {
        return PlainCtx<R>{&cfg_.embedding, &fcfg_, store_.arrays[size_t(psi_a_)].w.data(),
                           store_.arrays[size_t(field_a_)].w.data(),
                           store_.arrays[size_t(latent_a_)].w.data()};
    }

    Vec3d pixel_color(const Frame& frame, int pixel) const {
        int x = pixel % frame.image.width, y = pixel / frame.image.width;
        return {frame.image.at(x, y, 0), frame.image.at(x, y, 1), frame.image.at(x, y, 2)};
    }

    std::vector<RaySpec> make_rays(const BatchPlan& plan) const {
        std::vector<RaySpec> rays;
        rays.reserve(plan.pixels.size());
        for (size_t i = 0; i < plan.pixels.size(); ++i) {
            RaySpec ray;
            data_->camera.pixel_ray(plan.pixels[i] % data_->camera.width,
                                    plan.pixels[i] / data_->camera.width, ray.origin, ray.dir);
            ray.rng_seed = derive_seed(cfg_.seed, 0x72617973, uint64_t(plan.iter), uint64_t(i));
            rays.push_back(ray);
        }
        return rays;
    }

    double regularizer_value(int frame) const {
        const auto& w = store_.arrays[size_t(pose_a_[size_t(frame)])].w;
        auto flat0 = data_->frames[size_t(frame)].initial_pose.to_flat();
        double reg = 0.0;
        for (size_t i = 0; i < w.size(); ++i) reg += sqr(double(w[i]) - flat0[i]);
        return cfg_.lambda_pose * reg;
    }

    // Rebuilds the posed mesh + acceleration structure when the frame's pose
    // changed since the last visit.
    const PosedMesh& posed(int frame) {
        const auto& w = store_.arrays[size_t(pose_a_[size_t(frame)])].w;
        auto& key = posed_cache_key_[size_t(frame)];
        if (!posed_cache_[size_t(frame)] || key != w) {
            posed_cache_[size_t(frame)] =
                PosedMesh::build(data_->rig.mesh, data_->rig.skeleton, current_pose(frame));
            key = w;
        }
        return *posed_cache_[size_t(frame)];
    }

    std::vector<Affine3<Var<R>>> tape_parts(Tape<R>& tape, int frame) {
        const auto& w = store_.arrays[size_t(pose_a_[size_t(frame)])].w;
        const int pa = pose_a_[size_t(frame)];
        const size_t joints = data_->rig.skeleton.joints.size();
        std::vector<Vec3<Var<R>>> jr(joints);
        for (size_t j = 0; j < joints; ++j)
            jr[j] = {tape.leaf(w[3 * j + 0], pa, int(3 * j + 0)),
                     tape.leaf(w[3 * j + 1], pa, int(3 * j + 1)),
                     tape.leaf(w[3 * j + 2], pa, int(3 * j + 2))};
        Vec3<Var<R>> rt{tape.leaf(w[3 * joints + 0], pa, int(3 * joints + 0)),
                        tape.leaf(w[3 * joints + 1], pa, int(3 * joints + 1)),
                        tape.leaf(w[3 * joints + 2], pa, int(3 * joints + 2))};
        return forward_kinematics_t<Var<R>>(data_->rig.skeleton, jr, rt);
    }
};

}  // namespace mgnerf
