#include "mgpde/mgtrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

namespace mgpde {

namespace {

using json = nlohmann::json;

bool is_power_of_two(std::int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// Visit walks over level indices (0 = finest). Consecutive duplicates merge.
void append_visit(std::vector<int>& v, int level) {
    if (v.empty() || v.back() != level) v.push_back(level);
}

void w_walk(std::vector<int>& out, int level, int coarsest) {
    append_visit(out, level);
    if (level == coarsest) return;
    w_walk(out, level + 1, coarsest);
    w_walk(out, level + 1, coarsest);
    append_visit(out, level);
}

std::vector<int> visit_walk(CycleKind kind, int levels) {
    int coarsest = levels - 1;
    std::vector<int> v;
    switch (kind) {
        case CycleKind::Base:
            v = {0};
            break;
        case CycleKind::HalfV:
            for (int l = coarsest; l >= 0; --l) v.push_back(l);
            break;
        case CycleKind::V:
            for (int l = 0; l <= coarsest; ++l) v.push_back(l);
            for (int l = coarsest - 1; l >= 0; --l) v.push_back(l);
            break;
        case CycleKind::W:
            w_walk(v, 0, coarsest);
            break;
        case CycleKind::F: {
            // Descend to the coarsest, then dip back to it after each level is
            // reached for the first time on the way up (no dip at the top).
            for (int l = 0; l <= coarsest; ++l) append_visit(v, l);
            for (int up = coarsest - 1; up >= 0; --up) {
                append_visit(v, up);
                if (up == 0) break;
                for (int l = up + 1; l <= coarsest; ++l) append_visit(v, l);
                for (int l = coarsest - 1; l >= up; --l) append_visit(v, l);
            }
            break;
        }
    }
    return v;
}

}  // namespace

CycleKind cycle_kind_from_string(const std::string& name) {
    if (name == "v") return CycleKind::V;
    if (name == "w") return CycleKind::W;
    if (name == "f") return CycleKind::F;
    if (name == "half-v" || name == "halfv") return CycleKind::HalfV;
    if (name == "base") return CycleKind::Base;
    throw Error::config("unknown cycle kind '" + name + "' (expected v, w, f, half-v or base)");
}

std::string to_string(CycleKind kind) {
    switch (kind) {
        case CycleKind::V: return "v";
        case CycleKind::W: return "w";
        case CycleKind::F: return "f";
        case CycleKind::HalfV: return "half-v";
        case CycleKind::Base: return "base";
    }
    return "?";
}

Schedule make_schedule(CycleKind kind, std::int64_t max_resolution, int levels, int fixed_epochs) {
    if (!is_power_of_two(max_resolution) || max_resolution < 4) {
        throw Error::config("max resolution must be a power of two >= 4, got " +
                            std::to_string(max_resolution));
    }
    if (levels < 1) throw Error::config("levels must be >= 1");
    if (fixed_epochs < 1) throw Error::config("fixed_epochs must be >= 1");
    std::int64_t coarsest = max_resolution >> (levels - 1);
    if (coarsest < 4) {
        throw Error::config("too many levels: coarsest resolution would be " +
                            std::to_string(coarsest));
    }

    Schedule s;
    s.kind = kind;
    s.max_resolution = max_resolution;
    s.levels = kind == CycleKind::Base ? 1 : levels;

    std::vector<int> walk = visit_walk(kind, s.levels);
    for (std::size_t i = 0; i < walk.size(); ++i) {
        std::int64_t res = max_resolution >> walk[i];
        bool last = i + 1 == walk.size();
        bool next_up = !last && walk[i + 1] < walk[i];  // smaller level index = finer
        ScheduleStep step;
        step.resolution = res;
        step.mode = (last || next_up) ? StepMode::Converge : StepMode::Fixed;
        step.fixed_epochs = step.mode == StepMode::Fixed ? fixed_epochs : 0;
        s.steps.push_back(step);
    }
    return s;
}

bool EarlyStopTracker::update(double epoch_loss) {
    window_.push_back(epoch_loss);
    if (static_cast<int>(window_.size()) > config_.patience) window_.pop_front();
    if (static_cast<int>(window_.size()) < config_.patience) return false;
    double m = 0.0;
    for (double v : window_) m += v;
    m /= static_cast<double>(window_.size());
    if (!has_best_) {
        best_ = m;
        has_best_ = true;
        return false;
    }
    if ((best_ - m) / std::abs(best_) >= config_.rel_tol) {
        best_ = m;
        stall_ = 0;
        return false;
    }
    best_ = std::min(best_, m);
    ++stall_;
    return stall_ >= config_.patience;
}

void TrainReport::write_json(const std::string& path) const {
    json j;
    j["schema_version"] = 1;
    j["schedule"] = schedule;
    j["total_seconds"] = total_seconds;
    j["final_loss"] = final_loss;
    j["steps"] = json::array();
    for (const auto& s : steps) {
        j["steps"].push_back({{"resolution", s.resolution},
                              {"mode", s.mode == StepMode::Fixed ? "fixed" : "converge"},
                              {"epochs", s.epochs},
                              {"wall_seconds", s.wall_seconds},
                              {"final_loss", s.final_loss},
                              {"adapted_before", s.adapted_before}});
    }
    std::ofstream f(path);
    if (!f) throw Error::io("cannot write train report: " + path);
    f << j.dump(2) << "\n";
}

SpeedupReport speedup_report(const TrainReport& mg, const TrainReport& base) {
    SpeedupReport r;
    r.speedup = mg.total_seconds > 0.0 ? base.total_seconds / mg.total_seconds : 0.0;
    std::map<std::int64_t, double> by_res;
    for (const auto& s : mg.steps) by_res[s.resolution] += s.wall_seconds;
    for (const auto& [res, secs] : by_res) {
        double pct = mg.total_seconds > 0.0 ? 100.0 * secs / mg.total_seconds : 0.0;
        r.time_share.push_back({res, secs, pct});
    }
    return r;
}

namespace {

struct LevelData {
    GridSpec grid;
    BoundaryMasks masks;
    std::vector<Tensor> nu;  // one (1,1,...) field per omega
};

LevelData build_level(const std::vector<OmegaSample>& omegas, std::int64_t resolution, int rank) {
    GridSpec grid{resolution, rank};
    LevelData d{grid, BoundaryMasks::make(grid), {}};
    d.nu.reserve(omegas.size());
    for (const auto& w : omegas) d.nu.push_back(diffusivity_field(w, grid));
    return d;
}

Tensor stack_slices(const LevelData& data, std::int64_t begin, std::int64_t count) {
    std::int64_t plane = data.grid.node_count();
    std::vector<std::int64_t> shape = data.grid.rank == 3
                                          ? std::vector<std::int64_t>{count, 1, data.grid.resolution,
                                                                      data.grid.resolution,
                                                                      data.grid.resolution}
                                          : std::vector<std::int64_t>{count, 1, data.grid.resolution,
                                                                      data.grid.resolution};
    Tensor out(shape);
    for (std::int64_t i = 0; i < count; ++i) {
        // Padded sample indices (partition adjustment) wrap around the set.
        std::size_t src = static_cast<std::size_t>((begin + i) % static_cast<std::int64_t>(data.nu.size()));
        std::memcpy(out.data() + i * plane, data.nu[src].data(),
                    static_cast<std::size_t>(plane) * sizeof(double));
    }
    return out;
}

class CsvLogger {
public:
    explicit CsvLogger(const std::string& path) {
        if (path.empty()) return;
        bool fresh = !std::filesystem::exists(path);
        f_.open(path, std::ios::app);
        if (!f_) throw Error::io("cannot open csv log: " + path);
        if (fresh) {
            f_ << "# schema: mgpde.epoch.v1\n";
            f_ << "epoch,wall_s,compute_s,comm_s,loss,p,resolution,level_index\n";
        }
    }

    void row(std::int64_t epoch, const EpochResult& e, int p, std::int64_t res, std::size_t level) {
        if (!f_.is_open()) return;
        f_ << epoch << ',' << e.wall_seconds << ',' << e.compute_seconds << ',' << e.comm_seconds
           << ',' << e.mean_loss << ',' << p << ',' << res << ',' << level << '\n';
        f_.flush();
    }

private:
    std::ofstream f_;
};

}  // namespace

RunResult run_schedule(const Schedule& schedule, const ModelState& initial_model,
                       const ClusterSpec& cluster, const OptimizerConfig& optimizer,
                       const TrainOptions& options) {
    if (schedule.steps.empty()) throw Error::config("schedule has no steps");
    if (options.rank != initial_model.spec.spatial_rank) {
        throw Error::config("options rank does not match model spatial rank");
    }

    std::vector<OmegaSample> omegas = sample_omegas(options.omega_count, options.omega_seed);
    Partition partition = make_partition(options.omega_count, options.global_batch_size,
                                         cluster.workers);

    WorkerGroup group(initial_model, cluster, optimizer);
    CsvLogger log(options.csv_path);

    TrainReport report;
    report.schedule = to_string(schedule.kind);
    std::int64_t global_epoch = 0;

    if (!options.checkpoint_dir.empty()) {
        std::filesystem::create_directories(options.checkpoint_dir);
    }

    for (std::size_t si = 0; si < schedule.steps.size(); ++si) {
        const ScheduleStep& step = schedule.steps[si];
        bool adapted = false;
        if (options.adapt && si > 0 && step.resolution > schedule.steps[si - 1].resolution) {
            group.adapt_all(options.adapt_seed_base + si);
            adapted = true;
        }

        LevelData level = build_level(omegas, step.resolution, options.rank);
        LocalLossFn loss_fn = [&level](int, ModelState& model, std::int64_t begin,
                                       std::int64_t count, Tape& tape,
                                       const StatReducer* bn_sync) {
            Tensor nu_batch = stack_slices(level, begin, count);
            Tensor u_int = unet_forward(model, nu_batch, /*training=*/true, &tape, bn_sync);
            Tensor u = apply_bc(u_int, level.masks, &tape);
            return energy_loss(u, nu_batch, level.grid, &tape);
        };

        StepReport sr;
        sr.resolution = step.resolution;
        sr.mode = step.mode;
        sr.adapted_before = adapted;
        auto t0 = std::chrono::steady_clock::now();
        EarlyStopTracker stop(options.early_stop);
        std::int64_t epoch_budget =
            step.mode == StepMode::Fixed ? step.fixed_epochs : options.max_epochs_per_step;

        for (std::int64_t e = 0; e < epoch_budget; ++e) {
            EpochResult er;
            try {
                er = group.train_epoch(partition, loss_fn);
            } catch (const Error& err) {
                throw Error::numeric("step " + std::to_string(si) + " (resolution " +
                                     std::to_string(step.resolution) + ", epoch " +
                                     std::to_string(e) + "): " + err.what());
            }
            ++global_epoch;
            ++sr.epochs;
            sr.final_loss = er.mean_loss;
            log.row(global_epoch, er, cluster.workers, step.resolution, si);
            if (options.checkpoint_every > 0 && global_epoch % options.checkpoint_every == 0 &&
                !options.checkpoint_dir.empty()) {
                save_checkpoint(group.replica(0), options.checkpoint_dir + "/latest.ckpt");
            }
            if (step.mode == StepMode::Converge && stop.update(er.mean_loss)) break;
        }
        sr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.steps.push_back(sr);
        report.final_loss = sr.final_loss;

        if (!options.checkpoint_dir.empty()) {
            save_checkpoint(group.replica(0), options.checkpoint_dir + "/step_" +
                                                  std::to_string(si) + "_res" +
                                                  std::to_string(step.resolution) + ".ckpt");
        }
    }

    for (const auto& s : report.steps) report.total_seconds += s.wall_seconds;
    group.sync_bn();
    return RunResult{group.replica(0).clone(), std::move(report)};
}

}  // namespace mgpde
