/// @file mgtrain.hpp
/// @brief Multigrid training schedules and the cross-resolution training loop.
///
/// A schedule is an ordered list of (resolution, mode) steps realizing one
/// multigrid cycle over resolutions {R, R/2, ..., R/2^(L-1)}. Restriction
/// visits (next move goes coarser) train for a fixed number of epochs;
/// prolongation visits and the final step train to convergence under the
/// early-stopping rule. The same model state flows through every step; inputs
/// are regenerated analytically at each resolution.

#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "mgpde/network.hpp"
#include "mgpde/parallel.hpp"
#include "mgpde/problem.hpp"

namespace mgpde {

enum class CycleKind { V, W, F, HalfV, Base };
enum class StepMode { Fixed, Converge };

CycleKind cycle_kind_from_string(const std::string& name);
std::string to_string(CycleKind kind);

struct ScheduleStep {
    std::int64_t resolution = 0;
    StepMode mode = StepMode::Converge;
    int fixed_epochs = 0;  // used when mode == Fixed
};

struct Schedule {
    CycleKind kind = CycleKind::Base;
    std::int64_t max_resolution = 0;
    int levels = 1;
    std::vector<ScheduleStep> steps;
};

/// Build the explicit step list for one cycle. Resolutions must halve cleanly:
/// R is a power of two and R/2^(levels-1) >= 4.
Schedule make_schedule(CycleKind kind, std::int64_t max_resolution, int levels, int fixed_epochs);

struct EarlyStop {
    int patience = 10;
    double rel_tol = 1e-3;
};

/// Pure function of the observed loss history: the windowed (patience-wide)
/// mean loss must improve relatively by rel_tol, else a stall counter grows;
/// `patience` consecutive stalls stop the step. Can only trigger after at
/// least `patience` epochs.
class EarlyStopTracker {
public:
    explicit EarlyStopTracker(EarlyStop config) : config_(config) {}

    /// Feed one epoch loss; returns true when the step should stop.
    bool update(double epoch_loss);

private:
    EarlyStop config_;
    std::deque<double> window_;
    double best_ = 0.0;
    bool has_best_ = false;
    int stall_ = 0;
};

struct StepReport {
    std::int64_t resolution = 0;
    StepMode mode = StepMode::Converge;
    std::int64_t epochs = 0;
    double wall_seconds = 0.0;
    double final_loss = 0.0;
    bool adapted_before = false;
};

struct TrainReport {
    std::string schedule;
    std::vector<StepReport> steps;
    double total_seconds = 0.0;
    double final_loss = 0.0;

    void write_json(const std::string& path) const;
};

struct SpeedupReport {
    double speedup = 0.0;  // baseline total / multigrid total
    struct Share {
        std::int64_t resolution;
        double seconds;
        double percent;
    };
    std::vector<Share> time_share;  // percentages sum to 100
};

/// Speedup plus the per-resolution time breakdown of the multigrid run.
SpeedupReport speedup_report(const TrainReport& mg, const TrainReport& base);

struct TrainOptions {
    std::int64_t omega_count = 64;
    std::uint64_t omega_seed = 0;
    std::int64_t global_batch_size = 64;
    int max_epochs_per_step = 3000;  // cap for converge-mode steps
    EarlyStop early_stop;
    bool adapt = false;
    std::uint64_t adapt_seed_base = 9000;
    int rank = 2;

    std::string csv_path;         // per-epoch log, empty = off
    std::string checkpoint_dir;   // step-boundary checkpoints, empty = off
    int checkpoint_every = 0;     // extra periodic checkpoint (epochs), 0 = off
};

struct RunResult {
    ModelState model;
    TrainReport report;
};

/// Execute a schedule: per step regenerate the diffusivity fields at the step
/// resolution from the same omega set, train until the mode condition, and
/// (when enabled) adapt the network at each coarse-to-fine transition.
/// Throws Error::numeric with step context if the loss diverges.
RunResult run_schedule(const Schedule& schedule, const ModelState& initial_model,
                       const ClusterSpec& cluster, const OptimizerConfig& optimizer,
                       const TrainOptions& options);

}  // namespace mgpde
