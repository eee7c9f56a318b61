/// @file parallel.hpp
/// @brief In-process data-parallel training engine.
///
/// p workers run as threads, each owning a model replica, optimizer state,
/// and its slice of every global mini-batch. The only cross-worker
/// interaction is a deterministic fixed-tree allreduce-average, so the
/// optimization trajectory is independent of p up to reduction rounding:
/// every global mini-batch is split into p equal contiguous parts whose
/// union is exactly the single-worker mini-batch.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mgpde/network.hpp"
#include "mgpde/optimizer.hpp"
#include "mgpde/tensor.hpp"

namespace mgpde {

struct ClusterSpec {
    int workers = 1;             // p
    int threads_per_worker = 1;  // N_t intra-op hint; must not affect numerics

    void validate() const;
};

/// Worker-count-invariant sample assignment. The requested (N_s, b_s) are
/// minimally adjusted so both are divisible by p: b_s shrinks to p*floor(b_s/p)
/// and N_s pads to p*ceil(N_s/p). The remainder N_s mod b_s is then divisible
/// by p automatically, so local mini-batches always have equal sizes.
struct Partition {
    std::int64_t requested_samples = 0;
    std::int64_t requested_batch = 0;
    std::int64_t total_samples = 0;  // N_s (adjusted)
    std::int64_t batch_size = 0;     // b_s (adjusted)
    int workers = 1;                 // p
    std::int64_t local_samples = 0;  // N_s^loc = N_s / p
    std::int64_t local_batch = 0;    // b_s^loc = b_s / p
    std::int64_t num_batches = 0;    // N_b = ceil(N_s / b_s)

    /// Extent of global mini-batch n (the final batch may be short).
    std::int64_t batch_total(std::int64_t batch_index) const;

    struct Range {
        std::int64_t begin = 0;
        std::int64_t count = 0;
    };
    /// Contiguous global-index slice handled by `worker` in mini-batch n.
    Range local_range(std::int64_t batch_index, int worker) const;
};

Partition make_partition(std::int64_t n_samples, std::int64_t batch_size, int workers);

/// Fixed-order binary-tree mean of equal-length vectors; the unit-testable
/// core of the worker-group allreduce.
std::vector<double> tree_average(const std::vector<std::vector<double>>& vectors);

/// Average running BN statistics across workers (mean of means and mean of
/// variances, per layer), leaving every worker with identical values.
void sync_bn_states(const std::vector<std::vector<BNState*>>& per_worker);

struct CommCounter {
    std::int64_t grad_reduce_count = 0;
    std::int64_t grad_bytes_per_reduce = 0;  // 8 * N_w, independent of p
    std::int64_t grad_bytes_total = 0;
    std::int64_t bn_stat_reduce_count = 0;  // in-pass statistic averaging
    std::int64_t bn_stat_bytes_total = 0;
    std::int64_t bn_epoch_sync_count = 0;  // epoch-end running-stat syncs
    double collective_seconds = 0.0;
};

struct EpochResult {
    double mean_loss = 0.0;  // mean over mini-batches of worker-averaged losses
    double wall_seconds = 0.0;
    double compute_seconds = 0.0;
    double comm_seconds = 0.0;
    std::vector<double> batch_losses;
    std::vector<std::vector<double>> averaged_gradients;  // filled when recording is on
};

/// Local loss closure: forward the worker's sample slice and return the
/// scalar loss on the given tape. `bn_sync` must be passed into the network
/// so training-mode batch-norm sees union-batch statistics.
using LocalLossFn = std::function<Tensor(int worker, ModelState& replica, std::int64_t sample_begin,
                                         std::int64_t sample_count, Tape& tape,
                                         const StatReducer* bn_sync)>;

class WorkerGroup {
public:
    WorkerGroup(const ModelState& prototype, ClusterSpec cluster, OptimizerConfig optimizer);
    ~WorkerGroup();

    int workers() const { return cluster_.workers; }
    ModelState& replica(int worker) { return replicas_[static_cast<std::size_t>(worker)]; }
    const ModelState& replica(int worker) const { return replicas_[static_cast<std::size_t>(worker)]; }
    const CommCounter& counters() const { return counters_; }
    std::int64_t parameter_count() const { return n_params_; }

    /// One epoch of SciDDL-style training: per mini-batch each worker
    /// forwards its slice, the loss and gradient are tree-averaged in one
    /// collective round, and every replica applies the shared update.
    /// Ends with the epoch-level BN running-stat sync. Throws Error::numeric
    /// when the averaged loss stops being finite or replicas diverge.
    EpochResult train_epoch(const Partition& partition, const LocalLossFn& loss_fn);

    /// Alg.-2 style running-statistics averaging; also called before eval.
    void sync_bn();

    /// SHA-256 coherence check across replicas; throws on mismatch.
    void check_coherence() const;

    /// Apply the same architectural adaptation to every replica and reset
    /// optimizer state for the new parameter layout.
    void adapt_all(std::uint64_t seed);

    void set_record_gradients(bool on) { record_gradients_ = on; }
    void set_coherence_check_every_epoch(bool on) { coherence_every_epoch_ = on; }

private:
    ClusterSpec cluster_;
    OptimizerConfig opt_config_;
    std::vector<ModelState> replicas_;
    std::vector<Optimizer> optimizers_;
    std::int64_t n_params_ = 0;
    CommCounter counters_;
    bool record_gradients_ = false;
    bool coherence_every_epoch_ = true;
};

}  // namespace mgpde
