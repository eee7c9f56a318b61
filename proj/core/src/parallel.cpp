#include "mgpde/parallel.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <string>
#include <thread>

namespace mgpde {

namespace {

// Fixed rank-ordered binary combine: ((v0+v1)+(v2+v3))... shared by every
// reduction path so associations match across entry points.
inline double tree_sum(double* vals, int p) {
    for (int gap = 1; gap < p; gap *= 2)
        for (int i = 0; i + gap < p; i += 2 * gap) vals[i] += vals[i + gap];
    return vals[0];
}

// Barrier that can be aborted when a worker fails, so no thread is left
// waiting forever.
class AbortableBarrier {
public:
    explicit AbortableBarrier(int n) : n_(n) {}

    void wait() {
        std::unique_lock<std::mutex> lock(mu_);
        if (aborted_) throw Error::numeric("worker group aborted");
        if (++waiting_ == n_) {
            waiting_ = 0;
            ++generation_;
            cv_.notify_all();
            return;
        }
        std::int64_t gen = generation_;
        cv_.wait(lock, [&] { return generation_ != gen || aborted_; });
        if (aborted_) throw Error::numeric("worker group aborted");
    }

    void abort() {
        std::lock_guard<std::mutex> lock(mu_);
        aborted_ = true;
        cv_.notify_all();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    int n_;
    int waiting_ = 0;
    std::int64_t generation_ = 0;
    bool aborted_ = false;
};

// Shared state of one collective round. Rank 0 performs the fixed-tree
// combine; everyone copies the result, giving bit-identical buffers.
class CollectiveHub {
public:
    explicit CollectiveHub(int p) : p_(p), barrier_(p), slots_(static_cast<std::size_t>(p)), sizes_(static_cast<std::size_t>(p)) {}

    void allreduce_average(int rank, std::span<double> buf, CommCounter* counter, bool is_grad) {
        using clock = std::chrono::steady_clock;
        auto t0 = clock::now();
        slots_[static_cast<std::size_t>(rank)] = buf.data();
        sizes_[static_cast<std::size_t>(rank)] = buf.size();
        barrier_.wait();
        if (rank == 0) {
            error_.clear();
            for (int i = 1; i < p_; ++i) {
                if (sizes_[static_cast<std::size_t>(i)] != sizes_[0]) {
                    error_ = "allreduce length mismatch: rank " + std::to_string(i) + " has " +
                             std::to_string(sizes_[static_cast<std::size_t>(i)]) + ", rank 0 has " +
                             std::to_string(sizes_[0]);
                    break;
                }
            }
            if (error_.empty()) {
                result_.resize(sizes_[0]);
                double vals[64];
                double inv_p = 1.0 / static_cast<double>(p_);
                for (std::size_t j = 0; j < sizes_[0]; ++j) {
                    for (int i = 0; i < p_; ++i) vals[i] = slots_[static_cast<std::size_t>(i)][j];
                    result_[j] = tree_sum(vals, p_) * inv_p;
                }
            }
        }
        barrier_.wait();
        if (!error_.empty()) throw Error::shape(error_);
        std::memcpy(buf.data(), result_.data(), buf.size() * sizeof(double));
        barrier_.wait();
        if (rank == 0 && counter) {
            if (is_grad) {
                ++counter->grad_reduce_count;
                counter->grad_bytes_total += static_cast<std::int64_t>(8 * buf.size());
            } else {
                ++counter->bn_stat_reduce_count;
                counter->bn_stat_bytes_total += static_cast<std::int64_t>(8 * buf.size());
            }
            counter->collective_seconds +=
                std::chrono::duration<double>(clock::now() - t0).count();
        }
    }

    void abort() { barrier_.abort(); }

private:
    int p_;
    AbortableBarrier barrier_;
    std::vector<double*> slots_;
    std::vector<std::size_t> sizes_;
    std::vector<double> result_;
    std::string error_;
};

class HubReducer : public StatReducer {
public:
    HubReducer(CollectiveHub* hub, int rank, CommCounter* counter)
        : hub_(hub), rank_(rank), counter_(counter) {}

    void average(std::span<double> values) const override {
        hub_->allreduce_average(rank_, values, counter_, /*is_grad=*/false);
    }

private:
    CollectiveHub* hub_;
    int rank_;
    CommCounter* counter_;
};

}  // namespace

void ClusterSpec::validate() const {
    if (workers < 1 || workers > 64) {
        throw Error::config("cluster workers must be in [1,64], got " + std::to_string(workers));
    }
    if (threads_per_worker < 1) throw Error::config("threads_per_worker must be >= 1");
}

std::int64_t Partition::batch_total(std::int64_t batch_index) const {
    std::int64_t begin = batch_index * batch_size;
    return std::min(batch_size, total_samples - begin);
}

Partition::Range Partition::local_range(std::int64_t batch_index, int worker) const {
    if (batch_index < 0 || batch_index >= num_batches) {
        throw Error::config("batch index " + std::to_string(batch_index) + " out of range");
    }
    if (worker < 0 || worker >= workers) {
        throw Error::config("worker index " + std::to_string(worker) + " out of range");
    }
    std::int64_t total = batch_total(batch_index);
    std::int64_t per_worker = total / workers;  // exact: remainder divisible by p
    return Range{batch_index * batch_size + worker * per_worker, per_worker};
}

Partition make_partition(std::int64_t n_samples, std::int64_t batch_size, int workers) {
    if (n_samples < 1 || batch_size < 1 || workers < 1) {
        throw Error::config("partition: N_s, b_s and p must all be positive");
    }
    if (batch_size > n_samples) {
        throw Error::config("partition: batch size " + std::to_string(batch_size) +
                            " exceeds sample count " + std::to_string(n_samples));
    }
    if (batch_size < workers) {
        throw Error::config("partition: batch size " + std::to_string(batch_size) +
                            " smaller than worker count " + std::to_string(workers) +
                            " would leave empty local batches");
    }
    Partition p;
    p.requested_samples = n_samples;
    p.requested_batch = batch_size;
    p.workers = workers;
    p.batch_size = workers * (batch_size / workers);
    p.total_samples = workers * ((n_samples + workers - 1) / workers);
    p.local_batch = p.batch_size / workers;
    p.local_samples = p.total_samples / workers;
    p.num_batches = (p.total_samples + p.batch_size - 1) / p.batch_size;
    return p;
}

std::vector<double> tree_average(const std::vector<std::vector<double>>& vectors) {
    if (vectors.empty()) throw Error::config("tree_average: no vectors");
    int p = static_cast<int>(vectors.size());
    if (p > 64) throw Error::config("tree_average: more than 64 workers");
    std::size_t n = vectors[0].size();
    for (const auto& v : vectors) {
        if (v.size() != n) throw Error::shape("tree_average: length mismatch");
    }
    std::vector<double> out(n);
    double vals[64];
    double inv_p = 1.0 / static_cast<double>(p);
    for (std::size_t j = 0; j < n; ++j) {
        for (int i = 0; i < p; ++i) vals[i] = vectors[static_cast<std::size_t>(i)][j];
        out[j] = tree_sum(vals, p) * inv_p;
    }
    return out;
}

void sync_bn_states(const std::vector<std::vector<BNState*>>& per_worker) {
    if (per_worker.empty()) return;
    std::size_t layers = per_worker[0].size();
    for (const auto& w : per_worker) {
        if (w.size() != layers) throw Error::shape("sync_bn: BN layer count differs across workers");
    }
    int p = static_cast<int>(per_worker.size());
    double vals[64];
    for (std::size_t l = 0; l < layers; ++l) {
        std::int64_t c = per_worker[0][l]->running_mean.numel();
        for (const auto& w : per_worker) {
            if (w[l]->running_mean.numel() != c || w[l]->running_var.numel() != c) {
                throw Error::shape("sync_bn: BN channel count differs across workers at layer " +
                                   std::to_string(l));
            }
        }
        for (std::int64_t j = 0; j < c; ++j) {
            for (int i = 0; i < p; ++i) vals[i] = per_worker[static_cast<std::size_t>(i)][l]->running_mean[j];
            double mean = tree_sum(vals, p) / static_cast<double>(p);
            for (int i = 0; i < p; ++i) per_worker[static_cast<std::size_t>(i)][l]->running_mean[j] = mean;
            for (int i = 0; i < p; ++i) vals[i] = per_worker[static_cast<std::size_t>(i)][l]->running_var[j];
            double var = tree_sum(vals, p) / static_cast<double>(p);
            for (int i = 0; i < p; ++i) per_worker[static_cast<std::size_t>(i)][l]->running_var[j] = var;
        }
    }
}

WorkerGroup::WorkerGroup(const ModelState& prototype, ClusterSpec cluster, OptimizerConfig optimizer)
    : cluster_(cluster), opt_config_(optimizer) {
    cluster_.validate();
    n_params_ = prototype.parameter_count();
    set_intra_op_threads(cluster_.threads_per_worker);
    for (int i = 0; i < cluster_.workers; ++i) {
        replicas_.push_back(prototype.clone());
        optimizers_.emplace_back(opt_config_, static_cast<std::size_t>(n_params_));
    }
    counters_.grad_bytes_per_reduce = 8 * n_params_;
}

WorkerGroup::~WorkerGroup() = default;

EpochResult WorkerGroup::train_epoch(const Partition& partition, const LocalLossFn& loss_fn) {
    if (partition.workers != cluster_.workers) {
        throw Error::config("partition built for p=" + std::to_string(partition.workers) +
                            " but group has p=" + std::to_string(cluster_.workers));
    }
    int p = cluster_.workers;
    CollectiveHub hub(p);
    EpochResult result;
    result.batch_losses.assign(static_cast<std::size_t>(partition.num_batches), 0.0);
    if (record_gradients_)
        result.averaged_gradients.assign(static_cast<std::size_t>(partition.num_batches), {});

    std::vector<std::string> errors(static_cast<std::size_t>(p));
    auto t_epoch = std::chrono::steady_clock::now();
    double comm_before = counters_.collective_seconds;

    auto worker_body = [&](int rank) {
        ModelState& model = replicas_[static_cast<std::size_t>(rank)];
        Optimizer& optimizer = optimizers_[static_cast<std::size_t>(rank)];
        HubReducer reducer(&hub, rank, &counters_);
        std::vector<double> flat(static_cast<std::size_t>(n_params_) + 1);
        for (std::int64_t mb = 0; mb < partition.num_batches; ++mb) {
            Partition::Range range = partition.local_range(mb, rank);
            Tape tape;
            for (Tensor* param : model.parameters()) tape.watch(*param);
            Tensor loss = loss_fn(rank, model, range.begin, range.count, tape, &reducer);
            GradMap grads = tape.backward(loss);

            std::size_t off = 0;
            for (Tensor* param : model.parameters()) {
                Tensor g = grads.grad(*param);
                std::memcpy(flat.data() + off, g.data(),
                            static_cast<std::size_t>(g.numel()) * sizeof(double));
                off += static_cast<std::size_t>(g.numel());
            }
            flat[off] = loss.value();

            // Loss rides in the same collective round as the gradient; the
            // instrumented gradient payload stays 8*N_w.
            hub.allreduce_average(rank, std::span<double>(flat.data(), flat.size()), &counters_,
                                  /*is_grad=*/true);
            if (rank == 0) {
                counters_.grad_bytes_total -= 8;  // exclude the appended loss scalar
            }

            double avg_loss = flat[static_cast<std::size_t>(n_params_)];
            if (!std::isfinite(avg_loss)) {
                throw Error::numeric("loss diverged (non-finite) at mini-batch " +
                                     std::to_string(mb));
            }
            if (rank == 0) {
                result.batch_losses[static_cast<std::size_t>(mb)] = avg_loss;
                if (record_gradients_) {
                    result.averaged_gradients[static_cast<std::size_t>(mb)] =
                        std::vector<double>(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(n_params_));
                }
            }

            std::vector<double> params = model.flatten_parameters();
            optimizer.step(params, std::span<const double>(flat.data(), static_cast<std::size_t>(n_params_)));
            model.unflatten_parameters(params);
        }
    };

    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(p));
    for (int rank = 0; rank < p; ++rank) {
        threads.emplace_back([&, rank] {
            try {
                worker_body(rank);
            } catch (const std::exception& e) {
                errors[static_cast<std::size_t>(rank)] = e.what();
                hub.abort();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors) {
        if (!e.empty()) throw Error::numeric("train_epoch: " + e);
    }

    sync_bn();
    if (coherence_every_epoch_) check_coherence();

    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    result.comm_seconds = counters_.collective_seconds - comm_before;
    result.compute_seconds = result.wall_seconds - result.comm_seconds;
    double acc = 0.0;
    for (double l : result.batch_losses) acc += l;
    result.mean_loss = acc / static_cast<double>(partition.num_batches);
    return result;
}

void WorkerGroup::sync_bn() {
    std::vector<std::vector<BNState*>> states;
    states.reserve(replicas_.size());
    for (auto& r : replicas_) states.push_back(r.bn_states());
    sync_bn_states(states);
    counters_.bn_epoch_sync_count += static_cast<std::int64_t>(states.empty() ? 0 : states[0].size());
}

void WorkerGroup::check_coherence() const {
    if (replicas_.size() < 2) return;
    std::string first = replicas_[0].weights_digest();
    for (std::size_t i = 1; i < replicas_.size(); ++i) {
        if (replicas_[i].weights_digest() != first) {
            throw Error::numeric("replica divergence detected: worker " + std::to_string(i) +
                                 " digest differs from worker 0");
        }
    }
}

void WorkerGroup::adapt_all(std::uint64_t seed) {
    for (auto& r : replicas_) r = adapt_unet(r, seed);
    n_params_ = replicas_[0].parameter_count();
    counters_.grad_bytes_per_reduce = 8 * n_params_;
    for (auto& o : optimizers_) o.reset(static_cast<std::size_t>(n_params_));
    check_coherence();
}

}  // namespace mgpde
