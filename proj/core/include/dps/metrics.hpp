#pragma once

#include "dps/decoder.hpp"
#include "dps/discovery.hpp"
#include "dps/example.hpp"
#include "dps/model.hpp"
#include "dps/synth.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dps {

struct Interval {
    double mean  = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    size_t n     = 0;

    bool operator==(const Interval &) const = default;
};

// Student-t interval for the mean. A single sample gives a point interval.
Interval t_interval(std::span<const double> samples, double confidence = 0.95);
bool     overlaps(const Interval & a, const Interval & b);

// ---- causal validation ------------------------------------------------------

struct CausalCondition {
    std::string         name;   // top_pcs | random_heads | random_mask
    std::vector<double> deltas; // mean NLL increase, one per seed (one value for top_pcs)
    Interval            interval;
};

struct CausalValidation {
    size_t                       k        = 0;
    double                       base_nll = 0.0;
    std::vector<uint64_t>        seeds;
    std::vector<CausalCondition> conditions;

    const CausalCondition & condition(std::string_view name) const;
};

// Mean per-example target NLL under `suppression`.
double mean_nll(const ModelCheckpoint & checkpoint, std::span<const Example> dataset,
                const SuppressionMap & suppression, size_t threads = 1);

// Compares ablating the top-k PCS heads with k random heads and with a random
// continuous map of the same L1 mass, one random draw per seed. Needs at
// least 5 seeds.
CausalValidation causal_validation(const ModelCheckpoint & checkpoint, std::span<const Example> dataset,
                                   const PcsTable & pcs, size_t k, std::span<const uint64_t> seeds,
                                   size_t threads = 1);

// ---- teacher-forced steering metrics -----------------------------------------

struct UserMetrics {
    std::string user_id;
    double      nll       = 0.0; // mean per-token NLL of the reference target
    double      alignment = 0.0; // mean preferred-vocabulary mass of the decoding distribution

    bool operator==(const UserMetrics &) const = default;
};

struct SweepRow {
    std::string              method;
    double                   gamma = 0.0;
    size_t                   k     = 0;
    std::string              routing;
    double                   mean_nll       = 0.0; // over users
    double                   mean_alignment = 0.0; // over users
    std::vector<UserMetrics> users;                // sorted by user_id

    bool operator==(const SweepRow &) const = default;
};

// Fraction of users whose alignment in `row` strictly exceeds `base`.
double improved_fraction(const SweepRow & base, const SweepRow & row);

using SuppressionFor = std::function<const SuppressionMap &(const std::string & user_id)>;

// Scores the decoding distribution at every target position of each example,
// teacher-forced on the reference target. The unsuppressed logits are
// computed once at construction and shared by every sweep.
class SteeringEvaluator {
public:
    SteeringEvaluator(const ModelCheckpoint & checkpoint, std::span<const Example> eval, const UserSpecs & specs,
                      size_t threads = 1);
    ~SteeringEvaluator();
    SteeringEvaluator(const SteeringEvaluator &)             = delete;
    SteeringEvaluator & operator=(const SteeringEvaluator &) = delete;

    SweepRow vanilla() const;

    // Rows sorted by gamma (stable for duplicates). gammas must contain 0.
    std::vector<SweepRow> dps(const SuppressionFor & suppression, std::span<const double> gammas,
                              const std::string & method, size_t k, const std::string & routing) const;

    // Contrast against the same example encoded without its profile.
    std::vector<SweepRow> context_contrast(std::span<const double> gammas) const;

    // One row per k: binary ablation of the top-k heads of `pcs` at `gamma`.
    std::vector<SweepRow> k_sweep(const PcsTable & pcs, std::span<const size_t> ks, double gamma) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::vector<SweepRow> gamma_sweep(const ModelCheckpoint & checkpoint, std::span<const Example> eval,
                                  const UserSpecs & specs, const SuppressionMap & suppression,
                                  std::span<const double> gammas, size_t threads = 1);

// Per-user mean alignment of sampled continuations: the first `per_user`
// eval examples of each user are decoded with dps_decode, each with its own
// derived seed. Users are in sorted order.
std::vector<UserMetrics> generation_alignment(const ModelCheckpoint & checkpoint, std::span<const Example> eval,
                                              const UserSpecs & specs, const SuppressionFor & suppression,
                                              const DecodeConfig & config, size_t per_user, size_t threads = 1);

// ---- PCS sparsity ------------------------------------------------------------

struct SparsityStats {
    size_t k                 = 0;
    double top_k_mass        = 0.0; // top-k positive mass / total positive mass
    double excess_kurtosis   = 0.0;
    double positive_fraction = 0.0;
    bool   degenerate        = false; // no positive mass

    bool operator==(const SparsityStats &) const = default;
};

SparsityStats pcs_sparsity_stats(const PcsTable & pcs, size_t k);

// Control: expected positive mass fraction captured by k heads chosen
// uniformly at random, averaged over `draws` draws.
double random_subset_mass(const PcsTable & pcs, size_t k, uint64_t seed, size_t draws = 1000);

} // namespace dps
