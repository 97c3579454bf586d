#pragma once

#include "dps/example.hpp"
#include "dps/model.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace dps {

// Preference Contribution Scores: mean increase of the target NLL when a
// single head is fully ablated, one score per (layer, head).
struct PcsTable {
    uint32_t            num_layers = 0;
    uint32_t            num_heads  = 0;
    std::vector<double> scores; // layer-major
    size_t              num_examples      = 0;
    uint64_t            model_fingerprint = 0;

    double at(HeadId h) const { return scores[size_t{h.layer} * num_heads + h.head]; }
    double at(uint32_t layer, uint32_t head) const { return scores[size_t{layer} * num_heads + head]; }
    size_t total_heads() const { return scores.size(); }

    bool operator==(const PcsTable &) const = default;
};

// Heads in descending PCS order, ties broken by ascending (layer, head).
struct HeadSet {
    std::vector<HeadId> heads;
    size_t              k = 0;

    bool contains(HeadId h) const;
    bool operator==(const HeadSet &) const = default;
};

// One table per example (num_examples == 1). The baseline pass is run once
// per example and its residual stream reused, so each head only re-runs the
// layers from its own onward.
std::vector<PcsTable> per_example_pcs(const ModelCheckpoint & checkpoint, std::span<const Example> dataset,
                                      size_t threads = 1);

// Mean of a set of tables. Sums are exact (correctly rounded), so the result
// does not depend on example order or duplication.
PcsTable average_pcs(std::span<const PcsTable> tables);
PcsTable average_pcs(std::span<const PcsTable> tables, std::span<const size_t> indices);

// Throws ErrorKind::input on an empty dataset.
PcsTable compute_pcs(const ModelCheckpoint & checkpoint, std::span<const Example> dataset, size_t threads = 1);

// Top-k heads. Warns when k exceeds the head count or when the selection has
// to include non-positive scores.
HeadSet select_heads(const PcsTable & pcs, size_t k);

double                           jaccard(const HeadSet & a, const HeadSet & b);
std::vector<std::vector<double>> overlap_matrix(std::span<const HeadSet> sets);
std::vector<std::vector<double>> k_sweep_stability(const PcsTable & pcs, std::span<const size_t> ks);

// Correctly rounded sum of doubles (Shewchuk partials).
double exact_sum(std::span<const double> values);

void     save_pcs(const PcsTable & pcs, const std::filesystem::path & path);
PcsTable load_pcs(const std::filesystem::path & path);
void     save_head_set(const HeadSet & heads, const std::filesystem::path & path);
HeadSet  load_head_set(const std::filesystem::path & path);

} // namespace dps
