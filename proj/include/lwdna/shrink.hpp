#pragma once

#include <functional>
#include <stdexcept>

#include "lwdna/complexity.hpp"
#include "lwdna/hypernet.hpp"

namespace lwdna {

enum class Criterion { Gradient, Magnitude };

const char* criterion_str(Criterion c);
Criterion criterion_from(const std::string& s);

enum class LossKind { CrossEntropy };

/// Per-latent non-negative scores; non-prunable latents carry +inf so they
/// are never selected for removal.
struct SaliencyMap {
    Criterion criterion = Criterion::Gradient;
    std::vector<std::vector<double>> by_latent;
};

/// Minimum surviving fractions: rho for conv output latents, tau for the
/// latent feeding the final classifier (which takes the larger of the two).
struct Floors {
    double rho = 0.4;
    double tau = 0.45;
};

struct Budget {
    int64_t target_flops = 0;
};

struct InfeasibleBudget : std::runtime_error {
    int64_t floor_flops;
    int64_t target_flops;
    InfeasibleBudget(int64_t floor_f, int64_t target)
        : std::runtime_error("infeasible budget: floor configuration needs " + std::to_string(floor_f) +
                             " flops but the target is " + std::to_string(target)),
          floor_flops(floor_f), target_flops(target) {}
};

struct ScoreAudit {
    int forward_passes = 0;
    int backward_passes = 0;
};

/// |dL/dz| per latent element from exactly one forward and one backward pass
/// of the given mini-batch. Deterministic under (net, batch).
SaliencyMap score_gradients(HyperNet& net, const Tensor& images, const std::vector<int>& labels,
                            LossKind kind = LossKind::CrossEntropy, double loss_scale = 1.0,
                            ScoreAudit* audit = nullptr);

/// |z| per element; ignores W1/W2 entirely.
SaliencyMap score_magnitude(const HyperNet& net);

/// Minimum kept elements per latent under the floors (full length for
/// non-prunable latents).
std::vector<int> floor_counts(const HyperNet& net, const Floors& floors);

/// keep = {score >= threshold}, topped up to the floor by highest score
/// (ties keep the lower index) when the threshold cuts below it.
KeepMasks build_keep_masks(const SaliencyMap& scores, double threshold, const Floors& floors,
                           const HyperNet& net);

struct ThresholdResult {
    double threshold = 0.0;
    KeepMasks masks;
    ChannelConfig config;
    int64_t flops = 0;
};

/// Smallest threshold whose configuration fits the budget — equivalently the
/// maximal-FLOPs keep set with flops <= target. Binary search over the
/// sorted distinct score values; identical to an exhaustive scan. Throws
/// InfeasibleBudget when even the floor configuration exceeds the target.
ThresholdResult search_threshold(const SaliencyMap& scores, const Budget& budget, const Floors& floors,
                                 const HyperNet& net, int input_hw);

/// True when the solution is element-maximal: either nothing was pruned, or
/// restoring the single highest-scoring pruned element would break the budget.
bool maximality_witness(const SaliencyMap& scores, const ThresholdResult& result, const Budget& budget,
                        const HyperNet& net, int input_hw);

struct ShrinkLayerRow {
    int layer;
    int baseline_channels;
    int wide_channels;
    int kept_channels;
    double percent_of_baseline;
    std::vector<bool> keep;
};

struct ShrinkReport {
    int schema_version = 1;
    std::string arch_name;
    int input_hw = 0;
    uint64_t seed = 0;
    Criterion criterion = Criterion::Gradient;
    double beta = 1.0;
    int m = 8;
    double rho = 0.4, tau = 0.45;
    int64_t budget_flops = 0;
    double threshold = 0.0;
    ChannelConfig config_baseline, config_wide, config_shrunk;
    int64_t baseline_flops = 0, baseline_params = 0;
    int64_t wide_flops = 0, wide_params = 0;
    int64_t shrunk_flops = 0, shrunk_params = 0;
    std::vector<ShrinkLayerRow> layers;
};

using BatchSource = std::function<std::pair<Tensor, std::vector<int>>()>;

/// init -> score -> threshold search -> materialize. The batch source is
/// consumed exactly once (gradient criterion; the magnitude baseline needs
/// no data at all).
ShrinkReport shrink_pipeline(const ArchSpec& arch, double beta, int m, const Floors& floors,
                             const Budget& budget, Criterion criterion, uint64_t seed,
                             const BatchSource& batch_source, int input_hw,
                             ScoreAudit* audit = nullptr);

std::string shrink_report_json(const ShrinkReport& report);
std::string channels_csv(const ShrinkReport& report);

} // namespace lwdna
