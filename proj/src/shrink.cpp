#include "lwdna/shrink.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace lwdna {

const char* criterion_str(Criterion c) {
    return c == Criterion::Gradient ? "gradient" : "magnitude";
}

Criterion criterion_from(const std::string& s) {
    if (s == "gradient") return Criterion::Gradient;
    if (s == "magnitude") return Criterion::Magnitude;
    throw std::invalid_argument("unknown criterion '" + s + "'");
}

SaliencyMap score_gradients(HyperNet& net, const Tensor& images, const std::vector<int>& labels,
                            LossKind kind, double loss_scale, ScoreAudit* audit) {
    (void)kind;   // softmax cross-entropy is the only classification loss here
    if (!images.defined() || images.dim(0) == 0 || labels.empty())
        throw std::invalid_argument("score_gradients: empty batch");
    for (const auto& z : net.latents())
        if (z->trainable) z->values.zero_grad();

    Tape tape;
    Tensor logits = net.forward(tape, images, true);
    Tensor loss = cross_entropy(tape, logits, labels);
    if (loss_scale != 1.0) loss = scale(tape, loss, loss_scale);
    tape.backward(loss);
    if (audit) {
        audit->forward_passes = tape.forward_marks();
        audit->backward_passes = tape.backward_calls();
    }

    SaliencyMap map;
    map.criterion = Criterion::Gradient;
    map.by_latent.resize(net.latents().size());
    const double inf = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < net.latents().size(); ++i) {
        const auto& z = net.latents()[i];
        auto& s = map.by_latent[i];
        s.assign(static_cast<size_t>(z->length()), inf);
        if (!z->prunable) continue;
        for (int e = 0; e < z->length(); ++e)
            s[static_cast<size_t>(e)] = z->values.grad ? std::fabs((*z->values.grad)[static_cast<size_t>(e)]) : 0.0;
    }
    return map;
}

SaliencyMap score_magnitude(const HyperNet& net) {
    SaliencyMap map;
    map.criterion = Criterion::Magnitude;
    map.by_latent.resize(net.latents().size());
    const double inf = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < net.latents().size(); ++i) {
        const auto& z = net.latents()[i];
        auto& s = map.by_latent[i];
        s.assign(static_cast<size_t>(z->length()), inf);
        if (!z->prunable) continue;
        for (int e = 0; e < z->length(); ++e)
            s[static_cast<size_t>(e)] = std::fabs((*z->values.data)[static_cast<size_t>(e)]);
    }
    return map;
}

namespace {

// ceil with a small guard so fractions that are mathematically integral do
// not round up from fp noise
int ceil_frac(double frac, int n) {
    return static_cast<int>(std::ceil(frac * n - 1e-9));
}

} // namespace

std::vector<int> floor_counts(const HyperNet& net, const Floors& floors) {
    if (floors.rho <= 0.0 || floors.rho > 1.0 || floors.tau <= 0.0 || floors.tau > 1.0)
        throw std::invalid_argument("floors: rho and tau must lie in (0,1]");
    const ArchSpec& arch = net.arch();
    std::vector<int> counts(net.latents().size(), 0);
    std::vector<int> baseline_c(net.latents().size(), 0);
    for (size_t i = 0; i < net.latents().size(); ++i)
        counts[i] = net.latents()[i]->prunable ? 0 : net.latents()[i]->length();
    // representative baseline width per latent = its group's (equal) width
    for (int l = 0; l < arch.num_layers(); ++l) {
        const int id = net.out_latent(l)->id;
        baseline_c[static_cast<size_t>(id)] = arch.default_config[static_cast<size_t>(l)];
    }
    const int head_id = net.head_latent()->id;
    for (size_t i = 0; i < net.latents().size(); ++i) {
        const auto& z = net.latents()[i];
        if (!z->prunable) continue;
        const int wide = z->length();
        const int c = baseline_c[i];
        int fl = std::max(ceil_frac(floors.rho, wide), ceil_frac(floors.rho * net.beta(), c));
        if (static_cast<int>(i) == head_id)
            fl = std::max(fl, std::max(ceil_frac(floors.tau, wide), ceil_frac(floors.tau * net.beta(), c)));
        counts[i] = std::min(wide, std::max(1, fl));
    }
    return counts;
}

KeepMasks build_keep_masks(const SaliencyMap& scores, double threshold, const Floors& floors,
                           const HyperNet& net) {
    if (threshold < 0.0)
        throw std::invalid_argument("build_keep_masks: threshold must be >= 0");
    if (scores.by_latent.size() != net.latents().size())
        throw std::invalid_argument("build_keep_masks: score map does not match latent count");
    const std::vector<int> floors_of = floor_counts(net, floors);

    KeepMasks masks(net.latents().size());
    for (size_t i = 0; i < net.latents().size(); ++i) {
        const auto& z = net.latents()[i];
        const auto& s = scores.by_latent[i];
        if (static_cast<int>(s.size()) != z->length())
            throw std::invalid_argument("build_keep_masks: score length mismatch for latent " + std::to_string(i));
        auto& keep = masks[i];
        keep.assign(s.size(), false);
        if (!z->prunable) {
            keep.assign(s.size(), true);
            continue;
        }
        int count = 0;
        for (size_t e = 0; e < s.size(); ++e)
            if (s[e] >= threshold) {
                keep[e] = true;
                ++count;
            }
        const int fl = floors_of[i];
        if (count < fl) {
            // floor binds: keep the fl best-scoring elements, lower index first on ties
            std::vector<int> order(s.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&s](int a, int b) {
                return s[static_cast<size_t>(a)] > s[static_cast<size_t>(b)];
            });
            keep.assign(s.size(), false);
            for (int r = 0; r < fl; ++r) keep[static_cast<size_t>(order[static_cast<size_t>(r)])] = true;
        }
    }
    return masks;
}

namespace {

int64_t flops_of_masks(const HyperNet& net, const KeepMasks& masks, int input_hw) {
    return model_cost(net.arch(), masked_config(net, masks), input_hw).total_flops;
}

} // namespace

ThresholdResult search_threshold(const SaliencyMap& scores, const Budget& budget, const Floors& floors,
                                 const HyperNet& net, int input_hw) {
    std::set<double> distinct;
    for (size_t i = 0; i < net.latents().size(); ++i) {
        if (!net.latents()[i]->prunable) continue;
        for (double s : scores.by_latent[i]) distinct.insert(s);
    }
    std::vector<double> candidates;
    candidates.push_back(0.0);
    for (double s : distinct) candidates.push_back(s);
    if (!distinct.empty())
        candidates.push_back(std::nextafter(*distinct.rbegin(), std::numeric_limits<double>::infinity()));

    auto result_at = [&](size_t idx) {
        ThresholdResult r;
        r.threshold = candidates[idx];
        r.masks = build_keep_masks(scores, r.threshold, floors, net);
        r.config = masked_config(net, r.masks);
        r.flops = model_cost(net.arch(), r.config, input_hw).total_flops;
        return r;
    };

    ThresholdResult lo_res = result_at(0);
    if (lo_res.flops <= budget.target_flops) return lo_res;   // budget covers the full wide net

    ThresholdResult hi_res = result_at(candidates.size() - 1);
    if (hi_res.flops > budget.target_flops)
        throw InfeasibleBudget(hi_res.flops, budget.target_flops);

    // flops are non-increasing in the threshold: bisect for the first
    // candidate that fits
    size_t lo = 0, hi = candidates.size() - 1;
    while (hi - lo > 1) {
        const size_t mid = lo + (hi - lo) / 2;
        if (flops_of_masks(net, build_keep_masks(scores, candidates[mid], floors, net), input_hw) <=
            budget.target_flops)
            hi = mid;
        else
            lo = mid;
    }
    return result_at(hi);
}

bool maximality_witness(const SaliencyMap& scores, const ThresholdResult& result, const Budget& budget,
                        const HyperNet& net, int input_hw) {
    // locate the highest-scoring pruned element across prunable latents
    int best_latent = -1, best_elem = -1;
    double best_score = -1.0;
    for (size_t i = 0; i < net.latents().size(); ++i) {
        if (!net.latents()[i]->prunable) continue;
        const auto& keep = result.masks[i];
        const auto& s = scores.by_latent[i];
        for (size_t e = 0; e < keep.size(); ++e)
            if (!keep[e] && s[e] > best_score) {
                best_score = s[e];
                best_latent = static_cast<int>(i);
                best_elem = static_cast<int>(e);
            }
    }
    if (best_latent < 0) return true;   // nothing pruned
    KeepMasks restored = result.masks;
    restored[static_cast<size_t>(best_latent)][static_cast<size_t>(best_elem)] = true;
    return flops_of_masks(net, restored, input_hw) > budget.target_flops;
}

ShrinkReport shrink_pipeline(const ArchSpec& arch, double beta, int m, const Floors& floors,
                             const Budget& budget, Criterion criterion, uint64_t seed,
                             const BatchSource& batch_source, int input_hw, ScoreAudit* audit) {
    HyperNet net = HyperNet::init(arch, beta, m, seed);
    SaliencyMap scores;
    if (criterion == Criterion::Gradient) {
        auto [images, labels] = batch_source();
        scores = score_gradients(net, images, labels, LossKind::CrossEntropy, 1.0, audit);
    } else {
        scores = score_magnitude(net);
    }
    ThresholdResult found = search_threshold(scores, budget, floors, net, input_hw);
    ShrunkNet shrunk = materialize_shrunk(net, found.masks);
    if (shrunk.config != found.config)
        throw std::logic_error("shrink_pipeline: materialized configuration disagrees with search");

    ShrinkReport rep;
    rep.arch_name = arch.name;
    rep.input_hw = input_hw;
    rep.seed = seed;
    rep.criterion = criterion;
    rep.beta = beta;
    rep.m = m;
    rep.rho = floors.rho;
    rep.tau = floors.tau;
    rep.budget_flops = budget.target_flops;
    rep.threshold = found.threshold;
    rep.config_baseline = arch.default_config;
    rep.config_wide = net.wide_config();
    rep.config_shrunk = found.config;
    const CostReport base = model_cost(arch, arch.default_config, input_hw);
    const CostReport wide = model_cost(arch, net.wide_config(), input_hw);
    const CostReport cut = model_cost(arch, found.config, input_hw);
    rep.baseline_flops = base.total_flops;
    rep.baseline_params = base.total_params;
    rep.wide_flops = wide.total_flops;
    rep.wide_params = wide.total_params;
    rep.shrunk_flops = cut.total_flops;
    rep.shrunk_params = cut.total_params;
    for (int l = 0; l < arch.num_layers(); ++l) {
        ShrinkLayerRow row;
        row.layer = l;
        row.baseline_channels = arch.default_config[static_cast<size_t>(l)];
        row.wide_channels = net.wide_config()[static_cast<size_t>(l)];
        row.kept_channels = found.config[static_cast<size_t>(l)];
        row.percent_of_baseline = 100.0 * row.kept_channels / row.baseline_channels;
        row.keep = found.masks[static_cast<size_t>(net.out_latent(l)->id)];
        rep.layers.push_back(std::move(row));
    }
    return rep;
}

std::string shrink_report_json(const ShrinkReport& rep) {
    nlohmann::json j;
    j["schema_version"] = rep.schema_version;
    j["arch"] = rep.arch_name;
    j["input_hw"] = rep.input_hw;
    j["seed"] = rep.seed;
    j["criterion"] = criterion_str(rep.criterion);
    j["beta"] = rep.beta;
    j["m"] = rep.m;
    j["rho"] = rep.rho;
    j["tau"] = rep.tau;
    j["budget_flops"] = rep.budget_flops;
    j["threshold"] = rep.threshold;
    j["config_baseline"] = rep.config_baseline;
    j["config_wide"] = rep.config_wide;
    j["config_shrunk"] = rep.config_shrunk;
    j["flops"] = {{"baseline", rep.baseline_flops}, {"wide", rep.wide_flops}, {"shrunk", rep.shrunk_flops}};
    j["params"] = {{"baseline", rep.baseline_params}, {"wide", rep.wide_params}, {"shrunk", rep.shrunk_params}};
    j["flops_ratio_vs_baseline"] = 100.0 * static_cast<double>(rep.shrunk_flops) / static_cast<double>(rep.baseline_flops);
    j["params_ratio_vs_baseline"] = 100.0 * static_cast<double>(rep.shrunk_params) / static_cast<double>(rep.baseline_params);
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& row : rep.layers) {
        std::string mask;
        mask.reserve(row.keep.size());
        for (bool k : row.keep) mask.push_back(k ? '1' : '0');
        layers.push_back({{"layer", row.layer},
                          {"baseline_channels", row.baseline_channels},
                          {"wide_channels", row.wide_channels},
                          {"kept_channels", row.kept_channels},
                          {"percent_of_baseline", row.percent_of_baseline},
                          {"keep_mask", mask}});
    }
    j["layers"] = layers;
    return j.dump(2) + "\n";
}

std::string channels_csv(const ShrinkReport& rep) {
    std::ostringstream os;
    os << "layer_index,wide_channels,kept_channels,percent_of_baseline\n";
    char buf[64];
    for (const auto& row : rep.layers) {
        std::snprintf(buf, sizeof(buf), "%.2f", row.percent_of_baseline);
        os << row.layer << "," << row.wide_channels << "," << row.kept_channels << "," << buf << "\n";
    }
    return os.str();
}

} // namespace lwdna
