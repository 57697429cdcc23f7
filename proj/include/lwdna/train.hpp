#pragma once

#include <optional>

#include "lwdna/data.hpp"
#include "lwdna/model.hpp"
#include "lwdna/optim.hpp"
#include "lwdna/shrink.hpp"

namespace lwdna {

struct KdSettings {
    double lambda = 0.4;
    double temperature = 4.0;
    std::string teacher_checkpoint;   // informational; the teacher model is passed to train()
};

/// Everything that defines a training run. A baseline/shrunk comparison pair
/// must share one protocol; the hash is embedded in every log to enforce it.
struct TrainProtocol {
    int epochs = 30;
    int batch_size = 64;
    double base_lr = 0.1;
    LrSchedule::Kind schedule = LrSchedule::Kind::Step;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    bool horizontal_flip = true;
    bool pad_crop = true;
    int pad = 4;
    std::optional<KdSettings> kd;
    uint64_t seed = 0;
};

uint64_t protocol_hash(const TrainProtocol& p);

struct EpochRow {
    int epoch;
    double lr;
    double train_loss;
    double train_err;   // percent
    double test_err;    // percent
    double wallclock;   // seconds since training started
};

struct TrainLog {
    uint64_t protocol_hash = 0;
    std::vector<EpochRow> rows;
    double final_test_err = 0.0;
    double final_test_loss = 0.0;
};

struct EvalResult {
    double top1_err;   // percent
    double loss;
};

/// Top-1 error and mean loss; ties in the argmax go to the lowest index.
/// `threads` > 1 splits batches across workers (results merged in batch
/// order, so the outcome is identical to a sequential run).
EvalResult evaluate(Model& model, const Dataset& data, int batch_size = 256, int threads = 1);

/// SGD training under the protocol. Aborts with epoch/batch coordinates when
/// the loss goes non-finite. `teacher` must be non-null when protocol.kd is
/// set; teacher logits are constants.
TrainLog train(Model& model, const Dataset& train_set, const Dataset& test_set,
               const TrainProtocol& protocol, Model* teacher = nullptr, int eval_threads = 1);

std::string train_log_csv(const TrainLog& log);

struct ComparisonSummary {
    int schema_version = 1;
    std::string arch_name;
    uint64_t seed = 0;
    std::string protocol_hash_hex;
    ChannelConfig baseline_config, shrunk_config;
    double baseline_top1_err = 0.0, shrunk_top1_err = 0.0;
    int64_t baseline_flops = 0, baseline_params = 0;
    int64_t shrunk_flops = 0, shrunk_params = 0;
    double flops_ratio = 0.0, params_ratio = 0.0;
    double threshold = 0.0;
    int64_t budget_flops = 0;
};

/// Cross-checks the two logs' embedded protocol hashes (refuses a mismatched
/// pair) and assembles the summary.
ComparisonSummary make_summary(const ShrinkReport& shrink, const TrainLog& baseline_log,
                               const TrainLog& shrunk_log, const TrainProtocol& protocol,
                               const ArchSpec& arch, int input_hw, uint64_t seed);

std::string summary_json(const ComparisonSummary& s);

struct CompareOutcome {
    ShrinkReport shrink;
    TrainLog baseline_log, shrunk_log;
    ComparisonSummary summary;
};

/// The full experiment: shrink once, then train baseline(c) and shrunk(c')
/// from scratch under the byte-identical protocol.
CompareOutcome compare_run(const ArchSpec& arch, const TrainProtocol& protocol, double beta, int m,
                           const Floors& floors, const Budget& budget, Criterion criterion,
                           const Dataset& train_set, const Dataset& test_set, uint64_t seed,
                           Model* teacher = nullptr, int eval_threads = 1);

} // namespace lwdna
