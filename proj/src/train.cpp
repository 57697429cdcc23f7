#include "lwdna/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace lwdna {

uint64_t protocol_hash(const TrainProtocol& p) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "epochs=%d;batch=%d;lr=%.17g;sched=%s;mom=%.17g;wd=%.17g;flip=%d;padcrop=%d;pad=%d;"
                  "kd=%d;kdl=%.17g;kdt=%.17g;seed=%llu",
                  p.epochs, p.batch_size, p.base_lr,
                  p.schedule == LrSchedule::Kind::Step ? "step" : "cosine", p.momentum, p.weight_decay,
                  p.horizontal_flip ? 1 : 0, p.pad_crop ? 1 : 0, p.pad, p.kd ? 1 : 0,
                  p.kd ? p.kd->lambda : 0.0, p.kd ? p.kd->temperature : 0.0,
                  static_cast<unsigned long long>(p.seed));
    // FNV-1a 64
    uint64_t h = 1469598103934665603ULL;
    for (const char* c = buf; *c; ++c) {
        h ^= static_cast<unsigned char>(*c);
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

int argmax_row(const double* row, int K) {
    int best = 0;
    for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
    return best;
}

struct BatchEval {
    int errors = 0;
    double loss_sum = 0.0;   // loss * batch size
};

BatchEval eval_batch(Model& model, const Dataset& data, const std::vector<int>& indices) {
    Tape tape;
    auto [images, labels] = take_batch(data, indices);
    Tensor logits = model.forward(tape, images, false);
    Tensor loss = cross_entropy(tape, logits, labels);
    BatchEval r;
    const int N = images.dim(0), K = logits.dim(1);
    for (int i = 0; i < N; ++i)
        if (argmax_row(logits.ptr() + static_cast<size_t>(i) * K, K) != labels[static_cast<size_t>(i)]) ++r.errors;
    r.loss_sum = loss.item() * N;
    return r;
}

} // namespace

EvalResult evaluate(Model& model, const Dataset& data, int batch_size, int threads) {
    const int N = data.size();
    if (N == 0) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < N; start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(N, start + batch_size); ++i) idx.push_back(i);
        batches.push_back(std::move(idx));
    }
    std::vector<BatchEval> results(batches.size());
    if (threads <= 1 || batches.size() == 1) {
        for (size_t b = 0; b < batches.size(); ++b) results[b] = eval_batch(model, data, batches[b]);
    } else {
        // eval-mode forward is pure; batches are merged in index order so the
        // result matches a sequential run exactly
        const int T = std::min<int>(threads, static_cast<int>(batches.size()));
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < T; ++t)
            pool.emplace_back([&]() {
                for (;;) {
                    const size_t b = next.fetch_add(1);
                    if (b >= batches.size()) return;
                    results[b] = eval_batch(model, data, batches[b]);
                }
            });
        for (auto& th : pool) th.join();
    }
    int errors = 0;
    double loss_sum = 0.0;
    for (const auto& r : results) {
        errors += r.errors;
        loss_sum += r.loss_sum;
    }
    return EvalResult{100.0 * errors / N, loss_sum / N};
}

TrainLog train(Model& model, const Dataset& train_set, const Dataset& test_set,
               const TrainProtocol& protocol, Model* teacher, int eval_threads) {
    if (protocol.kd && !teacher)
        throw std::invalid_argument("train: knowledge distillation requested but no teacher given");
    if (protocol.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");

    TrainLog log;
    log.protocol_hash = protocol_hash(protocol);

    LrSchedule sched = protocol.schedule == LrSchedule::Kind::Step
                           ? LrSchedule::step_half_three_quarters(protocol.base_lr, protocol.epochs)
                           : LrSchedule::cosine(protocol.base_lr, protocol.epochs);
    std::vector<Tensor> params = model.parameters();
    Sgd opt(protocol.base_lr, protocol.momentum, protocol.weight_decay);
    Rng order_rng(Rng::derive(protocol.seed, 0x6f72646572ULL));
    Rng aug_rng(Rng::derive(protocol.seed, 0x617567ULL));

    const auto t0 = std::chrono::steady_clock::now();
    const int N = train_set.size();
    std::vector<int> indices(static_cast<size_t>(N));
    std::iota(indices.begin(), indices.end(), 0);

    for (int epoch = 0; epoch < protocol.epochs; ++epoch) {
        const double lr = lr_at(sched, epoch);
        opt.set_lr(lr);
        // Fisher-Yates with the run RNG
        for (int i = N - 1; i > 0; --i)
            std::swap(indices[static_cast<size_t>(i)], indices[static_cast<size_t>(order_rng.uniform_int(0, i))]);

        double loss_sum = 0.0;
        int err_count = 0, seen = 0, batch_index = 0;
        for (int start = 0; start < N; start += protocol.batch_size, ++batch_index) {
            std::vector<int> batch_idx(indices.begin() + start,
                                       indices.begin() + std::min(N, start + protocol.batch_size));
            auto [images, labels] = take_batch(train_set, batch_idx);
            if (protocol.horizontal_flip || protocol.pad_crop)
                images = augment(images, aug_rng, protocol.horizontal_flip, protocol.pad_crop, protocol.pad);

            Tape tape;
            Tensor logits = model.forward(tape, images, true);
            Tensor loss;
            if (protocol.kd) {
                Tape teacher_tape;
                Tensor tlogits = teacher->forward(teacher_tape, images, false);
                tlogits.requires_grad = false;
                loss = kd_loss(tape, logits, tlogits, labels, protocol.kd->lambda, protocol.kd->temperature);
            } else {
                loss = cross_entropy(tape, logits, labels);
            }
            const double lval = loss.item();
            if (!std::isfinite(lval))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                         " batch " + std::to_string(batch_index));
            Sgd::zero_grads(params);
            tape.backward(loss);
            opt.step(params);

            const int B = images.dim(0), K = logits.dim(1);
            loss_sum += lval * B;
            for (int i = 0; i < B; ++i)
                if (argmax_row(logits.ptr() + static_cast<size_t>(i) * K, K) != labels[static_cast<size_t>(i)])
                    ++err_count;
            seen += B;
        }

        const EvalResult ev = evaluate(model, test_set, 256, eval_threads);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.rows.push_back(EpochRow{epoch, lr, loss_sum / seen, 100.0 * err_count / seen, ev.top1_err, wall});
        log.final_test_err = ev.top1_err;
        log.final_test_loss = ev.loss;
    }

    if (protocol.epochs == 0) {
        const EvalResult ev = evaluate(model, test_set, 256, eval_threads);
        log.final_test_err = ev.top1_err;
        log.final_test_loss = ev.loss;
    }
    return log;
}

std::string train_log_csv(const TrainLog& log) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,train_err,test_err,wallclock\n";
    char buf[160];
    for (const auto& r : log.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6f,%.4f,%.4f,%.3f\n", r.epoch, r.lr, r.train_loss,
                      r.train_err, r.test_err, r.wallclock);
        os << buf;
    }
    return os.str();
}

namespace {

std::string hash_hex(uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace

ComparisonSummary make_summary(const ShrinkReport& shrink, const TrainLog& baseline_log,
                               const TrainLog& shrunk_log, const TrainProtocol& protocol,
                               const ArchSpec& arch, int input_hw, uint64_t seed) {
    if (baseline_log.protocol_hash != shrunk_log.protocol_hash)
        throw std::invalid_argument("make_summary: the two runs used different protocols (hash " +
                                    hash_hex(baseline_log.protocol_hash) + " vs " +
                                    hash_hex(shrunk_log.protocol_hash) + ")");
    if (baseline_log.protocol_hash != protocol_hash(protocol))
        throw std::invalid_argument("make_summary: logs do not match the declared protocol");

    ComparisonSummary s;
    s.arch_name = arch.name;
    s.seed = seed;
    s.protocol_hash_hex = hash_hex(baseline_log.protocol_hash);
    s.baseline_config = shrink.config_baseline;
    s.shrunk_config = shrink.config_shrunk;
    s.baseline_top1_err = baseline_log.final_test_err;
    s.shrunk_top1_err = shrunk_log.final_test_err;
    const RatioReport rr = ratio_report(shrink.config_baseline, shrink.config_shrunk, arch, input_hw);
    s.baseline_flops = rr.base_flops;
    s.baseline_params = rr.base_params;
    s.shrunk_flops = rr.new_flops;
    s.shrunk_params = rr.new_params;
    s.flops_ratio = rr.flops_ratio;
    s.params_ratio = rr.params_ratio;
    s.threshold = shrink.threshold;
    s.budget_flops = shrink.budget_flops;
    return s;
}

std::string summary_json(const ComparisonSummary& s) {
    nlohmann::json j;
    j["schema_version"] = s.schema_version;
    j["arch"] = s.arch_name;
    j["seed"] = s.seed;
    j["protocol_hash"] = s.protocol_hash_hex;
    j["budget_flops"] = s.budget_flops;
    j["threshold"] = s.threshold;
    j["baseline"] = {{"config", s.baseline_config},
                     {"top1_err", s.baseline_top1_err},
                     {"flops", s.baseline_flops},
                     {"params", s.baseline_params}};
    j["lwdna"] = {{"config", s.shrunk_config},
                  {"top1_err", s.shrunk_top1_err},
                  {"flops", s.shrunk_flops},
                  {"params", s.shrunk_params}};
    j["ratios"] = {{"flops", s.flops_ratio}, {"params", s.params_ratio}};
    return j.dump(2) + "\n";
}

CompareOutcome compare_run(const ArchSpec& arch, const TrainProtocol& protocol, double beta, int m,
                           const Floors& floors, const Budget& budget, Criterion criterion,
                           const Dataset& train_set, const Dataset& test_set, uint64_t seed,
                           Model* teacher, int eval_threads) {
    const int input_hw = train_set.hw();

    // scoring batch: one training batch drawn with the run seed
    Rng batch_rng(Rng::derive(seed, 0x7363627463ULL));
    BatchSource source = [&]() {
        std::vector<int> pool(static_cast<size_t>(train_set.size()));
        std::iota(pool.begin(), pool.end(), 0);
        for (int i = train_set.size() - 1; i > 0; --i)
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(batch_rng.uniform_int(0, i))]);
        pool.resize(static_cast<size_t>(std::min(protocol.batch_size, train_set.size())));
        return take_batch(train_set, pool);
    };

    CompareOutcome out;
    out.shrink = shrink_pipeline(arch, beta, m, floors, budget, criterion, seed, source, input_hw);

    // both models draw their fresh init from the same stream: identical
    // configs under equal seeds give bitwise-identical runs
    Model baseline(arch, out.shrink.config_baseline, Rng::derive(seed, 0x696e6974ULL));
    out.baseline_log = train(baseline, train_set, test_set, protocol, teacher, eval_threads);

    Model shrunk(arch, out.shrink.config_shrunk, Rng::derive(seed, 0x696e6974ULL));
    out.shrunk_log = train(shrunk, train_set, test_set, protocol, teacher, eval_threads);

    out.summary = make_summary(out.shrink, out.baseline_log, out.shrunk_log, protocol, arch, input_hw, seed);
    return out;
}

} // namespace lwdna
