#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lwdna/train.hpp"

using namespace lwdna;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> idx_images(int n, int h, int w, unsigned char fill) {
    std::vector<unsigned char> b = {0, 0, 0x08, 3};
    auto dim = [&b](uint32_t d) {
        b.push_back(static_cast<unsigned char>(d >> 24));
        b.push_back(static_cast<unsigned char>(d >> 16));
        b.push_back(static_cast<unsigned char>(d >> 8));
        b.push_back(static_cast<unsigned char>(d));
    };
    dim(static_cast<uint32_t>(n));
    dim(static_cast<uint32_t>(h));
    dim(static_cast<uint32_t>(w));
    for (int i = 0; i < n * h * w; ++i) b.push_back(fill);
    return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels) {
    std::vector<unsigned char> b = {0, 0, 0x08, 1};
    const uint32_t n = static_cast<uint32_t>(labels.size());
    b.push_back(static_cast<unsigned char>(n >> 24));
    b.push_back(static_cast<unsigned char>(n >> 16));
    b.push_back(static_cast<unsigned char>(n >> 8));
    b.push_back(static_cast<unsigned char>(n));
    for (unsigned char l : labels) b.push_back(l);
    return b;
}

TrainProtocol quick_protocol(int epochs, uint64_t seed) {
    TrainProtocol p;
    p.epochs = epochs;
    p.batch_size = 32;
    p.base_lr = 0.1;
    p.momentum = 0.9;
    p.weight_decay = 1e-4;
    p.horizontal_flip = false;
    p.pad_crop = false;
    p.seed = seed;
    return p;
}

SynthSpec small_synth(int classes = 4, int n_train = 96, int n_test = 48, int hw = 8) {
    SynthSpec s;
    s.num_classes = classes;
    s.n_train = n_train;
    s.n_test = n_test;
    s.hw = hw;
    s.channels = 3;
    s.sigma_between = 5.0;
    s.sigma_within = 1.0;
    return s;
}

} // namespace

TEST_CASE("idx loader parses the standard layout") {
    const std::string ip = tmp_path("lwdna_imgs.idx");
    const std::string lp = tmp_path("lwdna_labs.idx");
    write_bytes(ip, idx_images(10, 28, 28, 128));
    std::vector<unsigned char> labs;
    for (int i = 0; i < 10; ++i) labs.push_back(static_cast<unsigned char>(i % 4));
    write_bytes(lp, idx_labels(labs));

    const Dataset d = load_idx_dataset(ip, lp, 4, "train");
    CHECK(d.size() == 10);
    CHECK(d.images.shape == Shape{10, 1, 28, 28});
    CHECK(d.labels[3] == 3);
    CHECK(d.images.ptr()[0] == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("idx loader rejects bad magic and truncation with offsets") {
    const std::string bad = tmp_path("lwdna_bad.idx");
    write_bytes(bad, {1, 0, 0x08, 1, 0, 0, 0, 2, 7, 7});
    CHECK_THROWS_WITH_AS(load_idx(bad), doctest::Contains("offset 0"), std::runtime_error);

    const std::string trunc = tmp_path("lwdna_trunc.idx");
    std::vector<unsigned char> img = idx_images(4, 5, 5, 9);
    img.resize(img.size() - 30);   // cut into the payload
    write_bytes(trunc, img);
    CHECK_THROWS_WITH_AS(load_idx(trunc), doctest::Contains("offset"), std::runtime_error);

    const std::string wrong_dtype = tmp_path("lwdna_dtype.idx");
    write_bytes(wrong_dtype, {0, 0, 0x0D, 1, 0, 0, 0, 1, 0, 0, 0, 0});
    CHECK_THROWS_AS(load_idx(wrong_dtype), std::runtime_error);
}

TEST_CASE("synthetic data determinism and metadata") {
    auto [tr1, te1] = synth_dataset(small_synth(), 5);
    auto [tr2, te2] = synth_dataset(small_synth(), 5);
    auto [tr3, te3] = synth_dataset(small_synth(), 6);
    CHECK(*tr1.images.data == *tr2.images.data);
    CHECK(*te1.images.data == *te2.images.data);
    CHECK(*tr1.images.data != *tr3.images.data);
    CHECK(tr1.channel_mean.size() == 3);
    CHECK(tr1.channel_mean == te1.channel_mean);   // test split normalized with train stats
    // balanced labels
    std::vector<int> counts(4, 0);
    for (int y : tr1.labels) ++counts[static_cast<size_t>(y)];
    for (int c : counts) CHECK(c == 24);
}

TEST_CASE("synthetic classes separate under a linear probe") {
    auto [train_set, test_set] = synth_dataset(small_synth(6, 192, 96, 8), 11);
    // nearest class centroid in pixel space is a linear classifier
    const int C = 3, HW = 64;
    const int D = C * HW;
    std::vector<std::vector<double>> centroid(6, std::vector<double>(static_cast<size_t>(D), 0.0));
    std::vector<int> n_of(6, 0);
    for (int i = 0; i < train_set.size(); ++i) {
        const int y = train_set.labels[static_cast<size_t>(i)];
        const double* p = train_set.images.ptr() + static_cast<size_t>(i) * D;
        for (int e = 0; e < D; ++e) centroid[static_cast<size_t>(y)][static_cast<size_t>(e)] += p[e];
        ++n_of[static_cast<size_t>(y)];
    }
    for (int k = 0; k < 6; ++k)
        for (int e = 0; e < D; ++e) centroid[static_cast<size_t>(k)][static_cast<size_t>(e)] /= n_of[static_cast<size_t>(k)];
    int correct = 0;
    for (int i = 0; i < test_set.size(); ++i) {
        const double* p = test_set.images.ptr() + static_cast<size_t>(i) * D;
        int best = -1;
        double best_d = 1e300;
        for (int k = 0; k < 6; ++k) {
            double dist = 0.0;
            for (int e = 0; e < D; ++e) {
                const double diff = p[e] - centroid[static_cast<size_t>(k)][static_cast<size_t>(e)];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = k;
            }
        }
        if (best == test_set.labels[static_cast<size_t>(i)]) ++correct;
    }
    CHECK(100.0 * correct / test_set.size() >= 95.0);
}

TEST_CASE("augmentation: flip is an involution, shapes preserved") {
    Rng rng(21);
    Tensor x = Tensor::randn({4, 3, 8, 8}, rng);
    CHECK(*hflip(hflip(x)).data == *x.data);

    Tensor a = augment(x, rng, true, true, 4);
    CHECK(a.shape == x.shape);
}

TEST_CASE("evaluate: constant logits on a balanced set and a hand confusion") {
    {
        // constant logits on a balanced 10-class set: exactly 90% error
        auto [tr10, te10] = synth_dataset(small_synth(10, 40, 40, 8), 29);
        const ArchSpec a10 = build("vgg-tiny", 10, 8);
        Model flat(a10, a10.default_config, 1);
        for (auto& v : *flat.params().head_w.data) v = 0.0;
        for (auto& v : *flat.params().head_b.data) v = 0.0;
        CHECK(evaluate(flat, te10).top1_err == 90.0);
    }
    auto [train_set, test_set] = synth_dataset(small_synth(4, 64, 40, 8), 31);
    const ArchSpec arch = build("vgg-tiny", 4, 8);

    // hand-counted confusion on 20 samples must match exactly
    Model rnd(arch, arch.default_config, 99);
    std::vector<int> first20;
    for (int i = 0; i < 20; ++i) first20.push_back(i);
    auto [images, labels] = take_batch(test_set, first20);
    Tape tape;
    Tensor logits = rnd.forward(tape, images, false);
    int errors = 0;
    for (int i = 0; i < 20; ++i) {
        int best = 0;
        for (int k = 1; k < 4; ++k)
            if (logits.ptr()[i * 4 + k] > logits.ptr()[i * 4 + best]) best = k;
        if (best != labels[static_cast<size_t>(i)]) ++errors;
    }
    Dataset sub;
    sub.images = images;
    sub.labels = labels;
    sub.num_classes = 4;
    sub.split = "test";
    const EvalResult rr = evaluate(rnd, sub);
    CHECK(rr.top1_err == doctest::Approx(100.0 * errors / 20.0));

    // threaded evaluation merges batches in order: identical result
    const EvalResult rt = evaluate(rnd, test_set, 16, 3);
    const EvalResult rs = evaluate(rnd, test_set, 16, 1);
    CHECK(rt.top1_err == rs.top1_err);
    CHECK(rt.loss == rs.loss);
}

TEST_CASE("train: zero epochs, milestones, smoke descent, NaN abort") {
    auto [train_set, test_set] = synth_dataset(small_synth(), 41);
    const ArchSpec arch = build("vgg-tiny", 4, 8);

    {
        Model model(arch, arch.default_config, 7);
        TrainLog log = train(model, train_set, test_set, quick_protocol(0, 7));
        CHECK(log.rows.empty());
        CHECK(log.final_test_err > 0.0);   // eval ran once on a random model
        CHECK(train_log_csv(log) == "epoch,lr,train_loss,train_err,test_err,wallclock\n");
    }
    {
        Model model(arch, arch.default_config, 7);
        TrainLog log = train(model, train_set, test_set, quick_protocol(4, 7));
        REQUIRE(log.rows.size() == 4);
        CHECK(log.rows[0].lr == doctest::Approx(0.1));
        CHECK(log.rows[1].lr == doctest::Approx(0.1));
        CHECK(log.rows[2].lr == doctest::Approx(0.01));    // 50% milestone
        CHECK(log.rows[3].lr == doctest::Approx(0.001));   // 75% milestone
    }
    {
        Model model(arch, arch.default_config, 17);
        TrainLog log = train(model, train_set, test_set, quick_protocol(3, 17));
        REQUIRE(log.rows.size() == 3);
        CHECK(log.rows[1].train_loss < log.rows[0].train_loss);
        CHECK(log.rows[2].train_loss < log.rows[1].train_loss);
    }
    {
        Model model(arch, arch.default_config, 7);
        (*model.params().head_w.data)[0] = std::nan("");
        CHECK_THROWS_WITH_AS(train(model, train_set, test_set, quick_protocol(1, 7)),
                             doctest::Contains("epoch 0 batch 0"), std::runtime_error);
    }
}

TEST_CASE("perfect memorization reaches zero training error") {
    SynthSpec s = small_synth(2, 16, 8, 8);
    s.sigma_between = 10.0;
    auto [train_set, test_set] = synth_dataset(s, 51);
    const ArchSpec arch = build("vgg-tiny", 2, 8);
    Model model(arch, arch.default_config, 3);
    TrainProtocol p = quick_protocol(10, 3);
    p.batch_size = 8;
    train(model, train_set, test_set, p);
    const EvalResult on_train = evaluate(model, train_set);
    CHECK(on_train.top1_err == 0.0);
}

TEST_CASE("checkpoint round trip") {
    const ArchSpec arch = build("mobile-tiny", 4, 8);
    Model model(arch, arch.default_config, 23);
    // give the running stats a non-default value
    auto [train_set, test_set] = synth_dataset(small_synth(), 61);
    train(model, train_set, test_set, quick_protocol(1, 23));

    const std::string path = tmp_path("lwdna_model.ckpt");
    model.save(path);
    Model loaded = Model::load(path);
    CHECK(loaded.config() == model.config());
    for (int l = 0; l < arch.num_layers(); ++l)
        CHECK(*loaded.params().weights[static_cast<size_t>(l)].data ==
              *model.params().weights[static_cast<size_t>(l)].data);
    // bitwise equal eval behavior
    const EvalResult a = evaluate(model, test_set);
    const EvalResult b = evaluate(loaded, test_set);
    CHECK(a.top1_err == b.top1_err);
    CHECK(a.loss == b.loss);

    const std::string garbage = tmp_path("lwdna_garbage.ckpt");
    write_bytes(garbage, {'N', 'O', 'P', 'E', '0', '0', 1, 2, 3});
    CHECK_THROWS_WITH_AS(Model::load(garbage), doctest::Contains("magic"), std::runtime_error);
}

TEST_CASE("protocol hash and the comparison guard") {
    TrainProtocol a = quick_protocol(5, 1);
    TrainProtocol b = quick_protocol(5, 1);
    CHECK(protocol_hash(a) == protocol_hash(b));
    b.epochs = 6;
    CHECK(protocol_hash(a) != protocol_hash(b));

    TrainLog la, lb;
    la.protocol_hash = protocol_hash(a);
    lb.protocol_hash = protocol_hash(b);
    ShrinkReport rep;
    const ArchSpec arch = build("vgg-tiny", 4, 8);
    rep.config_baseline = arch.default_config;
    rep.config_shrunk = arch.default_config;
    CHECK_THROWS_WITH_AS(make_summary(rep, la, lb, a, arch, 8, 1),
                         doctest::Contains("different protocols"), std::invalid_argument);
}

TEST_CASE("degenerate comparison: beta=1 and full budget give identical runs") {
    auto [train_set, test_set] = synth_dataset(small_synth(4, 64, 32, 8), 71);
    const ArchSpec arch = build("vgg-tiny", 4, 8);
    TrainProtocol p = quick_protocol(2, 71);
    const int64_t base_flops = model_cost(arch, arch.default_config, 8).total_flops;

    const CompareOutcome oc = compare_run(arch, p, 1.0, 2, Floors{0.4, 0.45}, Budget{base_flops},
                                          Criterion::Gradient, train_set, test_set, 71);
    CHECK(oc.shrink.config_shrunk == arch.default_config);
    CHECK(oc.summary.flops_ratio == doctest::Approx(100.0));
    REQUIRE(oc.baseline_log.rows.size() == oc.shrunk_log.rows.size());
    for (size_t e = 0; e < oc.baseline_log.rows.size(); ++e) {
        CHECK(oc.baseline_log.rows[e].train_loss == oc.shrunk_log.rows[e].train_loss);
        CHECK(oc.baseline_log.rows[e].test_err == oc.shrunk_log.rows[e].test_err);
    }
    CHECK(oc.summary.protocol_hash_hex.size() == 16);
}

TEST_CASE("knowledge distillation trains end to end") {
    auto [train_set, test_set] = synth_dataset(small_synth(4, 64, 32, 8), 81);
    const ArchSpec arch = build("vgg-tiny", 4, 8);
    Model teacher(arch, widen(arch.default_config, 2.0, arch), 5);
    TrainProtocol p = quick_protocol(1, 81);
    KdSettings kd;
    kd.lambda = 0.4;
    kd.temperature = 4.0;
    p.kd = kd;
    Model student(arch, arch.default_config, 6);
    const TrainLog log = train(student, train_set, test_set, p, &teacher);
    CHECK(log.rows.size() == 1);
    CHECK(std::isfinite(log.rows[0].train_loss));

    Model no_teacher(arch, arch.default_config, 6);
    CHECK_THROWS_AS(train(no_teacher, train_set, test_set, p, nullptr), std::invalid_argument);
}
