#include <catch2/catch_amalgamated.hpp>

#include <map>

#include "sshield/bundle.hpp"
#include "testutil.hpp"

using namespace sshield;

TEST_CASE("sample_selection") {
    Rng rng(1);
    SECTION("m=1 forces all choices") {
        auto sel = sample_selection(1, 5, rng);
        REQUIRE(sel.size() == 5);
        for (size_t v : sel) REQUIRE(v == 0);
    }

    SECTION("output length is n") {
        REQUIRE(sample_selection(3, 7, rng).size() == 7);
    }

    SECTION("m=2 n=2: all four vectors near 1/4 over 10000 draws") {
        std::map<SelectionVector, size_t> freq;
        for (int i = 0; i < 10000; ++i) freq[sample_selection(2, 2, rng)]++;
        REQUIRE(freq.size() == 4);
        for (const auto& [sel, count] : freq) {
            double f = count / 10000.0;
            REQUIRE(f > 0.23);
            REQUIRE(f < 0.27);
        }
    }

    SECTION("per-layer marginals within 2% of 1/m") {
        const size_t m = 3, n = 4, draws = 10000;
        std::vector<std::vector<size_t>> counts(n, std::vector<size_t>(m, 0));
        for (size_t i = 0; i < draws; ++i) {
            auto sel = sample_selection(m, n, rng);
            for (size_t j = 0; j < n; ++j) counts[j][sel[j]]++;
        }
        for (size_t j = 0; j < n; ++j)
            for (size_t k = 0; k < m; ++k) {
                double f = counts[j][k] / double(draws);
                REQUIRE(std::fabs(f - 1.0 / m) < 0.02);
            }
    }
}

TEST_CASE("count_configurations") {
    REQUIRE(count_configurations(2, 2, BundleMode::Layerwise) == 4);
    REQUIRE(count_configurations(3, 1, BundleMode::Layerwise) == 3);
    REQUIRE(count_configurations(5, 3, BundleMode::Modelwise) == 5);

    SECTION("matches brute enumeration for m,n <= 4") {
        for (uint64_t m = 1; m <= 4; ++m)
            for (uint64_t n = 1; n <= 4; ++n) {
                // enumerate all selection vectors by counting odometer-style
                uint64_t count = 0;
                std::vector<uint64_t> sel(n, 0);
                while (true) {
                    ++count;
                    size_t j = 0;
                    while (j < n && ++sel[j] == m) sel[j++] = 0;
                    if (j == n) break;
                }
                REQUIRE(count_configurations(m, n, BundleMode::Layerwise) == count);
            }
    }

    SECTION("overflow beyond 2^63 is an error") {
        REQUIRE_THROWS_AS(count_configurations(3, 41, BundleMode::Layerwise), std::overflow_error);
        REQUIRE(count_configurations(2, 63, BundleMode::Layerwise) == (1ULL << 63));
        REQUIRE_THROWS_AS(count_configurations(2, 64, BundleMode::Layerwise), std::overflow_error);
        REQUIRE_NOTHROW(count_configurations(3, 41, BundleMode::Modelwise));
    }
}

TEST_CASE("train_modelwise") {
    Rng rng(88);
    auto data = testutil::random_dataset(rng, 64, 4, 2);
    Architecture arch{{4, 5, 2}};
    Hyperparams hyper;
    hyper.learning_rate = 0.2f;
    hyper.epochs = 10;
    hyper.batch_size = 16;
    hyper.rng_seed = 50;

    SECTION("m < 2 is an error") {
        REQUIRE_THROWS_AS(train_modelwise(data.view(), arch, 1, hyper), std::invalid_argument);
    }

    SECTION("models differ pairwise and reproduce deterministically") {
        auto bundle = train_modelwise(data.view(), arch, 3, hyper);
        REQUIRE(bundle.model_count() == 3);
        REQUIRE(bundle.mode == BundleMode::Modelwise);
        for (size_t a = 0; a < 3; ++a)
            for (size_t b = a + 1; b < 3; ++b) REQUIRE_FALSE(bundle.models[a] == bundle.models[b]);

        auto again = train_modelwise(data.view(), arch, 3, hyper);
        for (size_t k = 0; k < 3; ++k) REQUIRE(bundle.models[k] == again.models[k]);

        // each model is exactly a baseline run with its derived seed
        Hyperparams h1 = hyper;
        h1.rng_seed = hyper.rng_seed + 1;
        REQUIRE(bundle.models[0] == train_baseline(data.view(), arch, h1));
    }

    SECTION("duplicate seeds yield identical models and a warning") {
        std::vector<std::string> warnings;
        auto bundle = train_modelwise_with_seeds(data.view(), arch, {7, 7}, hyper, &warnings);
        REQUIRE(bundle.models[0] == bundle.models[1]);
        REQUIRE_FALSE(warnings.empty());
    }
}

TEST_CASE("train_layerwise") {
    Rng rng(99);
    auto data = testutil::random_dataset(rng, 32, 4, 2);
    Architecture arch{{4, 3, 2}};
    Hyperparams hyper;
    hyper.learning_rate = 0.1f;
    hyper.epochs = 1;
    hyper.batch_size = 8;
    hyper.rng_seed = 60;

    SECTION("m < 2 is an error") {
        REQUIRE_THROWS_AS(train_layerwise(data.view(), arch, 1, hyper), std::invalid_argument);
    }

    SECTION("deterministic given seed") {
        auto a = train_layerwise(data.view(), arch, 2, hyper);
        auto b = train_layerwise(data.view(), arch, 2, hyper);
        for (size_t k = 0; k < 2; ++k) REQUIRE(a.models[k] == b.models[k]);
    }

    SECTION("gradient isolation: (layer, model) changes iff some sample selected it") {
        Hyperparams h = hyper;
        h.batch_size = 8;
        h.epochs = 1;
        // single batch: restrict data to 8 samples
        auto small = testutil::random_dataset(rng, 8, 4, 2);
        std::vector<ModelParams> init;
        for (size_t k = 0; k < 3; ++k) init.push_back(init_params(arch, 100 + k));
        std::vector<SelectionEvent> log;
        auto bundle = train_layerwise(small.view(), arch, 3, h, &init, &log);
        REQUIRE(log.size() == 8);

        std::vector<std::vector<bool>> touched(arch.layer_count(), std::vector<bool>(3, false));
        for (const auto& ev : log)
            for (size_t j = 0; j < ev.sel.size(); ++j) touched[j][ev.sel[j]] = true;

        for (size_t j = 0; j < arch.layer_count(); ++j)
            for (size_t k = 0; k < 3; ++k) {
                const bool changed = !(bundle.models[k].weights[j].values == init[k].weights[j].values &&
                                       bundle.models[k].biases[j].values == init[k].biases[j].values);
                REQUIRE(changed == touched[j][k]);
            }
    }

    SECTION("identical models: bucket update equals plain update on its sub-batch") {
        auto small = testutil::random_dataset(rng, 8, 4, 2);
        Hyperparams h = hyper;
        h.batch_size = 8;
        h.epochs = 1;
        auto shared = init_params(arch, 555);
        std::vector<ModelParams> init = {shared, shared};
        std::vector<SelectionEvent> log;
        auto bundle = train_layerwise(small.view(), arch, 2, h, &init, &log);

        // oracle: per-sample plain gradients on the shared params, averaged
        // over the samples that selected each (layer, model), same order
        const auto batches = minibatches(small.count, h.batch_size, mix_seed(h.rng_seed, kStreamShuffle, 0));
        REQUIRE(batches.size() == 1);
        std::map<size_t, SelectionVector> sel_by_idx;
        for (const auto& ev : log) sel_by_idx[ev.sample_index] = ev.sel;

        for (size_t j = 0; j < arch.layer_count(); ++j) {
            for (size_t k = 0; k < 2; ++k) {
                Gradients acc = ModelParams::zeros(arch);
                size_t cnt = 0;
                for (size_t idx : batches[0]) {
                    if (sel_by_idx.at(idx)[j] != k) continue;
                    ++cnt;
                    Tensor x({4}, std::vector<float>(small.view().input(idx), small.view().input(idx) + 4));
                    Tensor y({2}, std::vector<float>(small.view().target(idx), small.view().target(idx) + 2));
                    backward_accumulate(shared, forward(shared, x), y, acc);
                }
                if (cnt == 0) continue;
                const float step = h.learning_rate / static_cast<float>(cnt);
                for (size_t i = 0; i < shared.weights[j].size(); ++i) {
                    const float expect = shared.weights[j].values[i] - step * acc.weights[j].values[i];
                    REQUIRE(bundle.models[k].weights[j].values[i] == expect);
                }
                for (size_t i = 0; i < shared.biases[j].size(); ++i) {
                    const float expect = shared.biases[j].values[i] - step * acc.biases[j].values[i];
                    REQUIRE(bundle.models[k].biases[j].values[i] == expect);
                }
            }
        }
    }
}

TEST_CASE("eval_bundle_accuracy") {
    Rng rng(777);
    auto data = testutil::random_dataset(rng, 64, 4, 2);
    Architecture arch{{4, 3, 2}};

    SECTION("identical models: selection is a no-op") {
        auto p = init_params(arch, 9);
        ModelBundle bundle;
        bundle.arch = arch;
        bundle.mode = BundleMode::Layerwise;
        bundle.models = {p, p, p};
        const double mixed = eval_bundle_accuracy(bundle, data.view(), 4, 1);
        const double single = accuracy(p, data.view());
        REQUIRE(mixed == single);
    }

    SECTION("modelwise accuracy lies within the per-model range") {
        Hyperparams hyper;
        hyper.learning_rate = 0.2f;
        hyper.epochs = 8;
        hyper.batch_size = 16;
        hyper.rng_seed = 31;
        auto bundle = train_modelwise(data.view(), arch, 3, hyper);
        double lo = 1.0, hi = 0.0;
        for (const auto& mp : bundle.models) {
            const double acc = accuracy(mp, data.view());
            lo = std::min(lo, acc);
            hi = std::max(hi, acc);
        }
        const double mixed = eval_bundle_accuracy(bundle, data.view(), 8, 2);
        REQUIRE(mixed >= lo - 0.05);
        REQUIRE(mixed <= hi + 0.05);
    }

    SECTION("argument validation") {
        ModelBundle bundle;
        bundle.arch = arch;
        bundle.mode = BundleMode::Layerwise;
        bundle.models = {init_params(arch, 1), init_params(arch, 2)};
        REQUIRE_THROWS_AS(eval_bundle_accuracy(bundle, data.view(), 0), std::invalid_argument);
        DataView empty{nullptr, nullptr, 0, 4, 2};
        REQUIRE_THROWS_AS(eval_bundle_accuracy(bundle, empty, 1), std::invalid_argument);
    }
}

TEST_CASE("bundle container round-trips bit-exactly") {
    testutil::TempDir dir;
    Rng rng(2024);
    Architecture arch{{6, 4, 3}};
    ModelBundle bundle;
    bundle.arch = arch;
    bundle.mode = BundleMode::Layerwise;
    for (size_t k = 0; k < 3; ++k) bundle.models.push_back(init_params(arch, 900 + k));

    auto path = dir.file("bundle.sshd");
    save_bundle(bundle, path);
    auto loaded = load_bundle(path);
    REQUIRE(loaded.arch == bundle.arch);
    REQUIRE(loaded.mode == bundle.mode);
    REQUIRE(loaded.model_count() == 3);
    for (size_t k = 0; k < 3; ++k) REQUIRE(loaded.models[k] == bundle.models[k]);
    REQUIRE_FALSE(loaded.quantized.has_value());

    SECTION("quantized payload flag and data survive") {
        QuantizedConstants q;
        q.layers.resize(arch.layer_count());
        for (size_t j = 0; j < arch.layer_count(); ++j) {
            auto& g = q.layers[j];
            g.w_scale = 0.5f + j;
            g.b_scale = 0.25f;
            for (size_t k = 0; k < 3; ++k) {
                g.w_q.emplace_back(arch.out_dim(j) * arch.in_dim(j), static_cast<int8_t>(k * 3 - 1));
                g.b_q.emplace_back(arch.out_dim(j), static_cast<int8_t>(-k));
            }
        }
        bundle.quantized = q;
        auto qpath = dir.file("bundle_q.sshd");
        save_bundle(bundle, qpath);
        auto qloaded = load_bundle(qpath);
        REQUIRE(qloaded.quantized.has_value());
        REQUIRE(*qloaded.quantized == q);
    }

    SECTION("corrupted magic is rejected") {
        auto bad = dir.file("bad.sshd");
        std::ofstream os(bad, std::ios::binary);
        os.write("NOPE", 4);
        os.write("\0\0\0\0\0\0\0\0", 8);
        os.close();
        REQUIRE_THROWS_WITH(load_bundle(bad), Catch::Matchers::ContainsSubstring("magic"));
    }

    SECTION("byte-identical re-save") {
        auto p1 = dir.file("b1.sshd");
        auto p2 = dir.file("b2.sshd");
        save_bundle(bundle, p1);
        save_bundle(bundle, p2);
        std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
        std::vector<char> d1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::vector<char> d2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        REQUIRE(d1 == d2);
    }
}
