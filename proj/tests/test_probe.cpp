#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "common.hpp"
#include "reinjectr/probe.hpp"

using namespace reinjectr;

namespace {

// Two far-apart Gaussian clusters; trivially separable.
void make_separable(std::size_t tokens, std::size_t d, std::uint64_t seed, Matrix& x,
                    std::vector<TokenCategory>& y) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.3);
    x = Matrix(tokens, d);
    y.resize(tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
        bool second = i % 2 == 1;
        y[i] = second ? TokenCategory::adjective : TokenCategory::noun;
        for (std::size_t j = 0; j < d; ++j)
            x(i, j) = (second ? 5.0 : -5.0) + gauss(rng);
    }
}

}  // namespace

TEST_CASE("sub-token label propagation") {
    // A tokenizer that splits the way a real BPE might: golden -> gold + en.
    Tokenizer bpe_like = [](const std::string& word) -> std::vector<std::string> {
        if (word == "golden") return {"gold", "en"};
        return {word};
    };
    std::vector<RawPrompt> raw = {{{"golden", "adjective"}, {"dog", "noun"}}};
    LabeledTokenCorpus corpus = build_corpus(raw, bpe_like, 1, 0, 1);
    REQUIRE(corpus.prompts.size() == 1);
    REQUIRE(corpus.prompts[0].tokens.size() == 3);
    CHECK(corpus.prompts[0].tokens[0] == "gold");
    CHECK(corpus.prompts[0].tokens[1] == "en");
    CHECK(corpus.prompts[0].labels[0] == TokenCategory::adjective);
    CHECK(corpus.prompts[0].labels[1] == TokenCategory::adjective);
    CHECK(corpus.prompts[0].labels[2] == TokenCategory::noun);
}

TEST_CASE("fixed prefix removal") {
    std::vector<RawPrompt> raw = {{{"a", "others"},
                                   {"photo", "others"},
                                   {"of", "others"},
                                   {"three", "numeral"},
                                   {"dogs", "noun"}}};
    LabeledTokenCorpus corpus = build_corpus(raw, default_tokenizer(), 1, 0, 3);
    REQUIRE(corpus.prompts.size() == 1);
    REQUIRE(corpus.prompts[0].tokens.size() == 2);
    CHECK(corpus.prompts[0].tokens[0] == "three");
    CHECK(corpus.prompts[0].labels[0] == TokenCategory::numeral);
    CHECK(corpus.prompts[0].labels[1] == TokenCategory::noun);
}

TEST_CASE("train/test split sizes are honored exactly") {
    std::vector<RawPrompt> raw = synthetic_prompts(553, 99);
    LabeledTokenCorpus corpus = build_corpus(raw, default_tokenizer(), 499, 54, 7);
    std::size_t train = 0, test = 0;
    for (const auto& p : corpus.prompts) (p.is_test ? test : train) += 1;
    CHECK(train == 499);
    CHECK(test == 54);
    CHECK(corpus.prompts.size() == 553);
}

TEST_CASE("split is deterministic given the seed and drops the remainder") {
    std::vector<RawPrompt> raw = synthetic_prompts(100, 5);
    LabeledTokenCorpus a = build_corpus(raw, default_tokenizer(), 60, 20, 42);
    LabeledTokenCorpus b = build_corpus(raw, default_tokenizer(), 60, 20, 42);
    CHECK(a.prompts.size() == 80);
    REQUIRE(a.prompts.size() == b.prompts.size());
    for (std::size_t i = 0; i < a.prompts.size(); ++i) {
        CHECK(a.prompts[i].is_test == b.prompts[i].is_test);
        CHECK(a.prompts[i].tokens == b.prompts[i].tokens);
    }
}

TEST_CASE("unknown label strings are rejected") {
    std::vector<RawPrompt> raw = {{{"dog", "nounn"}}};
    CHECK_THROWS_AS(build_corpus(raw, default_tokenizer(), 1, 0, 1), invalid_input);
}

TEST_CASE("default tokenizer halves long words") {
    auto tok = default_tokenizer();
    CHECK(tok("golden") == std::vector<std::string>{"golden"});  // 6 chars, kept whole
    CHECK(tok("bicycle") == std::vector<std::string>{"bicy", "cle"});
    CHECK(tok("metallic") == std::vector<std::string>{"meta", "llic"});
}

TEST_CASE("requesting more prompts than available fails") {
    std::vector<RawPrompt> raw = synthetic_prompts(10, 1);
    CHECK_THROWS_AS(build_corpus(raw, default_tokenizer(), 9, 2, 1), invalid_input);
}

TEST_CASE("probe reaches full accuracy on separable data") {
    Matrix x;
    std::vector<TokenCategory> y;
    make_separable(1920, 8, 11, x, y);

    ProbeConfig cfg;  // fixed protocol: lr 1e-4, batch 64, 50 epochs
    cfg.seed = 3;
    ProbeModel model = train_probe(x, y, cfg);

    Matrix tx;
    std::vector<TokenCategory> ty;
    make_separable(256, 8, 12, tx, ty);
    Recoverability rec = recoverability(model, tx, ty);
    CHECK(rec.overall == 1.0);
    CHECK(model.loss_trace.back() <= model.loss_trace.front());
}

TEST_CASE("probe on shuffled balanced labels sits at chance") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix x(1000, 12);
    for (double& v : x.data) v = gauss(rng);
    std::vector<TokenCategory> y(1000);
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = static_cast<TokenCategory>(i % kCategoryCount);
    std::shuffle(y.begin(), y.end(), rng);

    ProbeConfig cfg;
    cfg.seed = 8;
    ProbeModel model = train_probe(x, y, cfg);

    Matrix tx(500, 12);
    std::mt19937_64 rng2(6);
    for (double& v : tx.data) v = gauss(rng2);
    std::vector<TokenCategory> ty(500);
    for (std::size_t i = 0; i < ty.size(); ++i)
        ty[i] = static_cast<TokenCategory>(i % kCategoryCount);
    std::shuffle(ty.begin(), ty.end(), rng2);

    Recoverability rec = recoverability(model, tx, ty);
    CHECK(std::abs(rec.overall - 0.2) < 0.1);
}

TEST_CASE("probe config defaults match the fixed training protocol") {
    ProbeConfig cfg;
    CHECK(cfg.learning_rate == 1e-4);
    CHECK(cfg.batch_size == 64);
    CHECK(cfg.epochs == 50);
    CHECK(cfg.hidden_width == 256);
}

TEST_CASE("training is bit-deterministic given the seed") {
    Matrix x;
    std::vector<TokenCategory> y;
    make_separable(320, 6, 21, x, y);
    ProbeConfig cfg;
    cfg.epochs = 5;
    cfg.seed = 77;
    ProbeModel a = train_probe(x, y, cfg);
    ProbeModel b = train_probe(x, y, cfg);
    CHECK(max_abs_diff(a.w1, b.w1) == 0.0);
    CHECK(max_abs_diff(a.w2, b.w2) == 0.0);
    CHECK(a.loss_trace == b.loss_trace);
}

TEST_CASE("train_probe validates inputs") {
    Matrix x(10, 4, 1.0);
    std::vector<TokenCategory> y(9, TokenCategory::noun);
    ProbeConfig cfg;
    CHECK_THROWS_AS(train_probe(x, y, cfg), invalid_input);  // misaligned
    std::vector<TokenCategory> one_class(10, TokenCategory::noun);
    CHECK_THROWS_AS(train_probe(x, one_class, cfg), invalid_input);  // < 2 classes
}

TEST_CASE("train_probe flags numerical blowups") {
    Matrix x(64, 4, 1e308);
    std::vector<TokenCategory> y(64);
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = i % 2 == 0 ? TokenCategory::noun : TokenCategory::adjective;
    ProbeConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train_probe(x, y, cfg), numerical_failure);
}

namespace {

ProbeModel constant_class0_probe(std::size_t d) {
    ProbeModel m;
    m.input_width = d;
    m.w1 = Matrix(d, 4, 0.0);
    m.b1.assign(4, 0.0);
    m.w2 = Matrix(4, kCategoryCount, 0.0);
    m.b2.assign(kCategoryCount, 0.0);
    m.b2[0] = 1.0;  // argmax is always class 0 (noun)
    return m;
}

}  // namespace

TEST_CASE("recoverability of a constant probe") {
    ProbeModel m = constant_class0_probe(3);
    Matrix x(6, 3, 0.5);

    std::vector<TokenCategory> all_noun(6, TokenCategory::noun);
    Recoverability rec = recoverability(m, x, all_noun);
    CHECK(rec.overall == 1.0);
    CHECK(rec.per_category[0].accuracy == 1.0);
    CHECK(rec.per_category[0].support == 6);
    CHECK_FALSE(rec.per_category[1].defined);  // absent category omitted

    std::vector<TokenCategory> no_noun(6, TokenCategory::numeral);
    Recoverability rec2 = recoverability(m, x, no_noun);
    CHECK(rec2.overall == 0.0);
}

TEST_CASE("overall accuracy equals the support-weighted mean of per-category accuracies") {
    Matrix x;
    std::vector<TokenCategory> y;
    make_separable(240, 5, 31, x, y);
    ProbeConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 4;
    ProbeModel model = train_probe(x, y, cfg);
    Recoverability rec = recoverability(model, x, y);

    double weighted = 0.0;
    for (const auto& ca : rec.per_category)
        if (ca.defined) weighted += ca.accuracy * static_cast<double>(ca.support);
    weighted /= static_cast<double>(rec.total);
    CHECK(std::abs(weighted - rec.overall) < 1e-12);
}

TEST_CASE("recoverability rejects empty test sets") {
    ProbeModel m = constant_class0_probe(3);
    Matrix empty(0, 3);
    std::vector<TokenCategory> none;
    CHECK_THROWS_AS(recoverability(m, empty, none), invalid_input);
}

TEST_CASE("probe_curve is flat on identical layers") {
    auto drift = testutil::make_drifting_stack(500, 1, 24, 0.0, 100, 17);
    FeatureStack stack;
    for (int l = 0; l < 4; ++l) stack.text.push_back(drift.stack.text[0]);

    ProbeConfig cfg;  // default protocol converges on the clean centroids
    cfg.seed = 100;
    RecoverabilityCurve curve = probe_curve(stack, drift.corpus, cfg);
    REQUIRE(curve.per_layer.size() == 4);

    double lo = 1.0, hi = 0.0;
    for (const auto& rec : curve.per_layer) {
        lo = std::min(lo, rec.overall);
        hi = std::max(hi, rec.overall);
    }
    CHECK(hi - lo < 0.02);
}

TEST_CASE("probe_curve declines on the controlled drifting stack") {
    auto drift = testutil::make_drifting_stack(600, 6, 16, 0.3, 120, 4242);
    ProbeConfig cfg;
    cfg.hidden_width = 64;
    cfg.epochs = 25;
    cfg.seed = 9;
    RecoverabilityCurve curve = probe_curve(drift.stack, drift.corpus, cfg);

    std::vector<double> acc, idx;
    for (std::size_t l = 0; l < curve.per_layer.size(); ++l) {
        acc.push_back(curve.per_layer[l].overall);
        idx.push_back(static_cast<double>(l));
    }
    CHECK(testutil::spearman(idx, acc) <= -0.9);
    CHECK(acc.front() > 0.95);  // layer 0 is noiseless
}

TEST_CASE("probe_curve reproduces bit-identically and keeps capacity fixed") {
    auto drift = testutil::make_drifting_stack(250, 3, 10, 0.25, 50, 55);
    ProbeConfig cfg;
    cfg.hidden_width = 32;
    cfg.epochs = 8;
    cfg.seed = 1234;
    RecoverabilityCurve a = probe_curve(drift.stack, drift.corpus, cfg);
    RecoverabilityCurve b = probe_curve(drift.stack, drift.corpus, cfg);
    REQUIRE(a.per_layer.size() == b.per_layer.size());
    for (std::size_t l = 0; l < a.per_layer.size(); ++l) {
        CHECK(a.per_layer[l].overall == b.per_layer[l].overall);
        for (std::size_t c = 0; c < kCategoryCount; ++c)
            CHECK(a.per_layer[l].per_category[c].accuracy ==
                  b.per_layer[l].per_category[c].accuracy);
    }

    // Identical parameter counts across every per-layer probe.
    Matrix x;
    std::vector<TokenCategory> y;
    make_separable(100, 10, 2, x, y);
    ProbeModel p0 = train_probe(x, y, cfg, 0);
    ProbeModel p1 = train_probe(x, y, cfg, 1);
    CHECK(p0.parameter_count() == p1.parameter_count());
}

TEST_CASE("probe_curve validates stack/corpus alignment") {
    auto drift = testutil::make_drifting_stack(100, 3, 8, 0.2, 20, 3);
    FeatureStack stack = drift.stack;
    stack.text[0] = Matrix(99, 8);  // inconsistent token count
    ProbeConfig cfg;
    CHECK_THROWS_AS(probe_curve(stack, drift.corpus, cfg), invalid_input);
}

TEST_CASE("five categories round-trip through names") {
    const char* names[] = {"noun", "adjective", "spatial-relation", "numeral", "others"};
    for (std::size_t c = 0; c < kCategoryCount; ++c) {
        TokenCategory cat = parse_category(names[c]);
        CHECK(static_cast<std::size_t>(cat) == c);
        CHECK(std::string(category_name(cat)) == names[c]);
    }
}
