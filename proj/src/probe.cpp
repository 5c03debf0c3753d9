#include "reinjectr/probe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <random>

#include "reinjectr/parallel.hpp"

namespace reinjectr {

TokenCategory parse_category(const std::string& name) {
    if (name == "noun") return TokenCategory::noun;
    if (name == "adjective") return TokenCategory::adjective;
    if (name == "spatial-relation") return TokenCategory::spatial_relation;
    if (name == "numeral") return TokenCategory::numeral;
    if (name == "others") return TokenCategory::others;
    throw invalid_input("unknown token category: " + name);
}

const char* category_name(TokenCategory c) {
    switch (c) {
        case TokenCategory::noun: return "noun";
        case TokenCategory::adjective: return "adjective";
        case TokenCategory::spatial_relation: return "spatial-relation";
        case TokenCategory::numeral: return "numeral";
        case TokenCategory::others: return "others";
    }
    return "?";
}

Tokenizer default_tokenizer() {
    return [](const std::string& word) {
        std::vector<std::string> out;
        if (word.size() > 6) {
            std::size_t half = (word.size() + 1) / 2;
            out.push_back(word.substr(0, half));
            out.push_back(word.substr(half));
        } else {
            out.push_back(word);
        }
        return out;
    };
}

std::size_t LabeledTokenCorpus::total_tokens() const {
    std::size_t n = 0;
    for (const auto& p : prompts) n += p.tokens.size();
    return n;
}

std::vector<TokenCategory> LabeledTokenCorpus::flat_labels() const {
    std::vector<TokenCategory> out;
    out.reserve(total_tokens());
    for (const auto& p : prompts)
        out.insert(out.end(), p.labels.begin(), p.labels.end());
    return out;
}

std::vector<std::size_t> LabeledTokenCorpus::row_indices(bool test_split) const {
    std::vector<std::size_t> out;
    std::size_t row = 0;
    for (const auto& p : prompts) {
        for (std::size_t t = 0; t < p.tokens.size(); ++t, ++row)
            if (p.is_test == test_split) out.push_back(row);
    }
    return out;
}

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

bool has_photo_prefix(const RawPrompt& p) {
    return p.size() >= 3 && lower(p[0].word) == "a" && lower(p[1].word) == "photo" &&
           lower(p[2].word) == "of";
}

}  // namespace

LabeledTokenCorpus build_corpus(const std::vector<RawPrompt>& raw_prompts,
                                const Tokenizer& tokenizer, std::size_t train_count,
                                std::size_t test_count, std::uint64_t seed) {
    require(train_count + test_count <= raw_prompts.size(),
            "build_corpus: requested more prompts than available");
    require(static_cast<bool>(tokenizer), "build_corpus: tokenizer required");

    std::vector<std::size_t> order(raw_prompts.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    // selected[i]: 0 = dropped, 1 = train, 2 = test
    std::vector<int> selected(raw_prompts.size(), 0);
    for (std::size_t i = 0; i < train_count; ++i) selected[order[i]] = 1;
    for (std::size_t i = 0; i < test_count; ++i) selected[order[train_count + i]] = 2;

    LabeledTokenCorpus corpus;
    corpus.prompts.reserve(train_count + test_count);
    for (std::size_t pi = 0; pi < raw_prompts.size(); ++pi) {
        if (selected[pi] == 0) continue;
        const RawPrompt& raw = raw_prompts[pi];
        std::size_t start = has_photo_prefix(raw) ? 3 : 0;

        TokenizedPrompt tp;
        tp.is_test = selected[pi] == 2;
        for (std::size_t wi = start; wi < raw.size(); ++wi) {
            TokenCategory cat = parse_category(raw[wi].label);
            for (std::string& sub : tokenizer(raw[wi].word)) {
                tp.tokens.push_back(std::move(sub));
                tp.labels.push_back(cat);
            }
        }
        require(!tp.tokens.empty(), "build_corpus: prompt empty after prefix removal");
        corpus.prompts.push_back(std::move(tp));
    }
    return corpus;
}

std::vector<RawPrompt> synthetic_prompts(std::size_t count, std::uint64_t seed) {
    static const std::vector<std::string> nouns = {
        "dog",      "cat",   "car",     "tree",  "house", "bird",
        "apple",    "chair", "boat",    "clock", "horse", "bottle",
        "umbrella", "train", "bicycle", "lamp",  "sheep", "guitar"};
    static const std::vector<std::string> adjectives = {
        "red",    "blue",   "green",  "golden",   "shiny", "small",
        "large",  "wooden", "broken", "metallic", "round", "striped"};
    static const std::vector<std::string> relations = {
        "above", "below", "beside", "behind", "under", "near"};
    static const std::vector<std::string> numerals = {
        "one", "two", "three", "four", "five", "six"};

    std::mt19937_64 rng(seed);
    auto pick = [&rng](const std::vector<std::string>& pool) {
        return pool[rng() % pool.size()];
    };

    std::vector<RawPrompt> prompts;
    prompts.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        RawPrompt p = {{"a", "others"}, {"photo", "others"}, {"of", "others"}};
        switch (rng() % 4) {
            case 0:
                p.push_back({pick(numerals), "numeral"});
                p.push_back({pick(adjectives), "adjective"});
                p.push_back({pick(nouns), "noun"});
                break;
            case 1:
                p.push_back({pick(adjectives), "adjective"});
                p.push_back({pick(nouns), "noun"});
                p.push_back({pick(relations), "spatial-relation"});
                p.push_back({"the", "others"});
                p.push_back({pick(nouns), "noun"});
                break;
            case 2:
                p.push_back({pick(numerals), "numeral"});
                p.push_back({pick(nouns), "noun"});
                p.push_back({"and", "others"});
                p.push_back({pick(numerals), "numeral"});
                p.push_back({pick(nouns), "noun"});
                break;
            default:
                p.push_back({"the", "others"});
                p.push_back({pick(adjectives), "adjective"});
                p.push_back({pick(nouns), "noun"});
                p.push_back({pick(relations), "spatial-relation"});
                p.push_back({pick(numerals), "numeral"});
                p.push_back({pick(nouns), "noun"});
                break;
        }
        prompts.push_back(std::move(p));
    }
    return prompts;
}

LabeledTokenCorpus single_token_corpus(const std::vector<TokenCategory>& labels,
                                       const std::vector<bool>& is_test) {
    require(labels.size() == is_test.size(), "single_token_corpus: length mismatch");
    LabeledTokenCorpus corpus;
    corpus.prompts.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        TokenizedPrompt tp;
        tp.tokens.push_back("tok" + std::to_string(i));
        tp.labels.push_back(labels[i]);
        tp.is_test = is_test[i];
        corpus.prompts.push_back(std::move(tp));
    }
    return corpus;
}

namespace {

struct ProbeWorkspace {
    Matrix hidden;      // batch x hidden (post-ReLU)
    Matrix logits;      // batch x 5
    Matrix probs;       // batch x 5
    Matrix grad_logits; // batch x 5
};

// Returns mean cross-entropy over the batch; fills workspace.
double probe_forward(const ProbeModel& m, const Matrix& x,
                     const std::vector<TokenCategory>& y,
                     const std::vector<std::size_t>& rows, std::size_t begin,
                     std::size_t end, ProbeWorkspace& ws, bool want_grad) {
    const std::size_t bs = end - begin;
    Matrix batch(bs, m.input_width);
    for (std::size_t b = 0; b < bs; ++b)
        std::copy(x.row(rows[begin + b]), x.row(rows[begin + b]) + x.cols, batch.row(b));

    ws.hidden = matmul(batch, m.w1);
    for (std::size_t b = 0; b < bs; ++b) {
        double* h = ws.hidden.row(b);
        for (std::size_t j = 0; j < m.b1.size(); ++j) {
            h[j] += m.b1[j];
            if (h[j] < 0.0) h[j] = 0.0;
        }
    }
    ws.logits = matmul(ws.hidden, m.w2);
    ws.probs = Matrix(bs, kCategoryCount);
    if (want_grad) ws.grad_logits = Matrix(bs, kCategoryCount);

    double loss = 0.0;
    for (std::size_t b = 0; b < bs; ++b) {
        double* lg = ws.logits.row(b);
        double mx = lg[0] + m.b2[0];
        for (std::size_t c = 0; c < kCategoryCount; ++c) {
            lg[c] += m.b2[c];
            mx = std::max(mx, lg[c]);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < kCategoryCount; ++c) denom += std::exp(lg[c] - mx);
        const std::size_t target = static_cast<std::size_t>(y[rows[begin + b]]);
        loss += -(lg[target] - mx - std::log(denom));
        for (std::size_t c = 0; c < kCategoryCount; ++c) {
            double p = std::exp(lg[c] - mx) / denom;
            ws.probs(b, c) = p;
            if (want_grad)
                ws.grad_logits(b, c) = (p - (c == target ? 1.0 : 0.0)) / static_cast<double>(bs);
        }
    }
    return loss / static_cast<double>(bs);
}

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
        constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
            params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

}  // namespace

ProbeModel train_probe(const Matrix& features, const std::vector<TokenCategory>& labels,
                       const ProbeConfig& cfg, int layer_id) {
    require(features.rows == labels.size(), "train_probe: feature/label misalignment");
    require(features.rows >= 2, "train_probe: need at least 2 tokens");
    require(cfg.hidden_width > 0 && cfg.batch_size > 0 && cfg.epochs > 0 &&
                cfg.learning_rate > 0,
            "train_probe: config values must be positive");
    {
        std::array<bool, kCategoryCount> seen{};
        std::size_t distinct = 0;
        for (TokenCategory c : labels) {
            auto idx = static_cast<std::size_t>(c);
            if (!seen[idx]) {
                seen[idx] = true;
                ++distinct;
            }
        }
        require(distinct >= 2, "train_probe: need at least 2 classes present");
    }

    const std::size_t d = features.cols;
    const std::size_t h = cfg.hidden_width;

    ProbeModel model;
    model.layer_id = layer_id;
    model.input_width = d;
    model.w1 = Matrix(d, h);
    model.b1.assign(h, 0.0);
    model.w2 = Matrix(h, kCategoryCount);
    model.b2.assign(kCategoryCount, 0.0);

    // Seeded uniform fan-in init, identical scheme at every layer.
    std::mt19937_64 rng(cfg.seed);
    auto uniform_init = [&rng](double bound, double* ptr, std::size_t n) {
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (std::size_t i = 0; i < n; ++i) ptr[i] = dist(rng);
    };
    uniform_init(1.0 / std::sqrt(static_cast<double>(d)), model.w1.data.data(), model.w1.size());
    uniform_init(1.0 / std::sqrt(static_cast<double>(d)), model.b1.data(), model.b1.size());
    uniform_init(1.0 / std::sqrt(static_cast<double>(h)), model.w2.data.data(), model.w2.size());
    uniform_init(1.0 / std::sqrt(static_cast<double>(h)), model.b2.data(), model.b2.size());

    std::vector<std::size_t> all_rows(features.rows);
    std::iota(all_rows.begin(), all_rows.end(), 0);

    ProbeWorkspace ws;
    model.loss_trace.push_back(
        probe_forward(model, features, labels, all_rows, 0, all_rows.size(), ws, false));

    // Flat parameter/gradient views for Adam.
    const std::size_t n_params = model.parameter_count();
    AdamState adam(n_params);
    std::vector<double> flat_grad(n_params, 0.0);
    std::vector<double> flat_param(n_params, 0.0);

    auto gather = [&](std::vector<double>& flat) {
        std::size_t o = 0;
        std::copy(model.w1.data.begin(), model.w1.data.end(), flat.begin() + o);
        o += model.w1.size();
        std::copy(model.b1.begin(), model.b1.end(), flat.begin() + o);
        o += model.b1.size();
        std::copy(model.w2.data.begin(), model.w2.data.end(), flat.begin() + o);
        o += model.w2.size();
        std::copy(model.b2.begin(), model.b2.end(), flat.begin() + o);
    };
    auto scatter = [&](const std::vector<double>& flat) {
        std::size_t o = 0;
        std::copy(flat.begin() + o, flat.begin() + o + model.w1.size(), model.w1.data.begin());
        o += model.w1.size();
        std::copy(flat.begin() + o, flat.begin() + o + model.b1.size(), model.b1.begin());
        o += model.b1.size();
        std::copy(flat.begin() + o, flat.begin() + o + model.w2.size(), model.w2.data.begin());
        o += model.w2.size();
        std::copy(flat.begin() + o, flat.begin() + o + model.b2.size(), model.b2.begin());
    };

    std::vector<std::size_t> order = all_rows;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            const std::size_t bs = end - begin;
            double loss = probe_forward(model, features, labels, order, begin, end, ws, true);
            if (!std::isfinite(loss)) throw numerical_failure("train_probe: NaN loss");
            epoch_loss += loss;
            ++batches;

            // Backward through logits -> w2/b2 -> hidden (ReLU) -> w1/b1.
            Matrix batch(bs, d);
            for (std::size_t b = 0; b < bs; ++b)
                std::copy(features.row(order[begin + b]), features.row(order[begin + b]) + d,
                          batch.row(b));

            Matrix gw2 = matmul_tn(ws.hidden, ws.grad_logits);
            std::vector<double> gb2(kCategoryCount, 0.0);
            for (std::size_t b = 0; b < bs; ++b)
                for (std::size_t c = 0; c < kCategoryCount; ++c)
                    gb2[c] += ws.grad_logits(b, c);

            Matrix grad_hidden = matmul_nt(ws.grad_logits, model.w2);
            for (std::size_t b = 0; b < bs; ++b)
                for (std::size_t j = 0; j < h; ++j)
                    if (ws.hidden(b, j) <= 0.0) grad_hidden(b, j) = 0.0;

            Matrix gw1 = matmul_tn(batch, grad_hidden);
            std::vector<double> gb1(h, 0.0);
            for (std::size_t b = 0; b < bs; ++b)
                for (std::size_t j = 0; j < h; ++j) gb1[j] += grad_hidden(b, j);

            std::size_t o = 0;
            std::copy(gw1.data.begin(), gw1.data.end(), flat_grad.begin() + o);
            o += gw1.size();
            std::copy(gb1.begin(), gb1.end(), flat_grad.begin() + o);
            o += gb1.size();
            std::copy(gw2.data.begin(), gw2.data.end(), flat_grad.begin() + o);
            o += gw2.size();
            std::copy(gb2.begin(), gb2.end(), flat_grad.begin() + o);

            gather(flat_param);
            adam.step(flat_param, flat_grad, cfg.learning_rate);
            scatter(flat_param);
        }
        model.loss_trace.push_back(epoch_loss / static_cast<double>(batches));
    }
    return model;
}

std::vector<int> probe_predict(const ProbeModel& model, const Matrix& features) {
    require(features.cols == model.input_width, "probe_predict: width mismatch");
    Matrix hidden = matmul(features, model.w1);
    for (std::size_t i = 0; i < hidden.rows; ++i) {
        double* h = hidden.row(i);
        for (std::size_t j = 0; j < model.b1.size(); ++j) {
            h[j] += model.b1[j];
            if (h[j] < 0.0) h[j] = 0.0;
        }
    }
    Matrix logits = matmul(hidden, model.w2);
    std::vector<int> out(features.rows);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        double* lg = logits.row(i);
        int best = 0;
        double best_v = lg[0] + model.b2[0];
        for (std::size_t c = 1; c < kCategoryCount; ++c) {
            double v = lg[c] + model.b2[c];
            if (v > best_v) {  // tie keeps the lower class index
                best_v = v;
                best = static_cast<int>(c);
            }
        }
        out[i] = best;
    }
    return out;
}

Recoverability recoverability(const ProbeModel& model, const Matrix& test_features,
                              const std::vector<TokenCategory>& test_labels) {
    require(test_features.rows == test_labels.size(),
            "recoverability: feature/label misalignment");
    if (test_features.rows == 0) throw invalid_input("recoverability: empty test set");

    std::vector<int> pred = probe_predict(model, test_features);
    Recoverability rec;
    rec.total = test_labels.size();
    std::array<std::size_t, kCategoryCount> hits{}, support{};
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test_labels.size(); ++i) {
        auto truth = static_cast<std::size_t>(test_labels[i]);
        ++support[truth];
        if (pred[i] == static_cast<int>(truth)) {
            ++hits[truth];
            ++correct;
        }
    }
    rec.overall = static_cast<double>(correct) / static_cast<double>(rec.total);
    for (std::size_t c = 0; c < kCategoryCount; ++c) {
        rec.per_category[c].support = support[c];
        rec.per_category[c].defined = support[c] > 0;
        rec.per_category[c].accuracy =
            support[c] > 0 ? static_cast<double>(hits[c]) / static_cast<double>(support[c]) : 0.0;
    }
    return rec;
}

RecoverabilityCurve probe_curve(const FeatureStack& stack, const LabeledTokenCorpus& corpus,
                                const ProbeConfig& cfg) {
    stack.validate();
    require(stack.tokens() == corpus.total_tokens(),
            "probe_curve: stack token count differs from corpus");

    const std::vector<TokenCategory> labels = corpus.flat_labels();
    const std::vector<std::size_t> train_rows = corpus.row_indices(false);
    const std::vector<std::size_t> test_rows = corpus.row_indices(true);
    require(!train_rows.empty() && !test_rows.empty(),
            "probe_curve: both train and test splits must be non-empty");

    auto gather = [&](const std::vector<std::size_t>& rows, const Matrix& src,
                      std::vector<TokenCategory>& out_labels) {
        Matrix m(rows.size(), src.cols);
        out_labels.resize(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy(src.row(rows[i]), src.row(rows[i]) + src.cols, m.row(i));
            out_labels[i] = labels[rows[i]];
        }
        return m;
    };

    const std::size_t layers = stack.layer_count();
    RecoverabilityCurve curve;
    curve.config = cfg;
    curve.layer_ids.resize(layers);
    curve.per_layer.resize(layers);

    parallel_for(layers, [&](std::size_t l) {
        std::vector<TokenCategory> train_labels, test_labels;
        Matrix train_x = gather(train_rows, stack.text[l], train_labels);
        Matrix test_x = gather(test_rows, stack.text[l], test_labels);
        ProbeConfig layer_cfg = cfg;
        layer_cfg.seed = cfg.seed + static_cast<std::uint64_t>(l);
        ProbeModel model = train_probe(train_x, train_labels, layer_cfg, static_cast<int>(l));
        curve.per_layer[l] = recoverability(model, test_x, test_labels);
    });
    for (std::size_t l = 0; l < layers; ++l) curve.layer_ids[l] = static_cast<int>(l);
    return curve;
}

}  // namespace reinjectr
