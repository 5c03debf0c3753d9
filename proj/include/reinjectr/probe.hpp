#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "reinjectr/feature_stack.hpp"
#include "reinjectr/linalg.hpp"

namespace reinjectr {

enum class TokenCategory : std::uint8_t {
    noun = 0,
    adjective = 1,
    spatial_relation = 2,
    numeral = 3,
    others = 4,
};

inline constexpr std::size_t kCategoryCount = 5;

TokenCategory parse_category(const std::string& name);  // invalid_input on unknown
const char* category_name(TokenCategory c);

// A word with its category label as it arrives from a prompt source.
struct RawWord {
    std::string word;
    std::string label;
};
using RawPrompt = std::vector<RawWord>;

// Splits one word into sub-word tokens. The default splitter halves words
// longer than 6 characters; it stands in for a real tokenizer while still
// exercising sub-token label propagation.
using Tokenizer = std::function<std::vector<std::string>(const std::string&)>;
Tokenizer default_tokenizer();

struct TokenizedPrompt {
    std::vector<std::string> tokens;
    std::vector<TokenCategory> labels;  // one per token, inherited from the word
    bool is_test = false;
};

struct LabeledTokenCorpus {
    std::vector<TokenizedPrompt> prompts;

    std::size_t total_tokens() const;
    std::vector<TokenCategory> flat_labels() const;
    std::vector<std::size_t> row_indices(bool test_split) const;
};

// Drops the fixed "a photo of" prefix when present, tokenizes each word,
// propagates word labels to all sub-tokens, and splits prompts into
// train/test with a seeded shuffle. Exactly train_count + test_count
// prompts are kept, in their original relative order.
LabeledTokenCorpus build_corpus(const std::vector<RawPrompt>& raw_prompts,
                                const Tokenizer& tokenizer, std::size_t train_count,
                                std::size_t test_count, std::uint64_t seed);

// Deterministic synthetic prompt source in the "a photo of ..." style with
// per-word category labels; feeds the toy pipeline and the probing tests.
std::vector<RawPrompt> synthetic_prompts(std::size_t count, std::uint64_t seed);

// Degenerate corpus with one single-token prompt per label; lets externally
// supplied (feature, label) rows flow through probe_curve.
LabeledTokenCorpus single_token_corpus(const std::vector<TokenCategory>& labels,
                                       const std::vector<bool>& is_test);

struct ProbeConfig {
    std::size_t hidden_width = 256;
    double learning_rate = 1e-4;
    std::size_t batch_size = 64;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;
};

// One-hidden-layer ReLU MLP, d -> hidden -> 5, trained with Adam under a
// protocol that is identical for every layer.
struct ProbeModel {
    int layer_id = 0;
    std::size_t input_width = 0;
    Matrix w1;  // d x hidden
    std::vector<double> b1;
    Matrix w2;  // hidden x 5
    std::vector<double> b2;
    std::vector<double> loss_trace;  // [initial full loss, epoch means...]

    std::size_t parameter_count() const {
        return w1.size() + b1.size() + w2.size() + b2.size();
    }
};

ProbeModel train_probe(const Matrix& features, const std::vector<TokenCategory>& labels,
                       const ProbeConfig& cfg, int layer_id = 0);

std::vector<int> probe_predict(const ProbeModel& model, const Matrix& features);

struct CategoryAccuracy {
    double accuracy = 0.0;
    std::size_t support = 0;
    bool defined = false;  // false when the category is absent from the test set
};

struct Recoverability {
    double overall = 0.0;
    std::size_t total = 0;
    std::array<CategoryAccuracy, kCategoryCount> per_category;
};

Recoverability recoverability(const ProbeModel& model, const Matrix& test_features,
                              const std::vector<TokenCategory>& test_labels);

struct RecoverabilityCurve {
    std::vector<int> layer_ids;
    std::vector<Recoverability> per_layer;
    ProbeConfig config;
};

// Trains one probe per layer (seeded seed + layer_id, identical config) on
// the train split and evaluates on the test split. Layer 0 is included as
// the encoder-output baseline.
RecoverabilityCurve probe_curve(const FeatureStack& stack, const LabeledTokenCorpus& corpus,
                                const ProbeConfig& cfg);

}  // namespace reinjectr
