#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "reinjectr/feature_stack.hpp"
#include "reinjectr/linalg.hpp"
#include "reinjectr/probe.hpp"
#include "reinjectr/reinject.hpp"

namespace reinjectr {

struct MMDiTConfig {
    int layers = 8;
    int width = 32;
    int text_tokens = 16;
    int image_tokens = 16;
    int heads = 4;
    int mlp_ratio = 4;
    int timestep_bins = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

// Desk-scale joint text/image transformer: per-block modality-specific
// Q/K/V/output projections feeding one shared self-attention over the
// concatenated token sequence, per-modality MLPs, learned additive timestep
// embedding, and an image-only output head (the text stream has no head,
// so text tokens are supervised only through attention).
struct ToyMMDiT {
    MMDiTConfig config;
    std::vector<Matrix> params;          // registry order
    std::vector<std::string> param_names;

    static ToyMMDiT init(const MMDiTConfig& cfg);

    std::size_t param_index(const std::string& name) const;
    const Matrix& param(const std::string& name) const;
    Matrix& param(const std::string& name);
    std::size_t parameter_count() const;
};

struct ForwardOptions {
    const ReinjectionPlan* plan = nullptr;
    const RotationMap* rotations = nullptr;

    // Pilot-study residual: text stream += pilot_weight * (*pilot_residual)
    // before every block >= pilot_start_layer.
    const Matrix* pilot_residual = nullptr;
    double pilot_weight = 0.0;
    int pilot_start_layer = 2;

    bool mask_image_to_text = false;  // image queries cannot read text keys
    bool mask_text_to_image = false;
    int active_text_tokens = -1;  // tokens beyond this are padding (masked as keys)
    bool capture_image = false;
};

struct ForwardResult {
    Matrix predicted_noise;  // image_tokens x width
    FeatureStack stack;      // layers+1 text matrices, layer 0 = input embedding
};

ForwardResult forward(const ToyMMDiT& model, const Matrix& text, const Matrix& image,
                      double t, const ForwardOptions& opts = {});

struct DiffusionBatch {
    Matrix clean_latent;  // x0, image_tokens x width
    Matrix noise;         // epsilon, same shape
    Matrix noisy_latent;  // z_t = (1 - t) x0 + t eps
    Matrix cond;          // text embeddings, text_tokens x width
    double t = 0.5;
    int active_text_tokens = -1;

    static DiffusionBatch make(Matrix x0, Matrix noise, double t, Matrix cond,
                               int active_text_tokens = -1);
};

// Mean squared error between predicted and true noise, image latents only.
double epsilon_loss(const ToyMMDiT& model, const DiffusionBatch& batch,
                    const ForwardOptions& opts = {});

struct Gradients {
    std::vector<Matrix> params;  // same shapes/order as model.params
    Matrix text_input;
    Matrix image_input;
};

double epsilon_loss_with_grad(const ToyMMDiT& model, const DiffusionBatch& batch,
                              Gradients& grads, const ForwardOptions& opts = {});

// Central-difference check (h = 1e-5) of the analytic gradient. selector is
// a parameter name, "params" for every group, or "input:text". Returns the
// max relative error over sampled coordinates.
double grad_check(const ToyMMDiT& model, const DiffusionBatch& batch,
                  const std::string& selector, const ForwardOptions& opts = {},
                  std::size_t samples_per_group = 8, std::uint64_t seed = 0);

// Synthetic conditioning task: image latents are linear renderings of the
// prompt's attribute tokens, so the denoiser can only beat the unconditional
// optimum by reading the text stream.
struct SimTask {
    LabeledTokenCorpus corpus;
    std::vector<std::string> vocab;
    std::unordered_map<std::string, int> vocab_index;
    Matrix embeddings;            // vocab x width
    std::vector<Matrix> renders;  // per vocab entry, image_tokens x width
    MMDiTConfig config;

    static SimTask build(LabeledTokenCorpus corpus, const MMDiTConfig& cfg,
                         std::uint64_t seed);

    Matrix text_embedding(const TokenizedPrompt& prompt, int* active_tokens) const;
    Matrix render_latent(const TokenizedPrompt& prompt) const;
    std::vector<std::size_t> train_prompt_indices() const;
};

struct TrainReport {
    std::vector<double> loss_trace;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

TrainReport train_toy(ToyMMDiT& model, const SimTask& task, int steps, std::uint64_t seed,
                      double learning_rate = 1e-3, const ForwardOptions& opts = {});

struct MinimalPairRow {
    double weight = 0.0;
    double deep_text_similarity = 0.0;  // cosine to prompt B's un-injected deep features
    double output_similarity = 0.0;     // cosine of predicted noise to B's baseline
};

// Section-5.1 pilot: while denoising prompt A, add w * T_B^(0) into every
// block >= start_layer and measure how far outputs drift toward B.
std::vector<MinimalPairRow> minimal_pair_demo(const ToyMMDiT& model, const Matrix& text_a,
                                              const Matrix& text_b, const Matrix& image,
                                              double t, const std::vector<double>& weights,
                                              int start_layer = 2,
                                              int active_text_tokens = -1);

// "PRTM" checkpoint: magic, version u16, config block, then per-tensor
// rows u32, cols u32, f64 payload in registry order, all little-endian.
void save_model(const std::string& path, const ToyMMDiT& model);
ToyMMDiT load_model(const std::string& path);

}  // namespace reinjectr
