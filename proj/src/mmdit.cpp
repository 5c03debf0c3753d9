#include "reinjectr/mmdit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "reinjectr/binary_io.hpp"

namespace reinjectr {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kMaskValue = -1e30;
constexpr double kInvSqrt2 = 0.70710678118654752;
constexpr double kInvSqrt2Pi = 0.39894228040143268;

// Per-layer tensor registry slots.
enum LayerTensor {
    kLn1TextGamma = 0,
    kLn1TextBeta,
    kLn1ImgGamma,
    kLn1ImgBeta,
    kWqText,
    kWkText,
    kWvText,
    kWoText,
    kWqImg,
    kWkImg,
    kWvImg,
    kWoImg,
    kLn2TextGamma,
    kLn2TextBeta,
    kLn2ImgGamma,
    kLn2ImgBeta,
    kMlpTextW1,
    kMlpTextB1,
    kMlpTextW2,
    kMlpTextB2,
    kMlpImgW1,
    kMlpImgB1,
    kMlpImgW2,
    kMlpImgB2,
    kPerLayer
};

enum GlobalTensor {
    kTimeEmbed = 0,
    kOutNormGamma,
    kOutNormBeta,
    kOutProjW,
    kOutProjB,
    kGlobalCount
};

std::size_t lix(int layer, int tensor) {
    return static_cast<std::size_t>(layer) * kPerLayer + static_cast<std::size_t>(tensor);
}

std::size_t gix(const MMDiTConfig& cfg, int tensor) {
    return static_cast<std::size_t>(cfg.layers) * kPerLayer + static_cast<std::size_t>(tensor);
}

const char* layer_tensor_name(int tensor) {
    static const char* names[kPerLayer] = {
        "ln1_text.gamma", "ln1_text.beta", "ln1_img.gamma", "ln1_img.beta",
        "attn.wq_text",   "attn.wk_text", "attn.wv_text",  "attn.wo_text",
        "attn.wq_img",    "attn.wk_img",  "attn.wv_img",   "attn.wo_img",
        "ln2_text.gamma", "ln2_text.beta", "ln2_img.gamma", "ln2_img.beta",
        "mlp_text.w1",    "mlp_text.b1",  "mlp_text.w2",   "mlp_text.b2",
        "mlp_img.w1",     "mlp_img.b1",   "mlp_img.w2",    "mlp_img.b2"};
    return names[tensor];
}

Matrix vstack(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows + b.rows, a.cols);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
    return out;
}

Matrix take_rows(const Matrix& m, std::size_t r0, std::size_t r1) {
    Matrix out(r1 - r0, m.cols);
    std::copy(m.data.begin() + r0 * m.cols, m.data.begin() + r1 * m.cols, out.data.begin());
    return out;
}

void add_inplace(Matrix& a, const Matrix& b, double scale = 1.0) {
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += scale * b.data[i];
}

void add_row_broadcast(Matrix& m, const double* row) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        double* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) r[j] += row[j];
    }
}

std::vector<double> column_sums(const Matrix& m) {
    std::vector<double> s(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) s[j] += m(i, j);
    return s;
}

struct LnCache {
    Matrix xhat;
    std::vector<double> inv_std;
};

Matrix ln_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta, LnCache* cache) {
    const std::size_t d = x.cols;
    Matrix y(x.rows, d);
    if (cache) {
        cache->xhat = Matrix(x.rows, d);
        cache->inv_std.resize(x.rows);
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* r = x.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += r[j];
        mean *= inv_d;
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double dv = r[j] - mean;
            var += dv * dv;
        }
        var *= inv_d;
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);
        if (cache) cache->inv_std[i] = inv_std;
        double* out = y.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (r[j] - mean) * inv_std;
            if (cache) cache->xhat(i, j) = xh;
            out[j] = xh * gamma.data[j] + beta.data[j];
        }
    }
    return y;
}

Matrix ln_backward(const Matrix& dy, const LnCache& cache, const Matrix& gamma,
                   Matrix& dgamma, Matrix& dbeta) {
    const std::size_t d = dy.cols;
    const double inv_d = 1.0 / static_cast<double>(d);
    Matrix dx(dy.rows, d);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        const double* dyr = dy.row(i);
        const double* xh = cache.xhat.row(i);
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgamma.data[j] += dyr[j] * xh[j];
            dbeta.data[j] += dyr[j];
            const double dxh = dyr[j] * gamma.data[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        double* dxr = dx.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dyr[j] * gamma.data[j];
            dxr[j] = cache.inv_std[i] * (dxh - m1 - xh[j] * m2);
        }
    }
    return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

struct LayerCache {
    Matrix t_in, i_in;
    LnCache ln1_t, ln1_i;
    Matrix tn, in;          // LN outputs feeding the projections
    Matrix q, k, v;         // (n+m) x d
    std::vector<Matrix> probs;  // per head, (n+m) x (n+m)
    Matrix attn;            // concatenated head outputs, (n+m) x d
    Matrix t_res, i_res;    // post-attention residual streams
    LnCache ln2_t, ln2_i;
    Matrix t2n, i2n;
    Matrix mlp_t_pre, mlp_i_pre;  // pre-activation
    Matrix mlp_t_act, mlp_i_act;
};

struct OutputCache {
    Matrix i_final;
    LnCache ln_out;
    Matrix normed;
};

struct ForwardState {
    std::vector<LayerCache> layers;
    OutputCache head;
    int time_bin = 0;
};

// Additive attention mask; entries are 0 or kMaskValue. Masked logits
// underflow to exactly zero probability, so masked paths carry exactly
// zero gradient.
Matrix build_mask(const MMDiTConfig& cfg, const ForwardOptions& opts) {
    const std::size_t n = static_cast<std::size_t>(cfg.text_tokens);
    const std::size_t s = n + static_cast<std::size_t>(cfg.image_tokens);
    Matrix mask(s, s, 0.0);
    const std::size_t active =
        opts.active_text_tokens < 0 ? n : static_cast<std::size_t>(opts.active_text_tokens);
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
            bool blocked = false;
            if (j < n && j >= active) blocked = true;  // padding text keys
            if (opts.mask_image_to_text && i >= n && j < n) blocked = true;
            if (opts.mask_text_to_image && i < n && j >= n) blocked = true;
            if (blocked) mask(i, j) = kMaskValue;
        }
    }
    return mask;
}

int timestep_bin(const MMDiTConfig& cfg, double t) {
    int bin = static_cast<int>(t * cfg.timestep_bins);
    return std::clamp(bin, 0, cfg.timestep_bins - 1);
}

}  // namespace

void MMDiTConfig::validate() const {
    require(layers > 0 && width > 0 && text_tokens > 0 && image_tokens > 0 && heads > 0 &&
                mlp_ratio > 0 && timestep_bins > 0,
            "mmdit config: all dimensions must be positive");
    require(width % heads == 0, "mmdit config: width must be divisible by heads");
}

ToyMMDiT ToyMMDiT::init(const MMDiTConfig& cfg) {
    cfg.validate();
    const std::size_t d = static_cast<std::size_t>(cfg.width);
    const std::size_t f = d * static_cast<std::size_t>(cfg.mlp_ratio);

    ToyMMDiT model;
    model.config = cfg;
    model.params.resize(static_cast<std::size_t>(cfg.layers) * kPerLayer + kGlobalCount);
    model.param_names.resize(model.params.size());

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    auto gauss_fill = [&](Matrix& m, double scale) {
        for (double& v : m.data) v = dist(rng) * scale;
    };
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double f_scale = 1.0 / std::sqrt(static_cast<double>(f));

    for (int l = 0; l < cfg.layers; ++l) {
        auto set = [&](int tensor, Matrix m) {
            model.params[lix(l, tensor)] = std::move(m);
            model.param_names[lix(l, tensor)] =
                "layer" + std::to_string(l) + "." + layer_tensor_name(tensor);
        };
        for (int tensor : {kLn1TextGamma, kLn1ImgGamma, kLn2TextGamma, kLn2ImgGamma})
            set(tensor, Matrix(1, d, 1.0));
        for (int tensor : {kLn1TextBeta, kLn1ImgBeta, kLn2TextBeta, kLn2ImgBeta})
            set(tensor, Matrix(1, d, 0.0));
        for (int tensor : {kWqText, kWkText, kWvText, kWoText, kWqImg, kWkImg, kWvImg, kWoImg}) {
            Matrix m(d, d);
            gauss_fill(m, w_scale);
            set(tensor, std::move(m));
        }
        for (int tensor : {kMlpTextW1, kMlpImgW1}) {
            Matrix m(d, f);
            gauss_fill(m, w_scale);
            set(tensor, std::move(m));
        }
        for (int tensor : {kMlpTextB1, kMlpImgB1}) set(tensor, Matrix(1, f, 0.0));
        for (int tensor : {kMlpTextW2, kMlpImgW2}) {
            Matrix m(f, d);
            gauss_fill(m, f_scale);
            set(tensor, std::move(m));
        }
        for (int tensor : {kMlpTextB2, kMlpImgB2}) set(tensor, Matrix(1, d, 0.0));
    }

    auto set_global = [&](int tensor, const char* name, Matrix m) {
        model.params[gix(cfg, tensor)] = std::move(m);
        model.param_names[gix(cfg, tensor)] = name;
    };
    Matrix time_embed(static_cast<std::size_t>(cfg.timestep_bins), d);
    gauss_fill(time_embed, 0.1);
    set_global(kTimeEmbed, "time_embed", std::move(time_embed));
    set_global(kOutNormGamma, "out_norm.gamma", Matrix(1, d, 1.0));
    set_global(kOutNormBeta, "out_norm.beta", Matrix(1, d, 0.0));
    Matrix out_w(d, d);
    gauss_fill(out_w, w_scale);
    set_global(kOutProjW, "out_proj.w", std::move(out_w));
    set_global(kOutProjB, "out_proj.b", Matrix(1, d, 0.0));
    return model;
}

std::size_t ToyMMDiT::param_index(const std::string& name) const {
    for (std::size_t i = 0; i < param_names.size(); ++i)
        if (param_names[i] == name) return i;
    throw invalid_input("unknown parameter: " + name);
}

const Matrix& ToyMMDiT::param(const std::string& name) const { return params[param_index(name)]; }
Matrix& ToyMMDiT::param(const std::string& name) { return params[param_index(name)]; }

std::size_t ToyMMDiT::parameter_count() const {
    std::size_t n = 0;
    for (const Matrix& p : params) n += p.size();
    return n;
}

namespace {

ForwardResult forward_impl(const ToyMMDiT& model, const Matrix& text, const Matrix& image,
                           double t, const ForwardOptions& opts, ForwardState* state) {
    const MMDiTConfig& cfg = model.config;
    cfg.validate();
    const std::size_t n = static_cast<std::size_t>(cfg.text_tokens);
    const std::size_t m = static_cast<std::size_t>(cfg.image_tokens);
    const std::size_t d = static_cast<std::size_t>(cfg.width);
    require(text.rows == n && text.cols == d, "forward: text shape mismatch");
    require(image.rows == m && image.cols == d, "forward: image shape mismatch");
    require(std::isfinite(t) && t >= 0.0 && t <= 1.0, "forward: timestep out of [0,1]");
    if (opts.active_text_tokens >= 0)
        require(static_cast<std::size_t>(opts.active_text_tokens) <= n,
                "forward: active_text_tokens out of range");

    const ReinjectionPlan* plan = opts.plan;
    if (plan != nullptr) {
        plan->validate();
        require(plan->target_layers.back() < cfg.layers, "forward: plan target beyond depth");
        require(plan->origin_layer >= 0 && plan->origin_layer < cfg.layers,
                "forward: plan origin out of range");
        if (plan->rotation_enabled && plan->weight != 0.0)
            require(opts.rotations != nullptr, "forward: plan needs a rotation map");
    }
    if (opts.pilot_residual != nullptr)
        require(opts.pilot_residual->rows == n && opts.pilot_residual->cols == d,
                "forward: pilot residual shape mismatch");

    const int bin = timestep_bin(cfg, t);
    const Matrix& time_embed = model.params[gix(cfg, kTimeEmbed)];

    Matrix tcur = text;
    Matrix icur = image;
    add_row_broadcast(icur, time_embed.row(static_cast<std::size_t>(bin)));

    ForwardResult result;
    result.stack.timestep = static_cast<float>(t);
    result.stack.text.reserve(static_cast<std::size_t>(cfg.layers) + 1);

    if (state) {
        state->layers.resize(static_cast<std::size_t>(cfg.layers));
        state->time_bin = bin;
    }

    const Matrix mask = build_mask(cfg, opts);
    const int heads = cfg.heads;
    const std::size_t dh = d / static_cast<std::size_t>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t s = n + m;

    for (int l = 0; l < cfg.layers; ++l) {
        // Inference-time interventions replace T^(l) before the block runs;
        // w = 0 short-circuits so baselines stay bit-reproducible.
        if (plan != nullptr && plan->weight != 0.0 && plan->is_target(l)) {
            const Matrix* rot = nullptr;
            if (plan->rotation_enabled) {
                rot = opts.rotations->find(l);
                if (rot == nullptr)
                    throw invalid_input("forward: no rotation for target layer " +
                                        std::to_string(l));
            }
            tcur = anchored_inject(
                result.stack.text[static_cast<std::size_t>(plan->origin_layer)], tcur, *plan,
                rot);
        }
        if (opts.pilot_residual != nullptr && opts.pilot_weight != 0.0 &&
            l >= opts.pilot_start_layer)
            add_inplace(tcur, *opts.pilot_residual, opts.pilot_weight);

        result.stack.text.push_back(tcur);
        if (opts.capture_image) result.stack.image.push_back(icur);

        LayerCache local;
        LayerCache& cache = state ? state->layers[static_cast<std::size_t>(l)] : local;
        cache.t_in = tcur;
        cache.i_in = icur;

        cache.tn = ln_forward(tcur, model.params[lix(l, kLn1TextGamma)],
                              model.params[lix(l, kLn1TextBeta)], state ? &cache.ln1_t : nullptr);
        cache.in = ln_forward(icur, model.params[lix(l, kLn1ImgGamma)],
                              model.params[lix(l, kLn1ImgBeta)], state ? &cache.ln1_i : nullptr);

        cache.q = vstack(matmul(cache.tn, model.params[lix(l, kWqText)]),
                         matmul(cache.in, model.params[lix(l, kWqImg)]));
        cache.k = vstack(matmul(cache.tn, model.params[lix(l, kWkText)]),
                         matmul(cache.in, model.params[lix(l, kWkImg)]));
        cache.v = vstack(matmul(cache.tn, model.params[lix(l, kWvText)]),
                         matmul(cache.in, model.params[lix(l, kWvImg)]));

        cache.attn = Matrix(s, d);
        cache.probs.assign(static_cast<std::size_t>(heads), Matrix());
        for (int h = 0; h < heads; ++h) {
            const std::size_t c0 = static_cast<std::size_t>(h) * dh;
            Matrix qh(s, dh), kh(s, dh), vh(s, dh);
            for (std::size_t i = 0; i < s; ++i) {
                std::copy(cache.q.row(i) + c0, cache.q.row(i) + c0 + dh, qh.row(i));
                std::copy(cache.k.row(i) + c0, cache.k.row(i) + c0 + dh, kh.row(i));
                std::copy(cache.v.row(i) + c0, cache.v.row(i) + c0 + dh, vh.row(i));
            }
            Matrix logits = matmul_nt(qh, kh);
            for (std::size_t i = 0; i < s; ++i) {
                double* row = logits.row(i);
                const double* mrow = mask.row(i);
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < s; ++j) {
                    row[j] = row[j] * scale + mrow[j];
                    mx = std::max(mx, row[j]);
                }
                double denom = 0.0;
                for (std::size_t j = 0; j < s; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    denom += row[j];
                }
                const double inv = 1.0 / denom;
                for (std::size_t j = 0; j < s; ++j) row[j] *= inv;
            }
            Matrix oh = matmul(logits, vh);  // logits now holds probabilities
            for (std::size_t i = 0; i < s; ++i)
                std::copy(oh.row(i), oh.row(i) + dh, cache.attn.row(i) + c0);
            if (state) cache.probs[static_cast<std::size_t>(h)] = std::move(logits);
        }

        Matrix attn_t = take_rows(cache.attn, 0, n);
        Matrix attn_i = take_rows(cache.attn, n, s);
        cache.t_res = tcur;
        add_inplace(cache.t_res, matmul(attn_t, model.params[lix(l, kWoText)]));
        cache.i_res = icur;
        add_inplace(cache.i_res, matmul(attn_i, model.params[lix(l, kWoImg)]));

        cache.t2n = ln_forward(cache.t_res, model.params[lix(l, kLn2TextGamma)],
                               model.params[lix(l, kLn2TextBeta)], state ? &cache.ln2_t : nullptr);
        cache.i2n = ln_forward(cache.i_res, model.params[lix(l, kLn2ImgGamma)],
                               model.params[lix(l, kLn2ImgBeta)], state ? &cache.ln2_i : nullptr);

        auto mlp = [&](const Matrix& xn, int w1_ix, int b1_ix, Matrix& pre, Matrix& act) {
            pre = matmul(xn, model.params[lix(l, w1_ix)]);
            add_row_broadcast(pre, model.params[lix(l, b1_ix)].row(0));
            act = Matrix(pre.rows, pre.cols);
            for (std::size_t i = 0; i < pre.data.size(); ++i) act.data[i] = gelu(pre.data[i]);
        };
        mlp(cache.t2n, kMlpTextW1, kMlpTextB1, cache.mlp_t_pre, cache.mlp_t_act);
        mlp(cache.i2n, kMlpImgW1, kMlpImgB1, cache.mlp_i_pre, cache.mlp_i_act);

        Matrix t_next = cache.t_res;
        Matrix mlp_t_out = matmul(cache.mlp_t_act, model.params[lix(l, kMlpTextW2)]);
        add_row_broadcast(mlp_t_out, model.params[lix(l, kMlpTextB2)].row(0));
        add_inplace(t_next, mlp_t_out);

        Matrix i_next = cache.i_res;
        Matrix mlp_i_out = matmul(cache.mlp_i_act, model.params[lix(l, kMlpImgW2)]);
        add_row_broadcast(mlp_i_out, model.params[lix(l, kMlpImgB2)].row(0));
        add_inplace(i_next, mlp_i_out);

        tcur = std::move(t_next);
        icur = std::move(i_next);
    }

    result.stack.text.push_back(tcur);
    if (opts.capture_image) result.stack.image.push_back(icur);

    OutputCache local_head;
    OutputCache& head = state ? state->head : local_head;
    head.i_final = icur;
    head.normed = ln_forward(icur, model.params[gix(cfg, kOutNormGamma)],
                             model.params[gix(cfg, kOutNormBeta)], state ? &head.ln_out : nullptr);
    result.predicted_noise = matmul(head.normed, model.params[gix(cfg, kOutProjW)]);
    add_row_broadcast(result.predicted_noise, model.params[gix(cfg, kOutProjB)].row(0));

    if (!result.predicted_noise.all_finite())
        throw numerical_failure("forward: non-finite activations");
    return result;
}

}  // namespace

ForwardResult forward(const ToyMMDiT& model, const Matrix& text, const Matrix& image, double t,
                      const ForwardOptions& opts) {
    return forward_impl(model, text, image, t, opts, nullptr);
}

DiffusionBatch DiffusionBatch::make(Matrix x0, Matrix noise, double t, Matrix cond,
                                    int active_text_tokens) {
    require(x0.same_shape(noise), "batch: x0/noise shape mismatch");
    require(t > 0.0 && t < 1.0, "batch: t must lie in (0,1)");
    DiffusionBatch batch;
    batch.noisy_latent = Matrix(x0.rows, x0.cols);
    for (std::size_t i = 0; i < x0.data.size(); ++i)
        batch.noisy_latent.data[i] = (1.0 - t) * x0.data[i] + t * noise.data[i];
    batch.clean_latent = std::move(x0);
    batch.noise = std::move(noise);
    batch.cond = std::move(cond);
    batch.t = t;
    batch.active_text_tokens = active_text_tokens;
    return batch;
}

double epsilon_loss(const ToyMMDiT& model, const DiffusionBatch& batch,
                    const ForwardOptions& opts) {
    ForwardOptions o = opts;
    if (o.active_text_tokens < 0) o.active_text_tokens = batch.active_text_tokens;
    ForwardResult res = forward(model, batch.cond, batch.noisy_latent, batch.t, o);
    require(res.predicted_noise.same_shape(batch.noise), "epsilon_loss: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < batch.noise.data.size(); ++i) {
        double d = res.predicted_noise.data[i] - batch.noise.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(batch.noise.data.size());
}

double epsilon_loss_with_grad(const ToyMMDiT& model, const DiffusionBatch& batch,
                              Gradients& grads, const ForwardOptions& opts) {
    require(opts.plan == nullptr && opts.pilot_residual == nullptr,
            "epsilon_loss_with_grad: gradients with interventions are unsupported");
    const MMDiTConfig& cfg = model.config;
    ForwardOptions o = opts;
    if (o.active_text_tokens < 0) o.active_text_tokens = batch.active_text_tokens;

    ForwardState state;
    ForwardResult res =
        forward_impl(model, batch.cond, batch.noisy_latent, batch.t, o, &state);

    grads.params.clear();
    grads.params.reserve(model.params.size());
    for (const Matrix& p : model.params) grads.params.emplace_back(p.rows, p.cols, 0.0);

    const std::size_t n = static_cast<std::size_t>(cfg.text_tokens);
    const std::size_t m = static_cast<std::size_t>(cfg.image_tokens);
    const std::size_t d = static_cast<std::size_t>(cfg.width);
    const std::size_t s = n + m;
    const int heads = cfg.heads;
    const std::size_t dh = d / static_cast<std::size_t>(heads);
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    double loss = 0.0;
    Matrix dpred(m, d);
    const double inv_count = 1.0 / static_cast<double>(m * d);
    for (std::size_t i = 0; i < dpred.data.size(); ++i) {
        double diff = res.predicted_noise.data[i] - batch.noise.data[i];
        loss += diff * diff;
        dpred.data[i] = 2.0 * diff * inv_count;
    }
    loss *= inv_count;

    // Output head.
    add_inplace(grads.params[gix(cfg, kOutProjW)], matmul_tn(state.head.normed, dpred));
    {
        std::vector<double> db = column_sums(dpred);
        Matrix& g = grads.params[gix(cfg, kOutProjB)];
        for (std::size_t j = 0; j < d; ++j) g.data[j] += db[j];
    }
    Matrix dnormed = matmul_nt(dpred, model.params[gix(cfg, kOutProjW)]);
    Matrix dicur = ln_backward(dnormed, state.head.ln_out, model.params[gix(cfg, kOutNormGamma)],
                               grads.params[gix(cfg, kOutNormGamma)],
                               grads.params[gix(cfg, kOutNormBeta)]);
    Matrix dtcur(n, d, 0.0);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerCache& cache = state.layers[static_cast<std::size_t>(l)];

        // MLP sublayer (residual): d(out) flows into both the residual input
        // and the MLP branch.
        auto mlp_backward = [&](Matrix& dout, const Matrix& xn, const LnCache& ln_cache,
                                const Matrix& pre, const Matrix& act, int w1_ix, int b1_ix,
                                int w2_ix, int b2_ix, int g_ix, int be_ix) {
            Matrix dact = matmul_nt(dout, model.params[lix(l, w2_ix)]);
            add_inplace(grads.params[lix(l, w2_ix)], matmul_tn(act, dout));
            {
                std::vector<double> db = column_sums(dout);
                Matrix& g = grads.params[lix(l, b2_ix)];
                for (std::size_t j = 0; j < g.data.size(); ++j) g.data[j] += db[j];
            }
            Matrix dpre(dact.rows, dact.cols);
            for (std::size_t i = 0; i < dact.data.size(); ++i)
                dpre.data[i] = dact.data[i] * gelu_grad(pre.data[i]);
            add_inplace(grads.params[lix(l, w1_ix)], matmul_tn(xn, dpre));
            {
                std::vector<double> db = column_sums(dpre);
                Matrix& g = grads.params[lix(l, b1_ix)];
                for (std::size_t j = 0; j < g.data.size(); ++j) g.data[j] += db[j];
            }
            Matrix dxn = matmul_nt(dpre, model.params[lix(l, w1_ix)]);
            Matrix dres = ln_backward(dxn, ln_cache, model.params[lix(l, g_ix)],
                                      grads.params[lix(l, g_ix)], grads.params[lix(l, be_ix)]);
            add_inplace(dout, dres);  // dout now = gradient at the sublayer input
        };

        mlp_backward(dtcur, cache.t2n, cache.ln2_t, cache.mlp_t_pre, cache.mlp_t_act, kMlpTextW1,
                     kMlpTextB1, kMlpTextW2, kMlpTextB2, kLn2TextGamma, kLn2TextBeta);
        mlp_backward(dicur, cache.i2n, cache.ln2_i, cache.mlp_i_pre, cache.mlp_i_act, kMlpImgW1,
                     kMlpImgB1, kMlpImgW2, kMlpImgB2, kLn2ImgGamma, kLn2ImgBeta);

        // Attention sublayer.
        Matrix attn_t = take_rows(cache.attn, 0, n);
        Matrix attn_i = take_rows(cache.attn, n, s);
        Matrix dattn_t = matmul_nt(dtcur, model.params[lix(l, kWoText)]);
        Matrix dattn_i = matmul_nt(dicur, model.params[lix(l, kWoImg)]);
        add_inplace(grads.params[lix(l, kWoText)], matmul_tn(attn_t, dtcur));
        add_inplace(grads.params[lix(l, kWoImg)], matmul_tn(attn_i, dicur));
        Matrix dattn = vstack(dattn_t, dattn_i);

        Matrix dq(s, d, 0.0), dk(s, d, 0.0), dv(s, d, 0.0);
        for (int h = 0; h < heads; ++h) {
            const std::size_t c0 = static_cast<std::size_t>(h) * dh;
            Matrix qh(s, dh), kh(s, dh), vh(s, dh), doh(s, dh);
            for (std::size_t i = 0; i < s; ++i) {
                std::copy(cache.q.row(i) + c0, cache.q.row(i) + c0 + dh, qh.row(i));
                std::copy(cache.k.row(i) + c0, cache.k.row(i) + c0 + dh, kh.row(i));
                std::copy(cache.v.row(i) + c0, cache.v.row(i) + c0 + dh, vh.row(i));
                std::copy(dattn.row(i) + c0, dattn.row(i) + c0 + dh, doh.row(i));
            }
            const Matrix& probs = cache.probs[static_cast<std::size_t>(h)];
            Matrix dprobs = matmul_nt(doh, vh);
            Matrix dvh = matmul_tn(probs, doh);
            Matrix dlogits(s, s);
            for (std::size_t i = 0; i < s; ++i) {
                const double* p = probs.row(i);
                const double* dp = dprobs.row(i);
                double inner = 0.0;
                for (std::size_t j = 0; j < s; ++j) inner += p[j] * dp[j];
                double* dl = dlogits.row(i);
                for (std::size_t j = 0; j < s; ++j) dl[j] = p[j] * (dp[j] - inner);
            }
            Matrix dqh = matmul(dlogits, kh);
            Matrix dkh = matmul_tn(dlogits, qh);
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t j = 0; j < dh; ++j) {
                    dq(i, c0 + j) += dqh(i, j) * att_scale;
                    dk(i, c0 + j) += dkh(i, j) * att_scale;
                    dv(i, c0 + j) += dvh(i, j);
                }
            }
        }

        Matrix dq_t = take_rows(dq, 0, n), dq_i = take_rows(dq, n, s);
        Matrix dk_t = take_rows(dk, 0, n), dk_i = take_rows(dk, n, s);
        Matrix dv_t = take_rows(dv, 0, n), dv_i = take_rows(dv, n, s);

        add_inplace(grads.params[lix(l, kWqText)], matmul_tn(cache.tn, dq_t));
        add_inplace(grads.params[lix(l, kWkText)], matmul_tn(cache.tn, dk_t));
        add_inplace(grads.params[lix(l, kWvText)], matmul_tn(cache.tn, dv_t));
        add_inplace(grads.params[lix(l, kWqImg)], matmul_tn(cache.in, dq_i));
        add_inplace(grads.params[lix(l, kWkImg)], matmul_tn(cache.in, dk_i));
        add_inplace(grads.params[lix(l, kWvImg)], matmul_tn(cache.in, dv_i));

        Matrix dtn = matmul_nt(dq_t, model.params[lix(l, kWqText)]);
        add_inplace(dtn, matmul_nt(dk_t, model.params[lix(l, kWkText)]));
        add_inplace(dtn, matmul_nt(dv_t, model.params[lix(l, kWvText)]));
        Matrix din = matmul_nt(dq_i, model.params[lix(l, kWqImg)]);
        add_inplace(din, matmul_nt(dk_i, model.params[lix(l, kWkImg)]));
        add_inplace(din, matmul_nt(dv_i, model.params[lix(l, kWvImg)]));

        add_inplace(dtcur, ln_backward(dtn, cache.ln1_t, model.params[lix(l, kLn1TextGamma)],
                                       grads.params[lix(l, kLn1TextGamma)],
                                       grads.params[lix(l, kLn1TextBeta)]));
        add_inplace(dicur, ln_backward(din, cache.ln1_i, model.params[lix(l, kLn1ImgGamma)],
                                       grads.params[lix(l, kLn1ImgGamma)],
                                       grads.params[lix(l, kLn1ImgBeta)]));
    }

    grads.text_input = dtcur;
    grads.image_input = dicur;
    {
        // d(image + e_t) -> timestep table row.
        std::vector<double> de = column_sums(dicur);
        Matrix& g = grads.params[gix(cfg, kTimeEmbed)];
        double* row = g.row(static_cast<std::size_t>(state.time_bin));
        for (std::size_t j = 0; j < d; ++j) row[j] += de[j];
    }

    for (const Matrix& g : grads.params)
        if (!g.all_finite()) throw numerical_failure("backward: non-finite gradients");
    return loss;
}

double grad_check(const ToyMMDiT& model, const DiffusionBatch& batch,
                  const std::string& selector, const ForwardOptions& opts,
                  std::size_t samples_per_group, std::uint64_t seed) {
    Gradients grads;
    epsilon_loss_with_grad(model, batch, grads, opts);

    std::vector<std::pair<int, std::size_t>> coords;  // (group index or -1 for text input, flat index)
    std::mt19937_64 rng(seed);

    auto sample_group = [&](int group, std::size_t count) {
        for (std::size_t si = 0; si < std::min(samples_per_group, count); ++si)
            coords.emplace_back(group, rng() % count);
    };

    if (selector == "params") {
        for (std::size_t g = 0; g < model.params.size(); ++g)
            sample_group(static_cast<int>(g), model.params[g].size());
    } else if (selector == "input:text") {
        sample_group(-1, batch.cond.size());
    } else {
        std::size_t g = model.param_index(selector);
        sample_group(static_cast<int>(g), model.params[g].size());
    }

    const double h = 1e-5;
    ToyMMDiT probe_model = model;
    DiffusionBatch probe_batch = batch;
    double max_rel = 0.0;
    for (auto [group, idx] : coords) {
        double* slot = group < 0 ? &probe_batch.cond.data[idx]
                                 : &probe_model.params[static_cast<std::size_t>(group)].data[idx];
        const double original = *slot;
        *slot = original + h;
        double up = epsilon_loss(probe_model, probe_batch, opts);
        *slot = original - h;
        double down = epsilon_loss(probe_model, probe_batch, opts);
        *slot = original;

        double fd = (up - down) / (2.0 * h);
        double analytic = group < 0 ? grads.text_input.data[idx]
                                    : grads.params[static_cast<std::size_t>(group)].data[idx];
        double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

SimTask SimTask::build(LabeledTokenCorpus corpus, const MMDiTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SimTask task;
    task.config = cfg;
    task.corpus = std::move(corpus);

    for (const auto& p : task.corpus.prompts) {
        require(p.tokens.size() <= static_cast<std::size_t>(cfg.text_tokens),
                "sim task: prompt longer than text_tokens");
        for (const std::string& tok : p.tokens)
            if (!task.vocab_index.count(tok)) {
                task.vocab_index.emplace(tok, static_cast<int>(task.vocab.size()));
                task.vocab.push_back(tok);
            }
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    const std::size_t d = static_cast<std::size_t>(cfg.width);
    const std::size_t m = static_cast<std::size_t>(cfg.image_tokens);
    task.embeddings = Matrix(task.vocab.size(), d);
    for (double& v : task.embeddings.data) v = dist(rng);
    task.renders.reserve(task.vocab.size());
    for (std::size_t i = 0; i < task.vocab.size(); ++i) {
        Matrix r(m, d);
        for (double& v : r.data) v = dist(rng);
        task.renders.push_back(std::move(r));
    }
    return task;
}

Matrix SimTask::text_embedding(const TokenizedPrompt& prompt, int* active_tokens) const {
    const std::size_t n = static_cast<std::size_t>(config.text_tokens);
    Matrix text(n, static_cast<std::size_t>(config.width), 0.0);
    for (std::size_t i = 0; i < prompt.tokens.size(); ++i) {
        auto it = vocab_index.find(prompt.tokens[i]);
        require(it != vocab_index.end(), "sim task: token outside vocabulary");
        std::copy(embeddings.row(static_cast<std::size_t>(it->second)),
                  embeddings.row(static_cast<std::size_t>(it->second)) + text.cols, text.row(i));
    }
    if (active_tokens) *active_tokens = static_cast<int>(prompt.tokens.size());
    return text;
}

Matrix SimTask::render_latent(const TokenizedPrompt& prompt) const {
    Matrix x0(static_cast<std::size_t>(config.image_tokens),
              static_cast<std::size_t>(config.width), 0.0);
    require(!prompt.tokens.empty(), "sim task: empty prompt");
    const double scale = 1.0 / std::sqrt(static_cast<double>(prompt.tokens.size()));
    for (const std::string& tok : prompt.tokens) {
        auto it = vocab_index.find(tok);
        require(it != vocab_index.end(), "sim task: token outside vocabulary");
        add_inplace(x0, renders[static_cast<std::size_t>(it->second)], scale);
    }
    return x0;
}

std::vector<std::size_t> SimTask::train_prompt_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < corpus.prompts.size(); ++i)
        if (!corpus.prompts[i].is_test) out.push_back(i);
    return out;
}

namespace {

struct AdamTensors {
    std::vector<Matrix> m, v;
    std::size_t t = 0;

    explicit AdamTensors(const std::vector<Matrix>& shapes) {
        m.reserve(shapes.size());
        v.reserve(shapes.size());
        for (const Matrix& p : shapes) {
            m.emplace_back(p.rows, p.cols, 0.0);
            v.emplace_back(p.rows, p.cols, 0.0);
        }
    }

    void step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, double lr) {
        constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t g = 0; g < params.size(); ++g) {
            for (std::size_t i = 0; i < params[g].data.size(); ++i) {
                double grad = grads[g].data[i];
                m[g].data[i] = beta1 * m[g].data[i] + (1.0 - beta1) * grad;
                v[g].data[i] = beta2 * v[g].data[i] + (1.0 - beta2) * grad * grad;
                params[g].data[i] -=
                    lr * (m[g].data[i] / bc1) / (std::sqrt(v[g].data[i] / bc2) + eps);
            }
        }
    }
};

}  // namespace

TrainReport train_toy(ToyMMDiT& model, const SimTask& task, int steps, std::uint64_t seed,
                      double learning_rate, const ForwardOptions& opts) {
    require(steps >= 1, "train_toy: steps must be >= 1");
    require(task.config.layers == model.config.layers &&
                task.config.width == model.config.width &&
                task.config.text_tokens == model.config.text_tokens &&
                task.config.image_tokens == model.config.image_tokens,
            "train_toy: task/model config mismatch");
    std::vector<std::size_t> train_prompts = task.train_prompt_indices();
    require(!train_prompts.empty(), "train_toy: no train prompts");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> t_dist(0.05, 0.95);

    AdamTensors adam(model.params);
    Gradients grads;
    TrainReport report;
    report.loss_trace.reserve(static_cast<std::size_t>(steps));

    const std::size_t m = static_cast<std::size_t>(model.config.image_tokens);
    const std::size_t d = static_cast<std::size_t>(model.config.width);

    for (int step = 0; step < steps; ++step) {
        const TokenizedPrompt& prompt =
            task.corpus.prompts[train_prompts[rng() % train_prompts.size()]];
        int active = 0;
        Matrix cond = task.text_embedding(prompt, &active);
        Matrix x0 = task.render_latent(prompt);
        Matrix noise(m, d);
        for (double& v : noise.data) v = gauss(rng);
        double t = t_dist(rng);

        DiffusionBatch batch = DiffusionBatch::make(std::move(x0), std::move(noise), t,
                                                    std::move(cond), active);
        double loss = epsilon_loss_with_grad(model, batch, grads, opts);
        if (!std::isfinite(loss)) throw numerical_failure("train_toy: loss diverged");
        adam.step(model.params, grads.params, learning_rate);
        report.loss_trace.push_back(loss);
    }
    report.initial_loss = report.loss_trace.front();
    report.final_loss = report.loss_trace.back();
    return report;
}

std::vector<MinimalPairRow> minimal_pair_demo(const ToyMMDiT& model, const Matrix& text_a,
                                              const Matrix& text_b, const Matrix& image,
                                              double t, const std::vector<double>& weights,
                                              int start_layer, int active_text_tokens) {
    require(text_a.same_shape(text_b), "minimal_pair_demo: prompts must share shape");

    ForwardOptions base_opts;
    base_opts.active_text_tokens = active_text_tokens;
    ForwardResult run_b = forward(model, text_b, image, t, base_opts);

    std::vector<MinimalPairRow> table;
    table.reserve(weights.size());
    for (double w : weights) {
        ForwardOptions opts = base_opts;
        if (w != 0.0) {
            opts.pilot_residual = &text_b;  // prompt B's layer-0 features
            opts.pilot_weight = w;
            opts.pilot_start_layer = start_layer;
        }
        ForwardResult run = forward(model, text_a, image, t, opts);
        MinimalPairRow row;
        row.weight = w;
        row.deep_text_similarity = cosine_flat(run.stack.text.back(), run_b.stack.text.back());
        row.output_similarity = cosine_flat(run.predicted_noise, run_b.predicted_noise);
        table.push_back(row);
    }
    return table;
}

namespace {
constexpr char kModelMagic[4] = {'P', 'R', 'T', 'M'};
constexpr std::uint16_t kModelVersion = 1;
}  // namespace

void save_model(const std::string& path, const ToyMMDiT& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    ByteWriter w(out);
    w.bytes(kModelMagic, 4);
    w.u16(kModelVersion);
    const MMDiTConfig& c = model.config;
    w.u16(static_cast<std::uint16_t>(c.layers));
    w.u32(static_cast<std::uint32_t>(c.width));
    w.u32(static_cast<std::uint32_t>(c.text_tokens));
    w.u32(static_cast<std::uint32_t>(c.image_tokens));
    w.u16(static_cast<std::uint16_t>(c.heads));
    w.u16(static_cast<std::uint16_t>(c.mlp_ratio));
    w.u16(static_cast<std::uint16_t>(c.timestep_bins));
    w.u64(c.seed);
    for (const Matrix& p : model.params) {
        w.u32(static_cast<std::uint32_t>(p.rows));
        w.u32(static_cast<std::uint32_t>(p.cols));
        for (double v : p.data) w.f64(v);
    }
    w.flush();
    if (!out) throw io_error("write failed: " + path);
}

ToyMMDiT load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    ByteReader r(in, path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kModelMagic, 4) != 0)
        throw corrupt_dump("not a PRTM file: " + path);
    std::uint16_t version = r.u16();
    if (version != kModelVersion)
        throw unsupported_version("unsupported PRTM version " + std::to_string(version));

    MMDiTConfig cfg;
    cfg.layers = r.u16();
    cfg.width = static_cast<int>(r.u32());
    cfg.text_tokens = static_cast<int>(r.u32());
    cfg.image_tokens = static_cast<int>(r.u32());
    cfg.heads = r.u16();
    cfg.mlp_ratio = r.u16();
    cfg.timestep_bins = r.u16();
    cfg.seed = r.u64();

    ToyMMDiT model = ToyMMDiT::init(cfg);
    for (Matrix& p : model.params) {
        std::uint32_t rows = r.u32();
        std::uint32_t cols = r.u32();
        if (rows != p.rows || cols != p.cols)
            throw corrupt_dump("checkpoint tensor shape mismatch in " + path);
        for (double& v : p.data) v = r.f64();
    }
    return model;
}

}  // namespace reinjectr
