#include "reinjectr/reinject.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "reinjectr/binary_io.hpp"

namespace reinjectr {

bool ReinjectionPlan::is_target(int layer) const {
    return std::binary_search(target_layers.begin(), target_layers.end(), layer);
}

void ReinjectionPlan::validate() const {
    require(weight >= 0.0, "plan: weight must be >= 0");
    require(ln_eps > 0.0, "plan: ln_eps must be > 0");
    require(!target_layers.empty(), "plan: empty target set");
    require(std::is_sorted(target_layers.begin(), target_layers.end()),
            "plan: targets must be ascending");
    require(target_layers.front() > origin_layer, "plan: targets must be deeper than origin");
}

CalibrationResult calibrate_rotation(const Matrix& x_origin, const Matrix& y_target) {
    require(x_origin.rows == y_target.rows && x_origin.cols == y_target.cols,
            "calibrate_rotation: shape mismatch");
    const std::size_t n = x_origin.rows;
    const std::size_t d = x_origin.cols;
    if (n < d)
        emit_warning("calibrate_rotation: fewer samples than dimensions (N=" +
                     std::to_string(n) + ", d=" + std::to_string(d) + ")");

    // Eq. 9 operates on normalized features; flag callers that skipped LN.
    auto check_normalized = [](const Matrix& m, const char* which) {
        TokenStats st = token_stats(m, 1e-12);
        double worst_mean = 0.0, worst_std = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) {
            worst_mean = std::max(worst_mean, std::abs(st.mean[i]));
            worst_std = std::max(worst_std, std::abs(st.std[i] - 1.0));
        }
        if (worst_mean > 0.1 || worst_std > 0.1)
            emit_warning(std::string("calibrate_rotation: ") + which +
                         " does not look layer-normalized (max |mean|=" +
                         std::to_string(worst_mean) + ", max |std-1|=" +
                         std::to_string(worst_std) + ")");
    };
    check_normalized(x_origin, "x_origin");
    check_normalized(y_target, "y_target");

    Matrix cross = matmul_tn(x_origin, y_target);  // d x d
    SvdResult dec = svd(cross);

    CalibrationResult result;
    result.rotation = matmul(dec.u, dec.vt);
    // Layer-normalized features always have the all-ones direction in the
    // kernel of X^T Y (rows sum to zero), and that component is inert for
    // normalized inputs, so one vanishing singular value is structural.
    // Degenerate means the rank drops further than that.
    if (dec.sigma.size() >= 2) {
        double tol = static_cast<double>(d) * dec.sigma.front() * 1e-12;
        result.degenerate = dec.sigma[dec.sigma.size() - 2] <= tol;
    } else {
        result.degenerate = dec.sigma.empty() || dec.sigma.front() <= 0.0;
    }
    return result;
}

Matrix anchored_inject(const Matrix& t_ori, const Matrix& t_tgt, const ReinjectionPlan& plan,
                       const Matrix* rotation) {
    require(t_ori.same_shape(t_tgt), "anchored_inject: shape mismatch");
    if (plan.rotation_enabled && rotation == nullptr)
        throw invalid_input("anchored_inject: rotation enabled but no matrix supplied");
    if (rotation != nullptr)
        require(rotation->rows == t_ori.cols && rotation->cols == t_ori.cols,
                "anchored_inject: rotation dimensions mismatch");

    auto aligned_origin = [&](const Matrix& ori) {
        return plan.rotation_enabled ? matmul(ori, *rotation) : ori;
    };

    if (!plan.anchor_enabled) {
        Matrix add = aligned_origin(t_ori);
        Matrix out = t_tgt;
        for (std::size_t i = 0; i < out.data.size(); ++i)
            out.data[i] += plan.weight * add.data[i];
        return out;
    }

    // Fuse in LN space, then restore the target distribution exactly by
    // matching each row's mean and raw variance. A multiply-only rescale
    // would leave the fused rows with variance 1 + 2w rho + w^2, drifting
    // off the target statistics as w grows.
    const std::size_t n = t_tgt.rows;
    const std::size_t d = t_tgt.cols;
    std::vector<double> tgt_mean(n), tgt_var(n);
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* r = t_tgt.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += r[j];
        mean *= inv_d;
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double dv = r[j] - mean;
            var += dv * dv;
        }
        tgt_mean[i] = mean;
        tgt_var[i] = var * inv_d;
    }

    Matrix fused = layer_norm(t_tgt, plan.ln_eps);
    Matrix add = aligned_origin(layer_norm(t_ori, plan.ln_eps));
    for (std::size_t i = 0; i < fused.data.size(); ++i)
        fused.data[i] += plan.weight * add.data[i];

    Matrix out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* f = fused.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += f[j];
        mean *= inv_d;
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double dv = f[j] - mean;
            var += dv * dv;
        }
        var *= inv_d;
        const double scale = var > 0.0 ? std::sqrt(tgt_var[i] / var) : 0.0;
        double* o = out.row(i);
        for (std::size_t j = 0; j < d; ++j) o[j] = (f[j] - mean) * scale + tgt_mean[i];
    }
    return out;
}

FeatureStack residual_attribute_inject(const FeatureStack& stack_a, const Matrix& t_b0,
                                       double w, int start_layer) {
    stack_a.validate();
    require(start_layer >= 0, "residual_attribute_inject: negative start layer");
    require(t_b0.rows == stack_a.tokens() && t_b0.cols == stack_a.width(),
            "residual_attribute_inject: residual shape mismatch");

    FeatureStack out = stack_a;
    for (std::size_t l = static_cast<std::size_t>(start_layer); l < out.text.size(); ++l) {
        Matrix& t = out.text[l];
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += w * t_b0.data[i];
    }
    return out;
}

ReinjectionPlan plan_layers(int total_layers, int origin, const LayerMode& mode) {
    require(total_layers >= 2, "plan_layers: need at least 2 layers");
    require(origin >= 0 && origin < total_layers - 1, "plan_layers: origin out of range");

    int start = origin + 1;
    int end = total_layers - 1;
    int step = 1;
    if (mode.kind == LayerMode::Kind::range) {
        start = std::max(mode.start, origin + 1);
        end = std::min(mode.end, total_layers - 1);
    } else if (mode.kind == LayerMode::Kind::stride) {
        require(mode.step >= 1, "plan_layers: stride must be >= 1");
        step = mode.step;
    }

    ReinjectionPlan plan;
    plan.origin_layer = origin;
    for (int l = start; l <= end; l += step) plan.target_layers.push_back(l);
    if (plan.target_layers.empty()) throw invalid_input("plan_layers: empty target set");
    return plan;
}

CostReport estimate_cost(std::size_t tokens, std::size_t width, std::size_t applications,
                         const ReinjectionPlan& plan, const CostAssumptions& assumptions) {
    require(tokens > 0 && width > 0 && applications > 0, "estimate_cost: all dims positive");
    plan.validate();

    const double nd = static_cast<double>(tokens) * static_cast<double>(width);
    const double apps = static_cast<double>(applications);

    CostReport report;
    report.assumptions = assumptions;
    report.assumptions.tokens = tokens;
    report.assumptions.width = width;
    report.target_blocks = plan.target_layers.size();

    // Per application: residual add n*d; anchoring ~7 n*d (stats, two LNs,
    // restore); rotation 2 n*d^2 (one n x d by d x d multiply).
    report.plain_add_flops = nd * apps;
    report.anchoring_flops = plan.anchor_enabled ? 7.0 * nd * apps : 0.0;
    report.rotation_flops =
        plan.rotation_enabled ? 2.0 * nd * static_cast<double>(width) * apps : 0.0;
    report.total_flops =
        report.plain_add_flops + report.anchoring_flops + report.rotation_flops;
    report.relative_flops = 1.0 + report.total_flops / assumptions.block_flops_ref;

    // FP16 storage, 2 bytes per element. The origin copy is shared by all
    // targets; R is persistent per target and amortized over all steps.
    report.origin_copy_bytes = nd * 2.0;
    report.anchor_buffer_bytes = plan.anchor_enabled ? 4.0 * static_cast<double>(tokens) * 2.0 : 0.0;
    report.rotation_matrix_bytes =
        plan.rotation_enabled ? static_cast<double>(width) * static_cast<double>(width) * 2.0 : 0.0;
    report.total_bytes =
        report.origin_copy_bytes + report.anchor_buffer_bytes + report.rotation_matrix_bytes;
    return report;
}

RotationMap build_rotation_map(const FeatureStack& stack, int origin,
                               const std::vector<int>& targets, double ln_eps,
                               const std::string& dataset_id) {
    stack.validate();
    require(origin >= 0 && static_cast<std::size_t>(origin) < stack.layer_count(),
            "build_rotation_map: origin out of range");

    RotationMap map;
    map.origin_layer = origin;
    map.dataset_id = dataset_id;
    map.calib_tokens = static_cast<std::uint32_t>(stack.tokens());
    map.timestep = stack.timestep;

    Matrix x = layer_norm(stack.text[static_cast<std::size_t>(origin)], ln_eps);
    for (int target : targets) {
        require(target > origin && static_cast<std::size_t>(target) < stack.layer_count(),
                "build_rotation_map: target out of range");
        Matrix y = layer_norm(stack.text[static_cast<std::size_t>(target)], ln_eps);
        CalibrationResult cal = calibrate_rotation(x, y);
        if (cal.degenerate)
            emit_warning("build_rotation_map: degenerate cross-covariance at layer " +
                         std::to_string(target));
        map.entries.emplace(target, std::move(cal.rotation));
    }
    return map;
}

FeatureStack apply_plan_to_stack(const FeatureStack& stack, const ReinjectionPlan& plan,
                                 const RotationMap* rotations) {
    stack.validate();
    plan.validate();
    require(static_cast<std::size_t>(plan.target_layers.back()) < stack.layer_count(),
            "apply_plan_to_stack: target beyond stack depth");
    if (plan.rotation_enabled)
        require(rotations != nullptr, "apply_plan_to_stack: rotation map required");

    const Matrix& origin = stack.text[static_cast<std::size_t>(plan.origin_layer)];
    FeatureStack out = stack;
    for (int target : plan.target_layers) {
        const Matrix* r = nullptr;
        if (plan.rotation_enabled) {
            r = rotations->find(target);
            if (r == nullptr)
                throw invalid_input("apply_plan_to_stack: no rotation for layer " +
                                    std::to_string(target));
        }
        out.text[static_cast<std::size_t>(target)] =
            anchored_inject(origin, stack.text[static_cast<std::size_t>(target)], plan, r);
    }
    return out;
}

namespace {
constexpr char kRotationMagic[4] = {'P', 'R', 'R', 'M'};
constexpr std::uint16_t kRotationVersion = 1;
}  // namespace

void save_rotation_map(const std::string& path, const RotationMap& map) {
    require(map.entries.size() <= 0xFFFF, "save_rotation_map: too many entries");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);

    ByteWriter w(out);
    w.bytes(kRotationMagic, 4);
    w.u16(kRotationVersion);
    w.u16(static_cast<std::uint16_t>(map.origin_layer));
    w.u16(static_cast<std::uint16_t>(map.entries.size()));
    for (const auto& [target, rot] : map.entries) {
        require(rot.rows == rot.cols, "save_rotation_map: rotation must be square");
        w.u16(static_cast<std::uint16_t>(target));
        w.u32(static_cast<std::uint32_t>(rot.rows));
        for (double v : rot.data) w.f32(static_cast<float>(v));
    }
    w.flush();
    if (!out) throw io_error("write failed: " + path);
}

RotationMap load_rotation_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    ByteReader r(in, path);

    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kRotationMagic, 4) != 0)
        throw corrupt_dump("not a PRRM file: " + path);
    std::uint16_t version = r.u16();
    if (version != kRotationVersion)
        throw unsupported_version("unsupported PRRM version " + std::to_string(version));

    RotationMap map;
    map.origin_layer = r.u16();
    std::uint16_t count = r.u16();
    for (std::uint16_t i = 0; i < count; ++i) {
        int target = r.u16();
        std::uint32_t d = r.u32();
        Matrix rot(d, d);
        for (double& v : rot.data) v = static_cast<double>(r.f32());
        map.entries.emplace(target, std::move(rot));
    }
    return map;
}

const ReinjectionPreset& lookup_preset(const std::string& name) {
    static const std::vector<ReinjectionPreset> presets = {
        {"sd3", 24, 1, 0.025, 28, 2, 1536, 512},
        {"sd35", 38, 2, 0.025, 28, 2, 2432, 512},
        {"flux", 58, 2, 0.025, 50, 2, 3072, 512},
        {"qwen", 60, 30, 0.025, 50, 2, 3584, 512},
    };
    for (const auto& p : presets)
        if (p.name == name) return p;
    throw invalid_input("unknown preset: " + name);
}

}  // namespace reinjectr
