#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "reinjectr/feature_stack.hpp"
#include "reinjectr/linalg.hpp"

namespace reinjectr {

// Per-target orthogonal rotations calibrated against one shared origin layer.
struct RotationMap {
    int origin_layer = 0;
    std::map<int, Matrix> entries;  // target layer -> d x d rotation
    std::string dataset_id;
    std::uint32_t calib_tokens = 0;
    float timestep = 0.0f;

    const Matrix* find(int target_layer) const {
        auto it = entries.find(target_layer);
        return it == entries.end() ? nullptr : &it->second;
    }
};

struct ReinjectionPlan {
    int origin_layer = 1;
    std::vector<int> target_layers;  // ascending, all > origin_layer
    double weight = 0.025;
    bool anchor_enabled = true;
    bool rotation_enabled = true;
    double ln_eps = 1e-6;

    bool is_target(int layer) const;
    void validate() const;
};

struct CalibrationResult {
    Matrix rotation;        // d x d, orthogonal
    bool degenerate = false;  // X^T Y was rank-deficient
};

// Orthogonal Procrustes: R = U V^T from SVD(X^T Y), minimizing |XR - Y|_F
// over orthogonal R. Inputs are expected to be layer-normalized already;
// a warning is emitted when their row stats are far from (0, 1) or N < d.
CalibrationResult calibrate_rotation(const Matrix& x_origin, const Matrix& y_target);

// Eq. 7-10 fusion. With anchoring: LN both sides, add w * (origin [* R]),
// then restore the target layer's token-wise mean/std. Without anchoring:
// plain residual t_tgt + w * (t_ori [* R]).
Matrix anchored_inject(const Matrix& t_ori, const Matrix& t_tgt, const ReinjectionPlan& plan,
                       const Matrix* rotation = nullptr);

// Pilot-study injection: T_A^(l) += w * t_b0 for every layer >= start_layer.
FeatureStack residual_attribute_inject(const FeatureStack& stack_a, const Matrix& t_b0,
                                       double w, int start_layer);

struct LayerMode {
    enum class Kind { full, range, stride };
    Kind kind = Kind::full;
    int start = -1;
    int end = -1;
    int step = 1;

    static LayerMode full() { return {}; }
    static LayerMode range(int start, int end) {
        return {Kind::range, start, end, 1};
    }
    static LayerMode stride(int step) { return {Kind::stride, -1, -1, step}; }
};

// Target-layer geometry: full deeper coverage {l | l > origin}, a clamped
// inclusive range, or strided sampling from origin+1.
ReinjectionPlan plan_layers(int total_layers, int origin, const LayerMode& mode);

struct CostAssumptions {
    std::size_t tokens = 512;
    std::size_t width = 1536;
    std::size_t steps = 28;
    std::size_t cfg_multiplier = 2;       // conditional + unconditional branches
    double block_flops_ref = 1.53e12;     // one backbone block, reference constant
    std::size_t applications() const { return steps * cfg_multiplier; }
};

// Analytic per-target-block overhead, decomposed per component and summed
// over all applications (denoising steps x CFG branches).
struct CostReport {
    double plain_add_flops = 0.0;
    double anchoring_flops = 0.0;
    double rotation_flops = 0.0;
    double total_flops = 0.0;
    double relative_flops = 1.0;  // (block + total) / block

    double origin_copy_bytes = 0.0;      // shared across targets, counted once
    double anchor_buffer_bytes = 0.0;    // per target
    double rotation_matrix_bytes = 0.0;  // per target, amortized over all steps
    double total_bytes = 0.0;

    std::size_t target_blocks = 0;
    CostAssumptions assumptions;
};

CostReport estimate_cost(std::size_t tokens, std::size_t width, std::size_t applications,
                         const ReinjectionPlan& plan, const CostAssumptions& assumptions = {});

// Calibrates one rotation per plan target from an un-intervened stack,
// layer-normalizing both sides first.
RotationMap build_rotation_map(const FeatureStack& stack, int origin,
                               const std::vector<int>& targets, double ln_eps,
                               const std::string& dataset_id = "");

// Pure-analysis application of a plan: each target layer of the stack is
// replaced by anchored_inject against the original origin layer.
FeatureStack apply_plan_to_stack(const FeatureStack& stack, const ReinjectionPlan& plan,
                                 const RotationMap* rotations = nullptr);

// "PRRM" container: magic, version u16, origin u16, entry count u16, then
// per entry (target u16, d u32, d*d little-endian f32).
void save_rotation_map(const std::string& path, const RotationMap& map);
RotationMap load_rotation_map(const std::string& path);

// Appendix-style per-model defaults, addressable by name.
struct ReinjectionPreset {
    std::string name;
    int total_layers = 24;
    int origin_layer = 1;
    double weight = 0.025;
    std::size_t steps = 28;
    std::size_t cfg_multiplier = 2;
    std::size_t width = 1536;
    std::size_t tokens = 512;
};

const ReinjectionPreset& lookup_preset(const std::string& name);  // sd3, sd35, flux, qwen

}  // namespace reinjectr
