#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "optode/autodiff.hpp"
#include "optode/pixel_fit.hpp"
#include "optode/simulator.hpp"
#include "optode/usage_log.hpp"

namespace optode::nn {

struct ModelConfig {
    std::string backbone = "attention_small";  ///< "conv_small" or "attention_small"
    int width = 48;
    int height = 48;
    int input_channels = 3;
    int patch = 8;        ///< attention backbone only; must divide both sides
    int embed_dim = 64;   ///< divisible by heads_attn, >= 4
    int layers = 2;       ///< transformer blocks (attention backbone)
    int heads_attn = 4;
    Scalar lambda_physics = 0.0;
    Scalar lambda_biofouling = 0.0;
    Scalar lr = 3e-3;
    Scalar weight_decay = 1e-4;
    int epochs = 20;
    int batch_size = 16;
    std::uint64_t seed = 1;
    bool augment = true;  ///< horizontal/vertical flips during training
    bool pgnn = false;    ///< frozen per-pixel quenching maps as extra inputs

    void validate() const;
    int down_factor() const;       ///< pixels per token side
    int grid_h() const { return height / down_factor(); }
    int grid_w() const { return width / down_factor(); }
    int tokens() const { return grid_h() * grid_w(); }
};

/// Everything one forward pass produces, at pixel resolution.
struct ModelOutputs {
    Scalar do_pred = 0.0;                 ///< umol/L
    std::vector<Scalar> i0_map;           ///< per pixel
    std::vector<Scalar> k_sv_map;         ///< per pixel
    std::vector<Scalar> confidence;       ///< per pixel, in [0,1]
    Scalar biofouling_pred = 0.0;         ///< in [0,1]
    std::vector<Scalar> attention;        ///< per pixel, min-max scaled to [0,1]
};

struct LossBreakdown {
    Scalar l_data = 0.0;
    Scalar l_physics = 0.0;
    Scalar l_biofouling = 0.0;
    Scalar l_total = 0.0;
    bool confidence_floored = false;  ///< mean confidence hit the 1e-3 floor
};

struct EpochStats {
    int epoch = 0;
    Scalar l_data = 0.0;
    Scalar l_physics = 0.0;
    Scalar l_biofouling = 0.0;
    Scalar l_total = 0.0;
    Scalar val_mae = 0.0;  ///< NaN when no validation days
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;   ///< epoch whose weights the model retains
    Scalar best_val_mae = 0.0;
};

struct TrainOptions {
    eval::UsageLog* usage_log = nullptr;
    /// When false, skips the physics/biofouling history metrics entirely
    /// (plain supervised training). Never changes the weight trajectory for
    /// lambda_physics = lambda_biofouling = 0.
    bool aux_metrics = true;
};

/// The physics-informed calibrator. A conv or patch-attention trunk produces
/// a token grid; four heads decode the DO regression, the per-token quenching
/// parameters, a reliability score, and the biofouling scalar. The reliability
/// score is used twice: sigmoid as the physics-confidence mask, softmax as the
/// pooling attention that gates the global representation.
class CalibratorNet {
public:
    explicit CalibratorNet(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::size_t param_count() const;

    /// Deterministic forward pass at pixel resolution. frozen is required
    /// (and used for the quenching maps) when the config is PGNN.
    ModelOutputs forward(const sim::Frame& frame,
                         const pixfit::ParameterMaps* frozen = nullptr);

    std::vector<Scalar> snapshot() const;            ///< flat copy of all weights
    void restore(const std::vector<Scalar>& snap);

    friend TrainHistory train_model(CalibratorNet&,
                                    std::span<const sim::DayDataset* const>,
                                    std::span<const sim::DayDataset* const>,
                                    const pixfit::ParameterMaps*, const TrainOptions&);
    friend Scalar gradient_check(CalibratorNet&, const sim::Frame&, Scalar);

private:
    struct Batch;
    struct ForwardNodes;
    Batch make_batch(std::span<const sim::Frame* const> frames,
                     std::span<const Scalar> bio_scores,
                     const pixfit::ParameterMaps* frozen,
                     const std::vector<std::pair<bool, bool>>* flips) const;
    ForwardNodes build_forward(Graph& g, const Batch& batch);
    int build_loss(Graph& g, const Batch& batch, const ForwardNodes& f,
                   bool* floored) const;

    ModelConfig cfg_;
    std::vector<Param> params_;
    std::vector<int> trunk_param_ids_;  // indices into params_ by role
};

/// Composite training objective evaluated outside the tape (the reference
/// formulas the graph must agree with):
///   l_data       = (do_pred - do_gt)^2
///   l_physics    = mean over valid pixels of conf * r^2, divided by the mean
///                  confidence (floored at 1e-3), r the quenching residual
///   l_biofouling = (biofouling_pred - biofouling_score)^2
///   l_total      = l_data + lambda_p * l_physics + lambda_b * l_biofouling
LossBreakdown composite_loss(const ModelOutputs& out, const sim::Frame& frame,
                             const sim::DayDataset& day, const ModelConfig& cfg);

/// Mini-batch AdamW on the composite loss; retains the best-validation-epoch
/// weights (best train loss when no validation days). Reproducible from
/// cfg.seed. frozen_maps is required for PGNN configs.
TrainHistory train_model(CalibratorNet& net,
                         std::span<const sim::DayDataset* const> train_days,
                         std::span<const sim::DayDataset* const> val_days,
                         const pixfit::ParameterMaps* frozen_maps = nullptr,
                         const TrainOptions& opts = {});

/// Max relative error between reverse-mode and central-difference gradients
/// of l_total over every parameter of a model built from cfg.
Scalar gradient_check(const ModelConfig& cfg, const sim::Frame& frame,
                      Scalar epsilon = 1e-5);

/// Per-pixel quenching residual of a (trained) model on a frame; pixels with
/// no usable intensity are NaN.
std::vector<Scalar> residual_map(CalibratorNet& net, const sim::Frame& frame,
                                 const pixfit::ParameterMaps* frozen = nullptr);

/// Versioned binary model format: text header, JSON metadata, then raw
/// little-endian float32 weights.
void save_model(const CalibratorNet& net, const std::string& path, int epoch = -1,
                Scalar val_mae = 0.0);
CalibratorNet load_model(const std::string& path);

}  // namespace optode::nn
