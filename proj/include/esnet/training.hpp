#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "esnet/network.hpp"

namespace esnet {

enum class OptimizerKind { Sgd, Adam };

const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);

/// Shared by both update rules. For Adam, `momentum` is the first-moment
/// decay (beta1).
struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Sgd;
    double base_lr = 5e-4;
    double power = 0.9;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t max_iter = 1;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

template <typename T>
struct OptimizerState {
    OptimizerConfig config;
    std::vector<Tensor4<T>> velocity;  // one per layout entry; empty for running stats
    std::vector<Tensor4<T>> second_moment;  // Adam only
    std::size_t updates = 0;

    OptimizerState(const ParamLayout& layout, OptimizerConfig cfg);
};

/// base_lr * (1 - iter / max_iter)^power; throws when iter > max_iter.
double poly_lr(std::size_t iter, const OptimizerConfig& cfg);

/// v <- momentum * v + grad + wd * param (wd on conv parameters only);
/// param <- param - lr * v. Running statistics are left alone.
template <typename T>
void sgd_apply(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, double lr);

/// sgd_apply at the poly learning rate for `iter`; returns that rate.
template <typename T>
double sgd_step(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, std::size_t iter);

/// g' = grad + wd * param (conv parameters only); bias-corrected first and
/// second moments of g'; param <- param - lr * m_hat / (sqrt(v_hat) + eps).
template <typename T>
void adam_apply(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, double lr);

/// The update rule named by state.config.kind at the poly rate for `iter`.
template <typename T>
double optimizer_step(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, std::size_t iter);

// ---------------------------------------------------------------------------

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

    std::size_t classes() const { return classes_; }
    /// Pixels with ground truth `gt` predicted as `pred`.
    std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }
    std::uint64_t& operator()(std::size_t gt, std::size_t pred) { return counts_[gt * classes_ + pred]; }
    std::uint64_t total() const;
    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;
};

/// Adds one count per non-ignored pixel. Throws PreconditionError on
/// out-of-range labels (ground truth equal to ignore_index is skipped).
void confusion_update(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt, int ignore_index = 255);

struct MiouResult {
    std::vector<std::optional<double>> per_class;  // empty when the class never occurs
    std::optional<double> mean;                    // empty for an all-zero matrix
};

/// IoU_c = tp / (row + col - tp); classes with a zero denominator are
/// excluded from the mean.
MiouResult miou(const ConfusionMatrix& cm);
std::optional<double> pixel_accuracy(const ConfusionMatrix& cm);

// ---------------------------------------------------------------------------

struct Sample {
    Tensor4d image;  // (1, 3, H, W) in [0, 1]
    LabelMap label;  // (1, H, W)
};

/// Axis-aligned colored rectangles on a dark background (class 0). Each
/// image holds two rectangles, one per half; rectangle classes run
/// round-robin over 1..C-1 across the whole set. Same seed, same bytes.
std::vector<Sample> synth_dataset(std::size_t n, std::size_t height, std::size_t width, std::size_t classes,
                                  std::uint64_t seed);

/// Fixed RGB color of each class in the synthetic images.
std::array<double, 3> synth_class_color(std::size_t cls, std::size_t classes);

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

struct CurvePoint {
    std::size_t step;
    double lr;
    double loss;
};

struct TrainOptions {
    std::size_t steps = 500;
    std::size_t batch = 4;
    // Classic SGD at lr 5e-4 barely moves a freshly initialized net in a few
    // hundred steps; the toy run defaults to Adam with the same settings.
    OptimizerConfig optimizer{OptimizerKind::Adam, 5e-4, 0.9, 0.9, 1e-4, 0};  // max_iter 0 means "use steps"
    int ignore_index = 255;
    /// Reshuffle the set every epoch. With a fixed batch composition BN
    /// statistics identify the batch and the net learns to lean on them,
    /// which does not carry over to inference.
    bool shuffle = true;
    std::uint64_t shuffle_seed = 1;
};

struct TrainReport {
    std::vector<CurvePoint> curve;
    ConfusionMatrix confusion{2};
    double pixel_accuracy = 0.0;
    std::optional<double> miou;
};

/// Mini-batch training over `data` (a seeded permutation per epoch, or the
/// stored order when shuffling is off),
/// then an inference-mode evaluation over the whole set.
template <typename T>
TrainReport train_toy(Network<T>& net, const std::vector<Sample>& data, const TrainOptions& opts);

/// Inference-mode confusion matrix over a dataset.
template <typename T>
ConfusionMatrix evaluate(const Network<T>& net, const std::vector<Sample>& data, int ignore_index = 255);

/// Stacks samples [first, first + count) (wrapping) into one batch.
template <typename T>
std::pair<Tensor4<T>, LabelMap> make_batch(const std::vector<Sample>& data, std::size_t first, std::size_t count);

/// Stacks the samples at `indices` into one batch.
template <typename T>
std::pair<Tensor4<T>, LabelMap> make_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& indices);

/// "step,lr,loss" header plus one LF-terminated row per step.
std::string curve_csv(const std::vector<CurvePoint>& curve);

}  // namespace esnet
