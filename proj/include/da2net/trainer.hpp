#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "da2net/backbone.hpp"
#include "da2net/data.hpp"

namespace da2 {

struct TrainConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 128;
    int epochs = 30;
    double lr_decay = 10.0;  // divide the rate by this ...
    int lr_period = 10;      // ... every this many epochs
    std::uint64_t seed = 0;
    int eval_period = 1;  // evaluate every k epochs (and always after the last)
    bool augment = true;
    AugmentSpec augment_spec;
};

void validate_train_config(const TrainConfig& cfg);

/// base * decay^(-floor(epoch / period)).
double lr_schedule(int epoch, const TrainConfig& cfg);

struct OptimState {
    std::map<std::string, Tensor> velocity;  // zero until first touched
};

/// Classic SGD with momentum and coupled weight decay, for one tensor:
/// g' = grad + wd * param; v = momentum * v + g'; param -= lr * v.
void sgd_update(const std::string& name, Tensor& param, const Tensor& grad, OptimState& state, double lr,
                double momentum, double weight_decay);

/// Applies sgd_update to every parameter of the network; missing grads count as zero.
void sgd_step(Network<float>& net, const ParamGrads<float>& grads, OptimState& state, double lr, double momentum,
              double weight_decay);

struct EpochMetrics {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double train_acc = 0;
    std::optional<double> eval_acc;
};

std::string metrics_to_json_line(const EpochMetrics& m);

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    std::optional<double> best_eval_acc;
    std::optional<double> final_eval_acc;
};

struct TrainOutputs {
    std::filesystem::path dir;  // empty: write nothing
    std::function<void(const EpochMetrics&)> on_epoch;
};

/// Files written under outputs.dir: metrics.jsonl, final.da2c and, whenever
/// eval accuracy improves, best.da2c. All go through a ".partial" rename.
/// Images are normalized with `stats` after augmentation.
TrainResult train_loop(Network<float>& net, const Dataset& train, const Dataset* eval, const TrainConfig& cfg,
                       const ChannelStats& stats, const TrainOutputs& outputs = {});

/// Top-1 accuracy in eval mode over an already-normalized image tensor.
double evaluate_accuracy(Network<float>& net, const Tensor& images, const std::vector<int>& labels,
                         std::int64_t batch_size = 256);

}  // namespace da2
