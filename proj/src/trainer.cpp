#include "da2net/trainer.hpp"

#include <cmath>
#include <fstream>

#include "da2net/checkpoint.hpp"
#include "json.hpp"

namespace da2 {
namespace {

// Fixed stream ids so shuffling and augmentation never share draws.
constexpr std::uint64_t kShuffleStream = 0x5A1F;
constexpr std::uint64_t kAugmentStream = 0xA06E;

std::vector<std::size_t> shuffled_indices(std::size_t m, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    Rng rng = Rng(seed, kShuffleStream).split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = m; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

Tensor slice_batch(const Tensor& images, std::int64_t begin, std::int64_t end) {
    const auto per = images.size() / static_cast<std::size_t>(images.dim(0));
    Shape s = images.shape();
    s[0] = end - begin;
    std::vector<float> v(images.ptr() + begin * static_cast<std::int64_t>(per), images.ptr() + end * static_cast<std::int64_t>(per));
    return Tensor(s, std::move(v));
}

std::int64_t count_correct(const Tensor& logits, std::span<const int> labels) {
    const auto N = logits.dim(0), K = logits.dim(1);
    std::int64_t correct = 0;
    for (std::int64_t n = 0; n < N; ++n) {
        const float* row = logits.ptr() + n * K;
        std::int64_t best = 0;
        for (std::int64_t k = 1; k < K; ++k) {
            if (row[k] > row[best]) best = k;
        }
        correct += best == labels[static_cast<std::size_t>(n)];
    }
    return correct;
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
    if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("train.lr must be finite and >= 0");
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("train.momentum must lie in [0,1)");
    if (!(cfg.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(cfg.lr_decay > 1.0)) throw ConfigError("train.lr_decay must be > 1");
    if (cfg.lr_period < 1) throw ConfigError("train.lr_period must be >= 1");
    if (cfg.batch_size < 2) throw ConfigError("train.batch_size must be >= 2 (batch norm needs two samples)");
    if (cfg.epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (cfg.eval_period < 1) throw ConfigError("train.eval_period must be >= 1");
    validate_augment_spec(cfg.augment_spec, kImageExtent);
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ConfigError("epoch must be >= 0");
    return cfg.lr * std::pow(cfg.lr_decay, -static_cast<double>(epoch / cfg.lr_period));
}

void sgd_update(const std::string& name, Tensor& param, const Tensor& grad, OptimState& state, double lr,
                double momentum, double weight_decay) {
    if (grad.shape() != param.shape()) {
        throw ShapeError("gradient for " + name + " has shape " + shape_str(grad.shape()) + ", parameter " +
                         shape_str(param.shape()));
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw NumericError("non-finite gradient in parameter " + name + " at index " + std::to_string(i));
        }
    }
    auto [it, fresh] = state.velocity.try_emplace(name, param.shape());
    Tensor& v = it->second;
    if (v.shape() != param.shape()) throw ShapeError("velocity shape mismatch for " + name);
    const float m = static_cast<float>(momentum), wd = static_cast<float>(weight_decay), step = static_cast<float>(lr);
    float* p = param.ptr();
    float* vp = v.ptr();
    const float* g = grad.ptr();
    for (std::size_t i = 0; i < param.size(); ++i) {
        vp[i] = m * vp[i] + (g[i] + wd * p[i]);
        p[i] -= step * vp[i];
    }
}

void sgd_step(Network<float>& net, const ParamGrads<float>& grads, OptimState& state, double lr, double momentum,
              double weight_decay) {
    net.visit_parameters([&](const std::string& name, Tensor& p) {
        const auto it = grads.find(name);
        if (it != grads.end()) {
            sgd_update(name, p, it->second, state, lr, momentum, weight_decay);
        } else {
            sgd_update(name, p, Tensor(p.shape()), state, lr, momentum, weight_decay);
        }
    });
}

std::string metrics_to_json_line(const EpochMetrics& m) {
    nlohmann::ordered_json j;
    j["epoch"] = m.epoch;
    j["lr"] = m.lr;
    j["train_loss"] = m.train_loss;
    j["train_acc"] = m.train_acc;
    j["eval_acc"] = m.eval_acc ? nlohmann::ordered_json(*m.eval_acc) : nlohmann::ordered_json(nullptr);
    return j.dump();
}

double evaluate_accuracy(Network<float>& net, const Tensor& images, const std::vector<int>& labels,
                         std::int64_t batch_size) {
    const auto M = images.dim(0);
    if (M == 0) return 0.0;
    std::int64_t correct = 0;
    for (std::int64_t b = 0; b < M; b += batch_size) {
        const auto e = std::min(M, b + batch_size);
        const Tensor logits = net.predict(slice_batch(images, b, e));
        correct += count_correct(logits, std::span<const int>(labels).subspan(static_cast<std::size_t>(b),
                                                                             static_cast<std::size_t>(e - b)));
    }
    return static_cast<double>(correct) / static_cast<double>(M);
}

TrainResult train_loop(Network<float>& net, const Dataset& train, const Dataset* eval, const TrainConfig& cfg,
                       const ChannelStats& stats, const TrainOutputs& outputs) {
    validate_train_config(cfg);
    train.validate();
    if (eval) eval->validate();
    if (train.height() != cfg.augment_spec.crop && cfg.augment) {
        throw ConfigError("augment crop " + std::to_string(cfg.augment_spec.crop) + " differs from image extent " +
                          std::to_string(train.height()));
    }

    const bool write = !outputs.dir.empty();
    std::ofstream metrics_file;
    std::filesystem::path metrics_path, metrics_partial;
    if (write) {
        std::filesystem::create_directories(outputs.dir);
        metrics_path = outputs.dir / "metrics.jsonl";
        metrics_partial = metrics_path;
        metrics_partial += ".partial";
        metrics_file.open(metrics_partial, std::ios::trunc);
        if (!metrics_file) throw IoError("cannot open " + metrics_partial.string());
    }

    const Tensor eval_images = eval ? normalize(eval->images, stats.mean, stats.stddev) : Tensor();
    const auto M = static_cast<std::int64_t>(train.size());
    const auto C = train.images.dim(1), H = train.height(), W = train.width();
    const Rng augment_root(cfg.seed, kAugmentStream);

    TrainResult result;
    OptimState state;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        const auto order = shuffled_indices(static_cast<std::size_t>(M), cfg.seed, epoch);
        double loss_sum = 0;
        std::int64_t correct = 0;
        int step = 0;
        for (std::int64_t b = 0; b < M; b += cfg.batch_size, ++step) {
            const auto e = std::min(M, b + cfg.batch_size);
            if (e - b < 2) break;  // a single leftover sample cannot be batch-normalized
            const auto B = e - b;
            Tensor batch({B, C, H, W});
            std::vector<int> labels(static_cast<std::size_t>(B));
            for (std::int64_t i = 0; i < B; ++i) {
                const auto src = order[static_cast<std::size_t>(b + i)];
                Tensor img = train.image(src);
                if (cfg.augment) {
                    // Keyed by (epoch, sample) so results do not depend on batch composition.
                    Rng rng = augment_root.split(static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(M) + src);
                    img = augment(img, cfg.augment_spec, rng);
                }
                img = normalize(img, stats.mean, stats.stddev);
                std::copy(img.data().begin(), img.data().end(), batch.ptr() + i * C * H * W);
                labels[static_cast<std::size_t>(i)] = train.labels[src];
            }
            Tape<float> tape;
            const Var logits = net.forward(tape, tape.constant(std::move(batch)), Mode::Train);
            const Var loss = softmax_cross_entropy(tape, logits, labels);
            const float loss_value = tape.value(loss)[0];
            if (!std::isfinite(loss_value)) {
                throw NumericError("loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step));
            }
            loss_sum += static_cast<double>(loss_value) * static_cast<double>(B);
            correct += count_correct(tape.value(logits), labels);
            const auto grads = tape.backward(loss);
            try {
                sgd_step(net, grads, state, lr, cfg.momentum, cfg.weight_decay);
            } catch (const NumericError& err) {
                throw NumericError(std::string(err.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step) + ")");
            }
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr;
        m.train_loss = loss_sum / static_cast<double>(M);
        m.train_acc = static_cast<double>(correct) / static_cast<double>(M);
        const bool last = epoch + 1 == cfg.epochs;
        if (eval && ((epoch + 1) % cfg.eval_period == 0 || last)) {
            m.eval_acc = evaluate_accuracy(net, eval_images, eval->labels);
            result.final_eval_acc = m.eval_acc;
            if (!result.best_eval_acc || *m.eval_acc > *result.best_eval_acc) {
                result.best_eval_acc = m.eval_acc;
                if (write) save_checkpoint(net, outputs.dir / "best.da2c");
            }
        }
        result.metrics.push_back(m);
        if (write) metrics_file << metrics_to_json_line(m) << '\n' << std::flush;
        if (outputs.on_epoch) outputs.on_epoch(m);
    }

    if (write) {
        metrics_file.close();
        if (!metrics_file) throw IoError("error writing " + metrics_partial.string());
        std::filesystem::rename(metrics_partial, metrics_path);
        save_checkpoint(net, outputs.dir / "final.da2c");
    }
    return result;
}

}  // namespace da2
