#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mclr/dataset.hpp"
#include "mclr/network.hpp"
#include "mclr/rng.hpp"
#include "mclr/text.hpp"

namespace mclr {

struct DiffusionConfig {
  int train_steps = 1000;
  int sample_steps = 10;
  double cfg_weight = 2.5;
  double cond_mask_prob = 0.1;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::uint64_t seed = 0;

  void validate() const {
    if (train_steps < 1) throw RangeError("train_steps must be >= 1");
    if (sample_steps < 1 || sample_steps > train_steps) throw RangeError("sample_steps must be in [1, train_steps]");
    if (!(cfg_weight >= 0.0)) throw RangeError("cfg_weight must be >= 0");
    if (!(cond_mask_prob >= 0.0 && cond_mask_prob <= 1.0)) throw RangeError("cond_mask_prob must be in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"train_steps", train_steps}, {"sample_steps", sample_steps}, {"cfg_weight", cfg_weight},
            {"cond_mask_prob", cond_mask_prob}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"seed", seed}};
  }

  static DiffusionConfig from_json(const nlohmann::json& j) {
    DiffusionConfig c;
    c.train_steps = j.value("train_steps", c.train_steps);
    c.sample_steps = j.value("sample_steps", c.sample_steps);
    c.cfg_weight = j.value("cfg_weight", c.cfg_weight);
    c.cond_mask_prob = j.value("cond_mask_prob", c.cond_mask_prob);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

// Linear beta schedule and its cumulative products.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(const DiffusionConfig& cfg) {
    cfg.validate();
    const int n = cfg.train_steps;
    alpha_bar_.resize(static_cast<std::size_t>(n));
    double prod = 1.0;
    for (int t = 0; t < n; ++t) {
      const double beta = n == 1 ? cfg.beta_start : cfg.beta_start + (cfg.beta_end - cfg.beta_start) * t / (n - 1);
      prod *= 1.0 - beta;
      alpha_bar_[static_cast<std::size_t>(t)] = prod;
    }
  }

  int size() const { return static_cast<int>(alpha_bar_.size()); }

  double alpha_bar(int t) const {
    if (t < 0 || t >= size()) throw RangeError("timestep " + std::to_string(t) + " out of range");
    return alpha_bar_[static_cast<std::size_t>(t)];
  }

  // Evenly strided timesteps from noisiest to cleanest: for 1000/10 this is
  // 999, 899, ..., 99.
  std::vector<int> sampling_timesteps(int steps) const {
    if (steps < 1 || steps > size()) throw RangeError("sample step count out of range");
    std::vector<int> ts;
    for (int k = steps; k >= 1; --k) ts.push_back(static_cast<int>(static_cast<long long>(size()) * k / steps) - 1);
    return ts;
  }

 private:
  std::vector<double> alpha_bar_;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class S>
Mat<S> q_sample(const Mat<S>& x0, int t, const Mat<S>& eps, const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  return static_cast<S>(std::sqrt(ab)) * x0 + static_cast<S>(std::sqrt(1.0 - ab)) * eps;
}

// Skip and output coefficients of the noise estimate
// eps = sqrt(1 - abar_t) x_t + sqrt(abar_t) f(x_t).
template <class S>
std::pair<std::vector<S>, std::vector<S>> noise_coefficients(const NoiseSchedule& schedule, const std::vector<int>& timesteps) {
  std::vector<S> skip, out;
  for (int t : timesteps) {
    const double ab = schedule.alpha_bar(t);
    skip.push_back(static_cast<S>(std::sqrt(1.0 - ab)));
    out.push_back(static_cast<S>(std::sqrt(ab)));
  }
  return {skip, out};
}

template <class S>
ag::Var noise_estimate(ag::Tape<S>& tape, ag::Var network_out, const Batch<S>& x, const std::vector<int>& timesteps,
                       const NoiseSchedule& schedule) {
  const auto [skip, out] = noise_coefficients<S>(schedule, timesteps);
  return ag::scaled_skip(tape, network_out, x, skip, out);
}

template <class S>
Batch<S> predict_noise(const Denoiser<S>& model, const NoiseSchedule& schedule, const Batch<S>& x,
                       const std::vector<int>& timesteps, const std::vector<std::vector<int>>& ids,
                       const ForwardHooks<S>* hooks = nullptr) {
  Batch<S> f = model.predict(x, timesteps, ids, hooks);
  const auto [skip, out] = noise_coefficients<S>(schedule, timesteps);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = skip[i] * x[i] + out[i] * f[i];
  return f;
}

template <class S>
Mat<S> gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal());
  return m;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int steps = 2000;
  int batch = 64;
  double lr = 2e-4;
  double lr_decay = 0.9;
  int decay_every = 5000;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  double lr_at(int step) const { return lr * std::pow(lr_decay, step / decay_every); }

  void validate() const {
    if (steps < 0) throw RangeError("steps must be >= 0");
    if (batch < 1) throw RangeError("batch must be >= 1");
    if (!(lr > 0.0)) throw RangeError("lr must be > 0");
    if (decay_every < 1) throw RangeError("decay_every must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"steps", steps},   {"batch", batch},         {"lr", lr},       {"lr_decay", lr_decay},
            {"decay_every", decay_every}, {"weight_decay", weight_decay}, {"beta1", beta1},
            {"beta2", beta2},   {"adam_eps", adam_eps},   {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.decay_every = j.value("decay_every", c.decay_every);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

// Inputs and target of one epsilon-prediction step.
template <class S>
struct TrainingBatch {
  Batch<S> noisy;
  Batch<S> noise;
  std::vector<int> timesteps;
  std::vector<std::vector<int>> ids;
};

// Draws timesteps, noise and condition masks for already-normalized samples.
template <class S>
TrainingBatch<S> prepare_batch(const std::vector<const Sample*>& samples, const NoiseSchedule& schedule,
                               const DiffusionConfig& cfg, Rng& rng) {
  TrainingBatch<S> b;
  for (const Sample* s : samples) {
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.size())));
    Mat<S> eps = gaussian<S>(s->motion.features.rows(), s->motion.features.cols(), rng);
    const Mat<S> x0 = s->motion.features.template cast<S>();
    b.noisy.push_back(q_sample(x0, t, eps, schedule));
    b.noise.push_back(std::move(eps));
    b.timesteps.push_back(t);
    b.ids.push_back(rng.bernoulli(cfg.cond_mask_prob) ? null_tokens().ids : tokenize(s->prompt).ids);
  }
  return b;
}

// Mean squared error between predicted and true noise.
template <class S>
double epsilon_loss(const Batch<S>& predicted, const Batch<S>& noise) {
  double total = 0;
  double count = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    total += static_cast<double>((predicted[i] - noise[i]).squaredNorm());
    count += static_cast<double>(predicted[i].size());
  }
  return total / count;
}

// Forward + backward for one batch; gradients accumulate into the model's
// parameter set. Returns the loss.
template <class S>
double training_step(Denoiser<S>& model, const NoiseSchedule& schedule, const TrainingBatch<S>& batch) {
  ag::Tape<S> tape(true);
  ag::Var out = model.forward(tape, batch.noisy, batch.timesteps, batch.ids, nullptr, true);
  ag::Var pred = noise_estimate(tape, out, batch.noisy, batch.timesteps, schedule);
  ag::Var loss = ag::mse(tape, pred, batch.noise);
  const double value = static_cast<double>(tape.value(loss)[0](0, 0));
  if (!std::isfinite(value)) {
    throw NumericError("training loss is not finite (timesteps of first sample: " + std::to_string(batch.timesteps.front()) + ")");
  }
  tape.backward(loss);
  return value;
}

template <class S>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParameterSet<S>& params) {
    for (const auto& p : params) {
      m_.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void update(ParameterSet<S>& params, const TrainConfig& cfg, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t_);
    const S b1 = static_cast<S>(cfg.beta1);
    const S b2 = static_cast<S>(cfg.beta2);
    int i = 0;
    for (auto& p : params) {
      auto& m = m_[static_cast<std::size_t>(i)];
      auto& v = v_[static_cast<std::size_t>(i)];
      m = b1 * m + (S(1) - b1) * p.grad;
      v = b2 * v + (S(1) - b2) * p.grad.cwiseProduct(p.grad);
      const S step = static_cast<S>(lr / bc1);
      const S denom_scale = static_cast<S>(1.0 / std::sqrt(bc2));
      p.value.array() -= static_cast<S>(lr * cfg.weight_decay) * p.value.array();
      p.value.array() -= step * m.array() / (v.array().sqrt() * denom_scale + static_cast<S>(cfg.adam_eps));
      ++i;
    }
  }

  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }
  std::vector<Mat<S>>& first_moments() { return m_; }
  std::vector<Mat<S>>& second_moments() { return v_; }

 private:
  std::vector<Mat<S>> m_, v_;
  long long t_ = 0;
};

struct TrainProgress {
  int step = 0;
  double loss = 0;
  double lr = 0;
};

// Single-threaded trainer over a normalized corpus. `start_step` supports
// resuming; the learning-rate schedule is evaluated at the global step.
template <class S>
class Trainer {
 public:
  Trainer(Denoiser<S>& model, DiffusionConfig diffusion, TrainConfig train)
      : model_(model), diffusion_(diffusion), train_(train), schedule_(diffusion), optimizer_(model.params()) {}

  AdamW<S>& optimizer() { return optimizer_; }
  int step() const { return step_; }
  void set_step(int s) { step_ = s; }

  std::vector<TrainProgress> run(const std::vector<Sample>& corpus, int steps,
                                 const std::function<void(const TrainProgress&)>& on_step = nullptr) {
    if (corpus.empty()) throw RangeError("train: empty corpus");
    Rng rng(train_.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(step_ + 1)));
    std::vector<TrainProgress> log;
    for (int i = 0; i < steps; ++i) {
      std::vector<const Sample*> picks;
      for (int b = 0; b < train_.batch; ++b) picks.push_back(&corpus[rng.below(corpus.size())]);
      const auto batch = prepare_batch<S>(picks, schedule_, diffusion_, rng);
      model_.params().zero_grad();
      const double loss = training_step(model_, schedule_, batch);
      const double lr = train_.lr_at(step_);
      optimizer_.update(model_.params(), train_, lr);
      ++step_;
      TrainProgress p{step_, loss, lr};
      log.push_back(p);
      if (on_step) on_step(p);
    }
    return log;
  }

 private:
  Denoiser<S>& model_;
  DiffusionConfig diffusion_;
  TrainConfig train_;
  NoiseSchedule schedule_;
  AdamW<S> optimizer_;
  int step_ = 0;
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct GenerationResult {
  MotionSequence motion;  // denormalized features
  std::vector<AttentionRecord> records;
  std::uint64_t seed = 0;
  std::string prompt;
  PromptTokens tokens;
  nlohmann::json directives = nlohmann::json::array();
};

// eps_null + w (eps_cond - eps_null)
template <class S>
Mat<S> guided_noise(const Mat<S>& cond, const Mat<S>& null, double w) {
  return null + static_cast<S>(w) * (cond - null);
}

struct SampleOptions {
  int frames = kDefaultFrames;
  std::uint64_t seed = 0;
  bool record_attention = true;
  bool record_unconditional = false;
};

// Deterministic DDIM sampling with classifier-free guidance for a batch of
// prompts sharing one initial noise draw. Hooks see both the conditional and
// the unconditional pass (AttentionSite::conditional tells them apart);
// attention records keep the conditional pass unless asked otherwise.
template <class S>
std::vector<GenerationResult> ddim_sample(const Denoiser<S>& model, const NormStats& stats,
                                          const std::vector<std::pair<std::string, PromptTokens>>& prompts,
                                          const DiffusionConfig& cfg, const SampleOptions& opt,
                                          const std::vector<AttentionHook<S>*>& hooks = {}) {
  cfg.validate();
  if (prompts.empty()) throw RangeError("ddim_sample: empty batch");
  if (opt.frames < kMinFrames || opt.frames > kMaxFrames) throw RangeError("ddim_sample: frames out of range");
  const NoiseSchedule schedule(cfg);
  const auto timesteps = schedule.sampling_timesteps(cfg.sample_steps);
  const std::size_t n = prompts.size();

  Rng rng(opt.seed);
  const Mat<S> noise = gaussian<S>(opt.frames, model.config().feature_dim, rng);
  Batch<S> x(n, noise);

  std::vector<std::vector<int>> cond_ids, null_ids;
  for (const auto& p : prompts) {
    cond_ids.push_back(p.second.ids);
    null_ids.push_back(null_tokens().ids);
  }

  AttentionRecorder<S> recorder(static_cast<int>(n), opt.record_unconditional);
  for (std::size_t k = 0; k < timesteps.size(); ++k) {
    const int t = timesteps[k];
    const std::vector<int> ts(n, t);
    ForwardHooks<S> cond_hooks{static_cast<int>(k) + 1, true, hooks, opt.record_attention ? &recorder : nullptr};
    ForwardHooks<S> null_hooks{static_cast<int>(k) + 1, false, hooks,
                               opt.record_attention && opt.record_unconditional ? &recorder : nullptr};
    const Batch<S> eps_cond = predict_noise(model, schedule, x, ts, cond_ids, &cond_hooks);
    const Batch<S> eps_null = predict_noise(model, schedule, x, ts, null_ids, &null_hooks);

    const double ab = schedule.alpha_bar(t);
    const double ab_prev = k + 1 < timesteps.size() ? schedule.alpha_bar(timesteps[k + 1]) : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Mat<S> eps = guided_noise(eps_cond[i], eps_null[i], cfg.cfg_weight);
      const Mat<S> x0 = (x[i] - static_cast<S>(std::sqrt(1.0 - ab)) * eps) / static_cast<S>(std::sqrt(ab));
      x[i] = static_cast<S>(std::sqrt(ab_prev)) * x0 + static_cast<S>(std::sqrt(1.0 - ab_prev)) * eps;
      require_finite(x[i], "ddim_sample");
    }
  }

  auto records = recorder.take();
  std::vector<GenerationResult> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].motion.features = denormalize(x[i].template cast<float>(), stats);
    out[i].records = std::move(records[i]);
    out[i].seed = opt.seed;
    out[i].prompt = prompts[i].first;
    out[i].tokens = prompts[i].second;
  }
  return out;
}

}  // namespace mclr
