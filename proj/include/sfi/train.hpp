#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfi/checkpoint.hpp"
#include "sfi/flow.hpp"
#include "sfi/graph.hpp"
#include "sfi/model.hpp"

namespace sfi {

// ---------------------------------------------------------------------------
// Losses and optimizer
// ---------------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[label], stabilized by per-row
/// max subtraction.
inline double cross_entropy(const Mat& logits, const std::vector<int>& labels) {
  if (labels.size() != logits.rows())
    throw std::invalid_argument("cross_entropy: one label per row required");
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols())
      throw std::domain_error("cross_entropy: label out of range");
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double logsum = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) logsum += std::exp(logits(i, j) - mx);
    loss += std::log(logsum) + mx - logits(i, static_cast<std::size_t>(y));
  }
  return loss / static_cast<double>(logits.rows());
}

/// Fraction of rows whose argmax matches the label (first index wins ties).
inline double accuracy(const Mat& logits, const std::vector<int>& labels) {
  if (labels.size() != logits.rows())
    throw std::invalid_argument("accuracy: one label per row required");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, arg)) arg = j;
    if (static_cast<int>(arg) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0)) throw std::domain_error("AdamConfig: lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw std::domain_error("AdamConfig: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw std::domain_error("AdamConfig: eps must be > 0");
  }
};

struct AdamState {
  std::vector<Mat> m, v;
  long step = 0;
};

inline void adam_init(AdamState& st, const std::vector<Mat*>& params) {
  st.m.clear();
  st.v.clear();
  for (const Mat* p : params) {
    st.m.emplace_back(p->rows(), p->cols());
    st.v.emplace_back(p->rows(), p->cols());
  }
  st.step = 0;
}

/// Standard Adam step with bias correction. Deterministic.
inline void adam_update(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
                        AdamState& st, const AdamConfig& hp) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw std::invalid_argument("adam_update: size mismatch");
  ++st.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(st.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Mat& p = *params[pi];
    const Mat& g = grads[pi];
    require_same_shape(p, g, "adam_update");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.raw()[i];
      double& mi = st.m[pi].raw()[i];
      double& vi = st.v[pi].raw()[i];
      mi = hp.beta1 * mi + (1.0 - hp.beta1) * gi;
      vi = hp.beta2 * vi + (1.0 - hp.beta2) * gi * gi;
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p.raw()[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

enum class TaskKind { sbm, sbm_noisy, longrange };

struct TaskSpec {
  TaskKind kind = TaskKind::sbm;
  // sbm / sbm_noisy
  std::size_t blocks = 4;
  std::size_t per_block = 10;
  double p_in = 0.6;
  double p_out = 0.1;
  std::size_t noise_dim = 16;   // sbm_noisy only
  double noise_scale = 2.0;     // sbm_noisy only
  // longrange
  std::size_t n = 32;
  std::size_t hop = 8;
  // shared
  std::size_t pe_dim = 8;
  std::size_t train_graphs = 1;
  std::size_t test_graphs = 1;
};

struct TaskGraph {
  Graph g;
  Mat x;     // model input features (task features, PE, noise)
  Mat atil;  // normalized adjacency
};

struct TaskInstance {
  std::vector<TaskGraph> train, test;
  std::size_t d_in = 0;
  std::size_t n_classes = 0;
};

namespace detail {
inline TaskGraph instantiate(const TaskSpec& spec, std::uint64_t seed) {
  TaskGraph tg;
  std::size_t base_dim = 0;
  switch (spec.kind) {
    case TaskKind::sbm:
    case TaskKind::sbm_noisy:
      tg.g = gen_sbm(spec.blocks, spec.per_block, spec.p_in, spec.p_out, spec.blocks, seed);
      base_dim = spec.blocks;
      break;
    case TaskKind::longrange:
      tg.g = gen_longrange(spec.n, spec.hop, 1, seed);
      base_dim = 1;
      break;
  }
  const std::size_t noise = spec.kind == TaskKind::sbm_noisy ? spec.noise_dim : 0;
  Mat x(tg.g.n, base_dim + spec.pe_dim + noise);
  for (std::size_t i = 0; i < tg.g.n; ++i)
    for (std::size_t j = 0; j < base_dim; ++j) x(i, j) = tg.g.x(i, j);
  if (spec.pe_dim > 0) {
    const Mat pe = laplacian_pe(tg.g, spec.pe_dim);
    for (std::size_t i = 0; i < tg.g.n; ++i)
      for (std::size_t j = 0; j < spec.pe_dim; ++j) x(i, base_dim + j) = pe(i, j);
  }
  if (noise > 0) {
    SeededRng nrng(SeededRng::derive(seed, 0x6e6f6973ULL));  // independent noise stream
    for (std::size_t i = 0; i < tg.g.n; ++i)
      for (std::size_t j = 0; j < noise; ++j)
        x(i, base_dim + spec.pe_dim + j) = nrng.uniform(-spec.noise_scale, spec.noise_scale);
  }
  tg.x = std::move(x);
  tg.atil = normalized_adjacency(tg.g);
  return tg;
}
}  // namespace detail

inline TaskInstance build_task(const TaskSpec& spec, std::uint64_t seed) {
  if (spec.train_graphs == 0 || spec.test_graphs == 0)
    throw std::domain_error("build_task: needs at least one train and one test graph");
  TaskInstance ti;
  for (std::size_t i = 0; i < spec.train_graphs; ++i)
    ti.train.push_back(detail::instantiate(spec, SeededRng::derive(seed, 1, i)));
  for (std::size_t i = 0; i < spec.test_graphs; ++i)
    ti.test.push_back(detail::instantiate(spec, SeededRng::derive(seed, 2, i)));
  ti.d_in = ti.train.front().x.cols();
  switch (spec.kind) {
    case TaskKind::sbm:
    case TaskKind::sbm_noisy:
      ti.n_classes = spec.blocks;
      break;
    case TaskKind::longrange:
      ti.n_classes = 2;
      break;
  }
  return ti;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRow {
  int epoch = 0;
  double train_loss = 0.0, test_loss = 0.0;
  double train_metric = 0.0, test_metric = 0.0;
  double gap = 0.0;       // train_metric - test_metric
  double sparsity = 0.0;  // mean fraction of attention entries below 1e-8
};

struct Metrics {
  std::vector<MetricsRow> rows;

  std::string to_csv(const std::string& config_echo = "") const {
    std::string out = "epoch,train_loss,test_loss,train_metric,test_metric,gap,sparsity\n";
    for (const MetricsRow& r : rows) {
      out += std::to_string(r.epoch) + "," + fmt_full(r.train_loss) + "," +
             fmt_full(r.test_loss) + "," + fmt_full(r.train_metric) + "," +
             fmt_full(r.test_metric) + "," + fmt_full(r.gap) + "," + fmt_full(r.sparsity) + "\n";
    }
    if (!config_echo.empty()) out += "# config=" + config_echo + "\n";
    return out;
  }
};

struct GapSummary {
  double final_gap = 0.0;
  double mean_last_quartile = 0.0;
};

inline GapSummary gap_report(const Metrics& m) {
  if (m.rows.empty()) throw std::invalid_argument("gap_report: empty metric series");
  GapSummary s;
  s.final_gap = m.rows.back().gap;
  const std::size_t q = std::max<std::size_t>(1, m.rows.size() / 4);
  double acc = 0.0;
  for (std::size_t i = m.rows.size() - q; i < m.rows.size(); ++i) acc += m.rows[i].gap;
  s.mean_last_quartile = acc / static_cast<double>(q);
  return s;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class Arch { sfi_former, gcn };

struct TrainConfig {
  int epochs = 300;
  int eval_every = 10;
  AdamConfig adam;
  std::uint64_t seed = 42;
  TaskSpec task;
  Arch arch = Arch::sfi_former;
  AttentionMode mode = AttentionMode::dfi;
  std::size_t d_hidden = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  AttentionConfig attention;   // lambda_star, alpha, solver (unroll_k for train, tol for eval)
  std::string config_echo;     // embedded into metrics CSV and checkpoint

  void validate() const {
    if (epochs < 1) throw std::domain_error("TrainConfig: epochs must be >= 1");
    if (eval_every < 1) throw std::domain_error("TrainConfig: eval_every must be >= 1");
    adam.validate();
    attention.solver.validate();
  }
};

struct TrainResult {
  Metrics metrics;
  Checkpoint checkpoint;
  ModelParams model;  // arch == sfi_former
  GcnParams gcn;      // arch == gcn
  Arch arch = Arch::sfi_former;
  double final_train_metric = 0.0;
  double final_test_metric = 0.0;
};

namespace detail {

template <class ForwardFn>
inline MetricsRow evaluate(int epoch, const TaskInstance& task, ForwardFn&& fwd) {
  MetricsRow row;
  row.epoch = epoch;
  double sparsity = 0.0;
  for (const TaskGraph& tg : task.train) {
    ModelDiagnostics diag;
    const Mat logits = fwd(tg, &diag);
    row.train_loss += cross_entropy(logits, tg.g.labels);
    row.train_metric += accuracy(logits, tg.g.labels);
    sparsity += attention_sparsity(diag);
  }
  row.train_loss /= static_cast<double>(task.train.size());
  row.train_metric /= static_cast<double>(task.train.size());
  row.sparsity = sparsity / static_cast<double>(task.train.size());
  for (const TaskGraph& tg : task.test) {
    const Mat logits = fwd(tg, nullptr);
    row.test_loss += cross_entropy(logits, tg.g.labels);
    row.test_metric += accuracy(logits, tg.g.labels);
  }
  row.test_loss /= static_cast<double>(task.test.size());
  row.test_metric /= static_cast<double>(task.test.size());
  row.gap = row.train_metric - row.test_metric;
  return row;
}

}  // namespace detail

/// Full-batch training over the generated task. Deterministic per seed:
/// two runs produce bitwise-identical metrics and checkpoints. `initial`
/// overrides the seeded init (used by warm starts).
inline TrainResult train(const TrainConfig& cfg, const ModelParams* initial = nullptr) {
  cfg.validate();
  const TaskInstance task = build_task(cfg.task, SeededRng::derive(cfg.seed, 1));
  TrainResult out;
  out.arch = cfg.arch;

  const std::uint64_t forward_seed = SeededRng::derive(cfg.seed, 3);
  SeededRng init_rng(SeededRng::derive(cfg.seed, 2));

  if (cfg.arch == Arch::sfi_former) {
    ModelConfig mc;
    mc.d_in = task.d_in;
    mc.d_hidden = cfg.d_hidden;
    mc.n_layers = cfg.n_layers;
    mc.n_heads = cfg.n_heads;
    mc.n_classes = task.n_classes;
    mc.mode = cfg.mode;
    if (initial) {
      out.model = *initial;
      out.model.cfg = mc;
    } else {
      out.model = init_model(mc, init_rng);
    }

    std::vector<Mat*> params;
    out.model.visit([&](const std::string&, Mat& m) { params.push_back(&m); });
    AdamState adam;
    adam_init(adam, params);

    auto fwd = [&](const TaskGraph& tg, ModelDiagnostics* diag) {
      return model_forward(tg.x, tg.atil, out.model, cfg.attention, forward_seed, diag);
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      ad::Tape t;
      ModelVars mv = register_model(t, out.model);
      ad::Var loss;
      for (const TaskGraph& tg : task.train) {
        ad::Var logits =
            model_forward_tape(t, mv, out.model.cfg, tg.x, tg.atil, cfg.attention, forward_seed);
        ad::Var l = t.cross_entropy(logits, tg.g.labels);
        loss = loss.valid() ? t.add(loss, l) : l;
      }
      loss = t.scale(loss, 1.0 / static_cast<double>(task.train.size()));
      if (!std::isfinite(t.value(loss)(0, 0)))
        throw DivergenceError("train: loss became non-finite at epoch " + std::to_string(epoch));
      auto grads = t.backward(loss);
      std::vector<Mat> ordered_grads;
      ordered_grads.reserve(mv.ordered.size());
      for (ad::Var v : mv.ordered) ordered_grads.push_back(std::move(grads.at(v.id)));
      adam_update(params, ordered_grads, adam, cfg.adam);
      if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)
        out.metrics.rows.push_back(detail::evaluate(epoch + 1, task, fwd));
    }
    out.checkpoint = make_checkpoint(out.model, static_cast<std::uint32_t>(cfg.epochs),
                                     cfg.config_echo);
  } else {
    ModelConfig mc;
    mc.d_in = task.d_in;
    mc.d_hidden = cfg.d_hidden;
    mc.n_layers = cfg.n_layers;
    mc.n_heads = 1;
    mc.n_classes = task.n_classes;
    out.gcn = init_gcn(mc, init_rng);

    std::vector<Mat*> params;
    out.gcn.visit([&](const std::string&, Mat& m) { params.push_back(&m); });
    AdamState adam;
    adam_init(adam, params);

    auto fwd = [&](const TaskGraph& tg, ModelDiagnostics*) {
      return gcn_forward(tg.x, tg.atil, out.gcn);
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      ad::Tape t;
      GcnVars gv = register_gcn(t, out.gcn);
      ad::Var loss;
      for (const TaskGraph& tg : task.train) {
        ad::Var l = t.cross_entropy(gcn_forward_tape(t, gv, tg.x, tg.atil), tg.g.labels);
        loss = loss.valid() ? t.add(loss, l) : l;
      }
      loss = t.scale(loss, 1.0 / static_cast<double>(task.train.size()));
      if (!std::isfinite(t.value(loss)(0, 0)))
        throw DivergenceError("train: loss became non-finite at epoch " + std::to_string(epoch));
      auto grads = t.backward(loss);
      std::vector<Mat> ordered_grads;
      ordered_grads.reserve(gv.ordered.size());
      for (ad::Var v : gv.ordered) ordered_grads.push_back(std::move(grads.at(v.id)));
      adam_update(params, ordered_grads, adam, cfg.adam);
      if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)
        out.metrics.rows.push_back(detail::evaluate(epoch + 1, task, fwd));
    }
    out.checkpoint =
        make_checkpoint(out.gcn, static_cast<std::uint32_t>(cfg.epochs), cfg.config_echo);
  }

  if (!out.metrics.rows.empty()) {
    out.final_train_metric = out.metrics.rows.back().train_metric;
    out.final_test_metric = out.metrics.rows.back().test_metric;
  }
  return out;
}

/// Rebuilds a model from a dense-run checkpoint with the mode switched to
/// sparse. Every parameter of the target architecture must be present in
/// the checkpoint with matching shape (so e.g. a different head count is
/// rejected); nothing is frozen afterwards.
inline ModelParams warm_start(const Checkpoint& ck, ModelConfig sfi_cfg) {
  sfi_cfg.mode = AttentionMode::sfi;
  SeededRng dummy(0);
  ModelParams mp = init_model(sfi_cfg, dummy);
  std::size_t used = 0;
  mp.visit([&](const std::string& name, Mat& m) {
    for (const auto& [ck_name, ck_mat] : ck.entries) {
      if (ck_name != name) continue;
      if (!ck_mat.same_shape(m))
        throw std::runtime_error("warm_start: shape mismatch for parameter '" + name + "'");
      m = ck_mat;
      ++used;
      return;
    }
    throw std::runtime_error("warm_start: checkpoint is missing parameter '" + name + "'");
  });
  if (used != ck.entries.size())
    throw std::runtime_error("warm_start: checkpoint has extra parameters");
  return mp;
}

}  // namespace sfi
