#pragma once

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "taskcl/encoding.hpp"
#include "taskcl/episodes.hpp"
#include "taskcl/evalkit.hpp"
#include "taskcl/losses.hpp"
#include "taskcl/taskaug.hpp"

namespace taskcl::metalearn {

using episodes::LabeledSample;
using episodes::Task;
using episodes::TaskBatch;
using models::FilmLayer;

// Counts inner-loop adaptations; routing tests assert that embedding-mode
// routing never triggers one.
inline long& inner_adapt_calls() {
  thread_local long n = 0;
  return n;
}

// ---------------------------------------------------------------------------
// method selection

enum class Family { Maml, Anil, Mmaml, CcFilm };
enum class Supervision { Plain, Contrastive, Supervised };

struct Method {
  Family family = Family::Maml;
  Supervision sup = Supervision::Plain;

  static Method parse(const std::string& name) {
    Method m;
    std::string base = name, suffix;
    if (auto pos = name.rfind("-contrastive"); pos != std::string::npos && pos + 12 == name.size()) {
      base = name.substr(0, pos);
      m.sup = Supervision::Contrastive;
    } else if (auto pos2 = name.rfind("-supervised");
               pos2 != std::string::npos && pos2 + 11 == name.size()) {
      base = name.substr(0, pos2);
      m.sup = Supervision::Supervised;
    }
    if (base == "maml")
      m.family = Family::Maml;
    else if (base == "anil")
      m.family = Family::Anil;
    else if (base == "mmaml")
      m.family = Family::Mmaml;
    else if (base == "cc-film") {
      m.family = Family::CcFilm;
      if (m.sup != Supervision::Plain)
        throw ConfigError("Method: cc-film has no supervision variants");
      m.sup = Supervision::Contrastive;  // clustering router is trained contrastively
    } else {
      throw ConfigError("Method: unknown method '" + name + "'");
    }
    return m;
  }

  std::string name() const {
    std::string base;
    switch (family) {
      case Family::Maml: base = "maml"; break;
      case Family::Anil: base = "anil"; break;
      case Family::Mmaml: base = "mmaml"; break;
      case Family::CcFilm: return "cc-film";
    }
    if (sup == Supervision::Contrastive) base += "-contrastive";
    if (sup == Supervision::Supervised) base += "-supervised";
    return base;
  }
};

enum class EmbeddingMode { SetEncoder, FeatureAggPre, FeatureAggPost };

inline EmbeddingMode parse_embedding_mode(const std::string& s) {
  if (s == "set-encoder") return EmbeddingMode::SetEncoder;
  if (s == "feature-agg-pre") return EmbeddingMode::FeatureAggPre;
  if (s == "feature-agg-post") return EmbeddingMode::FeatureAggPost;
  throw ConfigError("unknown embedding mode '" + s + "'");
}

inline std::string embedding_mode_name(EmbeddingMode m) {
  switch (m) {
    case EmbeddingMode::SetEncoder: return "set-encoder";
    case EmbeddingMode::FeatureAggPre: return "feature-agg-pre";
    case EmbeddingMode::FeatureAggPost: return "feature-agg-post";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// model

struct ModelSpec {
  models::InputKind input = models::InputKind::Vector;
  int input_dim = 16;      // vector domains
  int input_channels = 1;  // image domains
  int conv_channels = 32;
  int conv_blocks = 4;
  int mlp_hidden = 64;
  int ways = 5;
  int embed_dim = 64;
  EmbeddingMode embedding_mode = EmbeddingMode::SetEncoder;
  std::vector<int> projection_hidden = {64, 32};  // appended to the source dim
  bool unit_normalize = true;
  bool film = false;  // MMAML modulation
  int film_hidden = 32;
  bool label_conditioned_encoder = false;
  int cluster_count = 0;  // clustering router head (cc-film)
  int film_experts = 0;   // cc-film expert table count
  int domain_count = 0;   // supervised MMAML domain classifier
};

struct Model {
  ModelSpec spec;
  models::Trunk backbone;
  models::LinearHead head;
  models::FilmGenerator film_gen;      // spec.film
  encoding::SetEncoder encoder;
  encoding::ProjectionNet projection;
  losses::ClusterHead cluster;         // spec.cluster_count >= 2
  std::vector<std::vector<FilmLayer>> film_experts;  // spec.film_experts
  models::LinearHead domain_head;      // spec.domain_count >= 2

  int feature_dim() const { return backbone.feature_dim(); }

  // Dimension of the task embedding actually used for the contrastive path.
  int embedding_source_dim() const {
    return spec.embedding_mode == EmbeddingMode::SetEncoder ? spec.embed_dim
                                                            : backbone.feature_dim();
  }

  static Model init(const ModelSpec& spec, std::uint64_t seed) {
    Model m;
    m.spec = spec;
    Rng rng(derive_seed(seed, "model-init"));
    if (spec.input == models::InputKind::Image)
      m.backbone = models::Trunk::init_image(spec.input_channels, spec.conv_channels,
                                             spec.conv_blocks, rng);
    else
      m.backbone = models::Trunk::init_vector(spec.input_dim, spec.mlp_hidden, rng);
    m.head = models::LinearHead::zero(m.backbone.feature_dim(), spec.ways);

    encoding::EncoderParams ep;
    ep.input = spec.input;
    ep.input_dim = spec.input_dim;
    ep.input_channels = spec.input_channels;
    ep.conv_channels = spec.conv_channels;
    ep.conv_blocks = spec.conv_blocks;
    ep.mlp_hidden = spec.mlp_hidden;
    ep.embed_dim = spec.embed_dim;
    ep.label_conditioned = spec.label_conditioned_encoder;
    ep.ways = spec.ways;
    m.encoder = encoding::SetEncoder::init(ep, rng);

    encoding::ProjectionParams pp;
    pp.layers.push_back(m.embedding_source_dim());
    for (int h : spec.projection_hidden) pp.layers.push_back(h);
    pp.unit_normalize = spec.unit_normalize;
    m.projection = encoding::ProjectionNet::init(pp, rng);

    if (spec.film)
      m.film_gen = models::FilmGenerator::init(spec.embed_dim, m.backbone.film_widths(),
                                               spec.film_hidden, rng);
    if (spec.cluster_count >= 2)
      m.cluster = losses::ClusterHead::init(m.embedding_source_dim(), spec.cluster_count, rng);
    for (int e = 0; e < spec.film_experts; ++e) {
      std::vector<FilmLayer> table;
      for (int w : m.backbone.film_widths())
        table.push_back({Var::leaf(Tensor::full({w}, 1.0)), models::zeros_leaf({w})});
      m.film_experts.push_back(std::move(table));
    }
    if (spec.domain_count >= 2)
      m.domain_head = models::LinearHead::zero(spec.embed_dim, spec.domain_count);
    return m;
  }

  // Manifest order; also the flattening order for parameter-space routing.
  models::ParamList named_params() const {
    models::ParamList out;
    backbone.collect(out, "backbone.");
    head.collect(out, "head.");
    if (spec.film) film_gen.collect(out, "film_gen.");
    out.extend("", encoder.parameters("encoder."));
    out.extend("", projection.parameters("projection."));
    if (spec.cluster_count >= 2) out.extend("", cluster.parameters("cluster."));
    for (std::size_t e = 0; e < film_experts.size(); ++e)
      for (std::size_t l = 0; l < film_experts[e].size(); ++l) {
        out.add("film_expert" + std::to_string(e) + ".layer" + std::to_string(l) + ".gamma",
                film_experts[e][l].gamma);
        out.add("film_expert" + std::to_string(e) + ".layer" + std::to_string(l) + ".beta",
                film_experts[e][l].beta);
      }
    if (spec.domain_count >= 2) domain_head.collect(out, "domain_head.");
    return out;
  }
};

// ---------------------------------------------------------------------------
// forward helpers

namespace detail {

inline Tensor stack_inputs(const std::vector<LabeledSample>& set) {
  if (set.empty()) throw ConfigError("stack_inputs: empty sample set");
  const Tensor& first = set[0].sample.data;
  int n = static_cast<int>(set.size());
  std::vector<int> shape;
  shape.push_back(n);
  for (int i = 0; i < first.rank(); ++i) shape.push_back(first.dim(i));
  Tensor x(shape);
  long stride = first.size();
  for (int i = 0; i < n; ++i) {
    const Tensor& s = set[static_cast<std::size_t>(i)].sample.data;
    if (s.size() != stride) throw ConfigError("stack_inputs: inconsistent sample shapes");
    std::copy(s.data(), s.data() + stride, x.data() + static_cast<long>(i) * stride);
  }
  return x;
}

inline std::vector<int> labels_of(const std::vector<LabeledSample>& set) {
  std::vector<int> y;
  y.reserve(set.size());
  for (const auto& ls : set) y.push_back(ls.label);
  return y;
}

}  // namespace detail

inline Var net_logits(const models::Trunk& trunk, const models::LinearHead& head, const Var& x,
                      const std::vector<FilmLayer>* film = nullptr) {
  return head.forward(trunk.forward(x, film));
}

/** Generates FiLM layers for a task embedding (identity at initialization). */
inline std::vector<FilmLayer> film_modulate(const Model& model, const encoding::TaskEmbedding& z) {
  if (!model.spec.film) throw ConfigError("film_modulate: model has no FiLM generator");
  return model.film_gen.generate(z.row);
}

// ---------------------------------------------------------------------------
// inner-loop adaptation

enum class AdaptScope { Full, Head, Bias };

inline AdaptScope parse_scope(const std::string& s) {
  if (s == "full") return AdaptScope::Full;
  if (s == "head") return AdaptScope::Head;
  if (s == "bias") return AdaptScope::Bias;
  throw ConfigError("unknown adaptation scope '" + s + "'");
}

struct AdaptState {
  double inner_lr = 0.4;
  int steps = 1;
  AdaptScope scope = AdaptScope::Full;
  bool second_order = false;
  // Zero the classifier head before adapting (meta-trained paths); expert
  // banks adapt from their stored head instead.
  bool zero_head_init = true;
};

namespace detail {

inline std::vector<Var*> scope_slots(models::Trunk& t, models::LinearHead& h, AdaptScope scope) {
  std::vector<Var*> slots;
  auto add_trunk_all = [&slots, &t]() {
    if (t.kind == models::InputKind::Image) {
      for (auto& v : t.conv.w) slots.push_back(&v);
      for (auto& v : t.conv.b) slots.push_back(&v);
    } else {
      slots.push_back(&t.mlp.w1);
      slots.push_back(&t.mlp.b1);
      slots.push_back(&t.mlp.w2);
      slots.push_back(&t.mlp.b2);
    }
  };
  auto add_trunk_bias = [&slots, &t]() {
    if (t.kind == models::InputKind::Image) {
      for (auto& v : t.conv.b) slots.push_back(&v);
    } else {
      slots.push_back(&t.mlp.b1);
      slots.push_back(&t.mlp.b2);
    }
  };
  switch (scope) {
    case AdaptScope::Full:
      add_trunk_all();
      slots.push_back(&h.w);
      slots.push_back(&h.b);
      break;
    case AdaptScope::Head:
      slots.push_back(&h.w);
      slots.push_back(&h.b);
      break;
    case AdaptScope::Bias:
      add_trunk_bias();
      slots.push_back(&h.b);
      break;
  }
  return slots;
}

}  // namespace detail

struct AdaptResult {
  models::Trunk trunk;
  models::LinearHead head;
  // First-order fold-back: base parameter -> final adapted leaf.
  std::vector<std::pair<Var, Var>> fo_links;
};

/**
 * Gradient-descent adaptation on the support cross-entropy. The inputs are
 * untouched; the result shares non-scope parameters with the base model. In
 * first-order mode each step spawns fresh leaves (gradient stops at the
 * adapted parameters and is folded back onto the base by the outer loop); in
 * second-order mode the update stays on the tape.
 */
inline AdaptResult inner_adapt(const models::Trunk& trunk0, const models::LinearHead& head0,
                               const std::vector<FilmLayer>* film,
                               const std::vector<LabeledSample>& support, const AdaptState& st) {
  ++inner_adapt_calls();
  if (support.empty()) throw ConfigError("inner_adapt: empty support set");
  if (st.steps < 0) throw ConfigError("inner_adapt: negative step count");

  AdaptResult r;
  r.trunk = trunk0;
  r.head = head0;
  if (st.zero_head_init)
    r.head = models::LinearHead::zero(head0.w.value().dim(0), head0.w.value().dim(1));

  // Snapshot of the adaptation start, for first-order fold-back links.
  models::Trunk start_trunk = r.trunk;
  models::LinearHead start_head = r.head;
  std::vector<Var*> base_slots = detail::scope_slots(start_trunk, start_head, st.scope);
  std::vector<Var> base_vars;
  for (Var* s : base_slots) base_vars.push_back(*s);

  Tensor x = detail::stack_inputs(support);
  std::vector<int> y = detail::labels_of(support);

  for (int t = 0; t < st.steps; ++t) {
    std::vector<Var*> slots = detail::scope_slots(r.trunk, r.head, st.scope);
    std::vector<Var> current;
    for (Var* s : slots) current.push_back(*s);

    Var logits = net_logits(r.trunk, r.head, Var::constant(x), film);
    Var loss = cross_entropy_mean(logits, y);
    if (!std::isfinite(loss.value().item()))
      throw NumericalError("inner_adapt: non-finite support loss at step " + std::to_string(t));
    std::vector<Var> grads = grad_all(loss, current, st.second_order);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i].value().all_finite())
        throw NumericalError("inner_adapt: non-finite gradient at step " + std::to_string(t));
      Var updated;
      if (st.second_order) {
        updated = sub(current[i], scale(grads[i], st.inner_lr));
      } else {
        Tensor v = current[i].value();
        const Tensor& g = grads[i].value();
        for (long j = 0; j < v.size(); ++j) v[j] -= st.inner_lr * g[j];
        updated = Var::leaf(std::move(v));
      }
      *slots[i] = updated;
    }
  }

  if (!st.second_order && st.steps > 0) {
    std::vector<Var*> final_slots = detail::scope_slots(r.trunk, r.head, st.scope);
    bool head_linked = !st.zero_head_init;
    std::size_t head_param_count = 2;  // w and b sit at the tail of the slot list
    for (std::size_t i = 0; i < base_vars.size(); ++i) {
      bool is_head_slot = st.scope != AdaptScope::Bias
                              ? i + head_param_count >= base_vars.size()
                              : i + 1 == base_vars.size();
      if (is_head_slot && !head_linked) continue;
      r.fo_links.push_back({base_vars[i], *final_slots[i]});
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// task embeddings for the training objective

/** Eq.-style feature aggregation: reducer over backbone features of the support. */
inline encoding::TaskEmbedding aggregate_features(const Task& task, const Model& model,
                                                  encoding::TaskEmbedding::Adaptation adaptation,
                                                  const std::string& reducer,
                                                  const AdaptState& adapt_state) {
  const models::Trunk* trunk = &model.backbone;
  AdaptResult adapted;
  if (adaptation == encoding::TaskEmbedding::Adaptation::Post) {
    adapted = inner_adapt(model.backbone, model.head, nullptr, task.support, adapt_state);
    trunk = &adapted.trunk;
  }
  const models::Trunk* t = trunk;
  auto e = encoding::aggregate_features_with(
      task, [t](const Tensor& x) { return t->forward(Var::constant(x)); }, reducer);
  e.adaptation = adaptation;
  return e;
}

// Raw embedding vector for routing / dumps (no tape).
inline Tensor embed_task(const Model& model, const Task& task, EmbeddingMode mode,
                         const AdaptState& adapt_state) {
  NoGradScope ng;
  switch (mode) {
    case EmbeddingMode::SetEncoder:
      return encoding::encode_support_set(task, model.encoder).vec();
    case EmbeddingMode::FeatureAggPre:
      return aggregate_features(task, model, encoding::TaskEmbedding::Adaptation::Pre, "mean",
                                adapt_state)
          .vec();
    case EmbeddingMode::FeatureAggPost:
      return aggregate_features(task, model, encoding::TaskEmbedding::Adaptation::Post, "mean",
                                adapt_state)
          .vec();
  }
  throw ConfigError("embed_task: bad mode");
}

// ---------------------------------------------------------------------------
// training configuration

struct TrainConfig {
  int ways = 5;
  int shots = 1;
  int query_per_class = 15;
  int batch_size = 8;
  int steps = 500;
  std::uint64_t seed = 0;
  double outer_lr = 1e-3;
  std::string outer_opt = "adam";  // adam | sgd
  double inner_lr = 0.4;
  int inner_steps = 1;
  bool second_order = false;
  losses::LossConfig loss;  // temperature, lambda_con, cluster_count, entropy_weight
  taskaug::AugmentSpec augment;
  EmbeddingMode embedding_mode = EmbeddingMode::SetEncoder;
  double divergence_threshold = 1e6;
  int divergence_patience = 10;

  void validate() const {
    if (ways < 2 || shots < 1 || query_per_class < 1) throw ConfigError("TrainConfig: bad episode shape");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be positive");
    if (steps < 1) throw ConfigError("TrainConfig: steps must be positive");
    if (!(outer_lr > 0.0) || !(inner_lr > 0.0)) throw ConfigError("TrainConfig: rates must be positive");
    if (inner_steps < 0) throw ConfigError("TrainConfig: inner_steps must be nonnegative");
    if (outer_opt != "adam" && outer_opt != "sgd") throw ConfigError("TrainConfig: unknown optimizer");
    loss.validate(false);
  }

  AdaptState adapt_state(Family family) const {
    AdaptState st;
    st.inner_lr = inner_lr;
    st.steps = inner_steps;
    st.scope = family == Family::Anil ? AdaptScope::Head : AdaptScope::Full;
    st.second_order = second_order;
    return st;
  }
};

struct StepReport {
  int step = 0;
  double episodic = 0.0;
  double l_con = 0.0;
  double l_clu = 0.0;
  double entropy = 0.0;
  double total = 0.0;
  double lambda = 0.0;
};

class OuterOptimizer {
 public:
  OuterOptimizer(const std::string& kind, double lr)
      : adam_(lr), sgd_(lr), use_adam_(kind == "adam") {
    if (kind != "adam" && kind != "sgd") throw ConfigError("OuterOptimizer: unknown kind " + kind);
  }

  void step(std::vector<Var>& params, const std::vector<Tensor>& grads) {
    if (use_adam_)
      adam_.step(params, grads);
    else
      sgd_.step(params, grads);
  }

 private:
  AdamOptimizer adam_;
  SgdOptimizer sgd_;
  bool use_adam_;
};

// ---------------------------------------------------------------------------
// one outer step

namespace detail {

struct EmbeddingBatch {
  std::vector<encoding::TaskEmbedding> raw;
  Var raw_matrix;        // [n, d]
  Var projected_matrix;  // [n, p], unit rows when configured
  // First-order fold-back links from feature-agg-post adaptations.
  std::vector<std::pair<Var, Var>> links;
};

inline EmbeddingBatch embed_views(const Model& model, const std::vector<Task>& views,
                                  const TrainConfig& cfg, Method method) {
  EmbeddingBatch out;
  for (const Task& v : views) {
    encoding::TaskEmbedding e;
    switch (cfg.embedding_mode) {
      case EmbeddingMode::SetEncoder:
        e = encoding::encode_support_set(v, model.encoder);
        break;
      case EmbeddingMode::FeatureAggPre:
        e = aggregate_features(v, model, encoding::TaskEmbedding::Adaptation::Pre, "mean",
                               cfg.adapt_state(method.family));
        break;
      case EmbeddingMode::FeatureAggPost: {
        AdaptResult ar =
            inner_adapt(model.backbone, model.head, nullptr, v.support, cfg.adapt_state(method.family));
        for (const auto& link : ar.fo_links) out.links.push_back(link);
        models::Trunk adapted_trunk = ar.trunk;
        e = encoding::aggregate_features_with(
            v, [adapted_trunk](const Tensor& x) { return adapted_trunk.forward(Var::constant(x)); },
            "mean");
        e.adaptation = encoding::TaskEmbedding::Adaptation::Post;
        break;
      }
    }
    out.raw.push_back(std::move(e));
  }
  out.raw_matrix = encoding::embeddings_to_matrix(out.raw);
  std::vector<Var> proj;
  proj.reserve(out.raw.size());
  for (const auto& e : out.raw) proj.push_back(encoding::project_embedding(e, model.projection));
  out.projected_matrix = concat_rows(proj);
  return out;
}

}  // namespace detail

/**
 * One outer update. Contrastive variants add lambda * L_con computed on an
 * augmented batch of 2B views; supervised variants add the domain-label
 * baselines. Episodic query losses are summed over the batch tasks.
 */
inline StepReport meta_train_step(Model& model, const TaskBatch& batch, const TrainConfig& cfg,
                                  Method method, OuterOptimizer& opt, std::uint64_t step_seed,
                                  std::vector<Tensor>* grads_out = nullptr) {
  if (batch.tasks.empty()) throw ConfigError("meta_train_step: empty batch");
  StepReport report;
  report.lambda = cfg.loss.lambda_con;

  models::ParamList params = model.named_params();
  std::vector<Var> leaves = params.vars();
  std::vector<std::pair<Var, Var>> links;

  // --- episodic term ---
  Var episodic;
  AdaptState st = cfg.adapt_state(method.family);
  for (const Task& task : batch.tasks) {
    std::vector<FilmLayer> film;
    const std::vector<FilmLayer>* film_ptr = nullptr;
    if (method.family == Family::Mmaml) {
      auto z = encoding::encode_support_set(task, model.encoder);
      film = model.film_gen.generate(z.row);
      film_ptr = &film;
    } else if (method.family == Family::CcFilm) {
      auto z = encoding::encode_support_set(task, model.encoder);
      Tensor probs;
      {
        NoGradScope ng;
        probs = model.cluster.assign(Var::constant(z.row.value())).value();
      }
      int best = 0;
      for (int c = 1; c < probs.dim(1); ++c)
        if (probs.at(0, c) > probs.at(0, best)) best = c;
      film = model.film_experts[static_cast<std::size_t>(best)];
      film_ptr = &film;
    }
    AdaptResult adapted = inner_adapt(model.backbone, model.head, film_ptr, task.support, st);
    for (auto& link : adapted.fo_links) links.push_back(link);
    Var logits = net_logits(adapted.trunk, adapted.head, Var::constant(detail::stack_inputs(task.query)),
                            film_ptr);
    Var task_loss = cross_entropy_mean(logits, detail::labels_of(task.query));
    episodic = episodic.defined() ? add(episodic, task_loss) : task_loss;
  }
  report.episodic = episodic.value().item();
  Var total = episodic;

  // --- contrastive / supervised terms ---
  double lambda = cfg.loss.lambda_con;
  if (method.family == Family::CcFilm) {
    if (lambda > 0.0) {
      auto aug = taskaug::make_contrastive_batch(batch, cfg.augment, derive_seed(step_seed, "aug"));
      auto emb = detail::embed_views(model, aug.views, cfg, method);
      for (const auto& link : emb.links) links.push_back(link);
      Var probs = model.cluster.assign(emb.raw_matrix);
      losses::LossConfig lc = cfg.loss;
      auto parts = losses::contrastive_clustering_loss(emb.projected_matrix, probs, lc);
      report.l_con = parts.task_term.value().item();
      report.l_clu = parts.cluster_term.value().item();
      report.entropy = parts.entropy.value().item();
      total = add(total, scale(parts.total, lambda));
    }
  } else if (method.sup == Supervision::Contrastive) {
    if (lambda > 0.0) {
      auto aug = taskaug::make_contrastive_batch(batch, cfg.augment, derive_seed(step_seed, "aug"));
      auto emb = detail::embed_views(model, aug.views, cfg, method);
      for (const auto& link : emb.links) links.push_back(link);
      Var lcon = losses::task_contrastive_loss(emb.projected_matrix, cfg.loss.temperature);
      report.l_con = lcon.value().item();
      total = add(total, scale(lcon, lambda));
    }
  } else if (method.sup == Supervision::Supervised) {
    if (lambda > 0.0) {
      episodes::DomainRevealScope reveal;  // supervised baselines assume task sources
      if (method.family == Family::Mmaml) {
        if (model.spec.domain_count < 2)
          throw ConfigError("meta_train_step: supervised mmaml needs a domain head");
        std::vector<Var> zrows;
        std::vector<int> domains;
        for (const Task& task : batch.tasks) {
          zrows.push_back(encoding::encode_support_set(task, model.encoder).row);
          domains.push_back(task.domain_id());
        }
        Var logits = model.domain_head.forward(concat_rows(zrows));
        Var lsup = cross_entropy_mean(logits, domains);
        report.l_con = lsup.value().item();
        total = add(total, scale(lsup, lambda));
      } else {
        auto aug = taskaug::make_contrastive_batch(batch, cfg.augment, derive_seed(step_seed, "aug"));
        auto emb = detail::embed_views(model, aug.views, cfg, method);
        for (const auto& link : emb.links) links.push_back(link);
        std::vector<int> domains;
        for (const Task& v : aug.views) domains.push_back(v.domain_id());
        Var lsup = losses::supervised_task_contrastive_loss(emb.projected_matrix, domains,
                                                            cfg.loss.temperature);
        report.l_con = lsup.value().item();
        total = add(total, scale(lsup, lambda));
      }
    }
  }

  report.total = total.value().item();
  if (!std::isfinite(report.total))
    throw NumericalError("meta_train_step: non-finite total loss");

  // --- backward + first-order fold ---
  std::vector<Var> all_leaves = leaves;
  for (const auto& [base, adapted] : links) all_leaves.push_back(adapted);
  std::vector<Var> grads = grad_all(total, all_leaves);

  std::unordered_map<VarNode*, std::size_t> index;
  for (std::size_t i = 0; i < leaves.size(); ++i) index[leaves[i].node()] = i;
  std::vector<Tensor> folded;
  folded.reserve(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) folded.push_back(grads[i].value());
  for (std::size_t k = 0; k < links.size(); ++k) {
    auto it = index.find(links[k].first.node());
    if (it == index.end()) continue;  // adaptation started from a non-model parameter
    const Tensor& g = grads[leaves.size() + k].value();
    Tensor& dst = folded[it->second];
    for (long j = 0; j < dst.size(); ++j) dst[j] += g[j];
  }

  if (grads_out) *grads_out = folded;
  opt.step(leaves, folded);
  return report;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainLogEntry {
  StepReport report;
  std::string method;
  std::uint64_t seed;
};

struct TrainResult {
  std::vector<StepReport> log;
};

/**
 * Full training run: deterministic given (config, seed). Unsupervised methods
 * run domain-blind; the guard trips if anything on the training path touches
 * a hidden domain id. Divergence (non-finite or runaway loss for
 * `divergence_patience` consecutive steps) raises NumericalError.
 */
inline TrainResult meta_train(Model& model, const episodes::MixtureSpec& mixture,
                              const TrainConfig& cfg, Method method,
                              const std::function<void(int, const Model&, const StepReport&)>&
                                  on_step = nullptr) {
  cfg.validate();
  if (method.family == Family::CcFilm) cfg.loss.validate(true);
  OuterOptimizer opt(cfg.outer_opt, cfg.outer_lr);
  TrainResult result;
  int bad_steps = 0;

  std::optional<episodes::DomainBlindScope> blind;
  if (method.sup != Supervision::Supervised) blind.emplace();

  for (int step = 0; step < cfg.steps; ++step) {
    std::uint64_t step_seed = derive_seed(cfg.seed, "train-step", static_cast<std::uint64_t>(step));
    TaskBatch batch = episodes::sample_task_batch(mixture, cfg.batch_size, cfg.ways, cfg.shots,
                                                  cfg.query_per_class, step_seed);
    StepReport report;
    try {
      report = meta_train_step(model, batch, cfg, method, opt, step_seed);
    } catch (const NumericalError& e) {
      throw NumericalError("meta_train: diverged at step " + std::to_string(step) + ": " + e.what());
    }
    report.step = step;
    if (!std::isfinite(report.total) || report.total > cfg.divergence_threshold) {
      if (++bad_steps >= cfg.divergence_patience)
        throw NumericalError("meta_train: loss exceeded divergence threshold for " +
                             std::to_string(bad_steps) + " consecutive steps at step " +
                             std::to_string(step));
    } else {
      bad_steps = 0;
    }
    result.log.push_back(report);
    if (on_step) on_step(step, model, report);
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluation

// Maps a task to predicted query labels.
using TaskAdapter = std::function<std::vector<int>(const Task&)>;

inline std::vector<int> predict_query(const models::Trunk& trunk, const models::LinearHead& head,
                                      const Task& task, const std::vector<FilmLayer>* film) {
  NoGradScope ng;
  Var logits = net_logits(trunk, head, Var::constant(detail::stack_inputs(task.query)), film);
  std::vector<int> out;
  const Tensor& m = logits.value();
  for (int i = 0; i < m.dim(0); ++i) {
    int best = 0;
    for (int c = 1; c < m.dim(1); ++c)
      if (m.at(i, c) > m.at(i, best)) best = c;
    out.push_back(best);
  }
  return out;
}

/** Standard adapter: per-method modulation + inner adaptation + argmax. */
inline TaskAdapter make_adapter(const Model& model, Method method, const TrainConfig& cfg) {
  return [&model, method, cfg](const Task& task) {
    AdaptState st = cfg.adapt_state(method.family);
    std::vector<FilmLayer> film;
    const std::vector<FilmLayer>* film_ptr = nullptr;
    if (method.family == Family::Mmaml) {
      NoGradScope ng;
      auto z = encoding::encode_support_set(task, model.encoder);
      film = model.film_gen.generate(z.row);
      film_ptr = &film;
    } else if (method.family == Family::CcFilm) {
      NoGradScope ng;
      auto z = encoding::encode_support_set(task, model.encoder);
      Tensor probs = model.cluster.assign(z.row).value();
      int best = 0;
      for (int c = 1; c < probs.dim(1); ++c)
        if (probs.at(0, c) > probs.at(0, best)) best = c;
      film = model.film_experts[static_cast<std::size_t>(best)];
      film_ptr = &film;
    }
    AdaptResult adapted = inner_adapt(model.backbone, model.head, film_ptr, task.support, st);
    return predict_query(adapted.trunk, adapted.head, task, film_ptr);
  };
}

struct AccuracyReport {
  evalkit::AccuracyStat overall;
  std::map<int, evalkit::AccuracyStat> by_domain;  // keyed by domain ordinal
  std::vector<double> per_episode;
  std::vector<int> episode_domains;
};

namespace detail {

inline evalkit::AccuracyStat stat_of(const std::vector<double>& values) {
  evalkit::AccuracyStat s;
  s.episodes = static_cast<int>(values.size());
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / values.size();
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    double sd = std::sqrt(ss / (values.size() - 1.0));
    s.ci = 1.96 * sd / std::sqrt(double(values.size()));
  }
  return s;
}

}  // namespace detail

/** Per-domain and average query accuracy with 95% CI = 1.96*stdev/sqrt(E). */
inline AccuracyReport evaluate_few_shot(const TaskAdapter& adapter,
                                        const episodes::MixtureSpec& mixture, int episodes_count,
                                        int ways, int shots, int query_per_class,
                                        std::uint64_t seed) {
  if (episodes_count < 2) throw ConfigError("evaluate_few_shot: need at least 2 episodes");
  AccuracyReport report;
  std::map<int, std::vector<double>> per_domain;
  for (int e = 0; e < episodes_count; ++e) {
    std::uint64_t es = derive_seed(seed, "eval-episode", static_cast<std::uint64_t>(e));
    Rng rng(es);
    int which = rng.pick_weighted(mixture.weights);
    Task task = episodes::sample_episode(mixture.domains[static_cast<std::size_t>(which)], ways,
                                         shots, query_per_class, rng.next_u64());
    std::vector<int> pred = adapter(task);
    if (pred.size() != task.query.size())
      throw ConfigError("evaluate_few_shot: adapter returned wrong prediction count");
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == task.query[i].label) ++correct;
    double acc = double(correct) / double(pred.size());
    report.per_episode.push_back(acc);
    report.episode_domains.push_back(task.domain_id());
    per_domain[task.domain_id()].push_back(acc);
  }
  report.overall = detail::stat_of(report.per_episode);
  for (const auto& [dom, accs] : per_domain) report.by_domain[dom] = detail::stat_of(accs);
  return report;
}

}  // namespace taskcl::metalearn
