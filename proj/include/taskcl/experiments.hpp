#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taskcl/checkpoint.hpp"
#include "taskcl/config.hpp"
#include "taskcl/routing.hpp"

namespace taskcl::experiments {

using config::ExperimentConfig;
using episodes::MixtureSpec;
using episodes::Task;
using metalearn::Model;

// ---------------------------------------------------------------------------
// method strings accepted by the runner: the plain/contrastive/supervised
// maml|anil|mmaml families, their tsa-* expert-bank pipelines, and cc-film.

struct PipelineMethod {
  bool tsa = false;
  metalearn::Method base;
  std::string raw;

  static PipelineMethod parse(const std::string& s) {
    PipelineMethod m;
    m.raw = s;
    if (s.rfind("tsa-", 0) == 0) {
      m.tsa = true;
      m.base = metalearn::Method::parse(s.substr(4));
      if (m.base.family != metalearn::Family::Maml && m.base.family != metalearn::Family::Anil)
        throw ConfigError("method: tsa pipelines build on maml or anil, got " + s);
    } else {
      m.base = metalearn::Method::parse(s);
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// embedding dumps (balanced per domain, evaluation-side)

struct EmbeddingDump {
  evalkit::PointSet points;
  std::vector<std::uint64_t> origin_ids;
  std::vector<int> domains;
};

inline EmbeddingDump embed_dump(const Model& model, const MixtureSpec& mixture, int per_domain,
                                int ways, int shots, int query_per_class,
                                metalearn::EmbeddingMode mode, const metalearn::AdaptState& st,
                                std::uint64_t seed) {
  EmbeddingDump dump;
  for (std::size_t d = 0; d < mixture.domains.size(); ++d) {
    for (int i = 0; i < per_domain; ++i) {
      Task t = episodes::sample_episode(
          mixture.domains[d], ways, shots, query_per_class,
          derive_seed(seed, "dump", d * 1000003ULL + static_cast<std::uint64_t>(i)));
      Tensor z = metalearn::embed_task(model, t, mode, st);
      dump.points.push_back(z.raw());
      dump.origin_ids.push_back(t.origin_id);
      dump.domains.push_back(t.domain_id());
    }
  }
  return dump;
}

// ---------------------------------------------------------------------------
// contrastive encoder training (the ablation backbone): NT-Xent on augmented
// task pairs, optimizing the set encoder and projection head only.

inline Model train_contrastive_encoder(
    const MixtureSpec& mixture, const metalearn::ModelSpec& spec,
    const metalearn::TrainConfig& cfg,
    const std::function<void(const metalearn::StepReport&)>& on_step = nullptr) {
  cfg.validate();
  Model model = Model::init(spec, cfg.seed);
  models::ParamList plist;
  plist.extend("", model.encoder.parameters("encoder."));
  plist.extend("", model.projection.parameters("projection."));
  std::vector<Var> params = plist.vars();
  metalearn::OuterOptimizer opt(cfg.outer_opt, cfg.outer_lr);

  episodes::DomainBlindScope blind;
  for (int step = 0; step < cfg.steps; ++step) {
    std::uint64_t ss = derive_seed(cfg.seed, "enc-step", static_cast<std::uint64_t>(step));
    auto batch = episodes::sample_task_batch(mixture, cfg.batch_size, cfg.ways, cfg.shots,
                                             cfg.query_per_class, ss);
    auto aug = taskaug::make_contrastive_batch(batch, cfg.augment, derive_seed(ss, "aug"));
    std::vector<Var> proj;
    for (const Task& v : aug.views)
      proj.push_back(
          encoding::project_embedding(encoding::encode_support_set(v, model.encoder), model.projection));
    Var loss = losses::task_contrastive_loss(concat_rows(proj), cfg.loss.temperature);
    if (!std::isfinite(loss.value().item()))
      throw NumericalError("train_contrastive_encoder: non-finite loss at step " + std::to_string(step));
    std::vector<Var> grads = grad_all(loss, params);
    std::vector<Tensor> gv;
    gv.reserve(grads.size());
    for (auto& g : grads) gv.push_back(g.value());
    opt.step(params, gv);
    if (on_step) {
      metalearn::StepReport r;
      r.step = step;
      r.l_con = loss.value().item();
      r.total = r.l_con;
      r.lambda = 1.0;
      on_step(r);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// few-shot accuracy from frozen encoder-trunk features (head-only adaptation)

namespace detail {

// Per-sample encoder-trunk features; label-conditioned encoders get zeroed
// label channels, since class identity is unknown at feature-extraction time.
inline Tensor encoder_features(const Model& model, const std::vector<episodes::LabeledSample>& set) {
  NoGradScope ng;
  int extra = model.encoder.params.label_conditioned ? model.encoder.params.ways : 0;
  const Tensor& first = set[0].sample.data;
  int n = static_cast<int>(set.size());
  Tensor x;
  if (first.rank() == 3) {
    int C = first.dim(0), H = first.dim(1), W = first.dim(2);
    x = Tensor({n, C + extra, H, W});
    for (int i = 0; i < n; ++i)
      std::copy(set[static_cast<std::size_t>(i)].sample.data.data(),
                set[static_cast<std::size_t>(i)].sample.data.data() + first.size(),
                x.data() + static_cast<long>(i) * (C + extra) * H * W);
  } else {
    int D = first.dim(0);
    x = Tensor({n, D + extra});
    for (int i = 0; i < n; ++i)
      std::copy(set[static_cast<std::size_t>(i)].sample.data.data(),
                set[static_cast<std::size_t>(i)].sample.data.data() + D,
                x.data() + static_cast<long>(i) * (D + extra));
  }
  return model.encoder.trunk.forward(Var::constant(x)).value();
}

}  // namespace detail

/** Few-shot accuracy with a per-episode softmax head on frozen trunk features. */
inline metalearn::AccuracyReport encoder_feature_accuracy(const Model& model,
                                                          const MixtureSpec& mixture, int episodes_n,
                                                          int ways, int shots, int query_per_class,
                                                          std::uint64_t seed, int head_steps = 120,
                                                          double head_lr = 0.5) {
  metalearn::TaskAdapter adapter = [&model, ways, head_steps, head_lr](const Task& task) {
    Tensor fs = detail::encoder_features(model, task.support);
    Tensor fq = detail::encoder_features(model, task.query);
    int d = fs.dim(1);
    models::LinearHead head = models::LinearHead::zero(d, ways);
    std::vector<Var> hp = {head.w, head.b};
    std::vector<int> y = metalearn::detail::labels_of(task.support);
    SgdOptimizer opt(head_lr);
    for (int s = 0; s < head_steps; ++s) {
      Var loss = cross_entropy_mean(head.forward(Var::constant(fs)), y);
      std::vector<Var> grads = grad_all(loss, hp);
      std::vector<Tensor> gv = {grads[0].value(), grads[1].value()};
      opt.step(hp, gv);
    }
    NoGradScope ng;
    Var logits = head.forward(Var::constant(fq));
    std::vector<int> pred;
    for (int i = 0; i < logits.value().dim(0); ++i) {
      int best = 0;
      for (int c = 1; c < ways; ++c)
        if (logits.value().at(i, c) > logits.value().at(i, best)) best = c;
      pred.push_back(best);
    }
    return pred;
  };
  return metalearn::evaluate_few_shot(adapter, mixture, episodes_n, ways, shots, query_per_class,
                                      derive_seed(seed, "feature-acc"));
}

// ---------------------------------------------------------------------------
// augmentation ablation (the DB / probe / accuracy table)

struct AblationRow {
  std::string strategy;
  double db = 0.0;
  double probe = 0.0;
  double accuracy = 0.0;
};

struct AblationOutcome {
  std::vector<AblationRow> rows;
  std::map<std::string, Model> models;
  std::map<std::string, EmbeddingDump> dumps;
};

inline AblationOutcome run_ablation(const ExperimentConfig& cfg,
                                    const std::vector<std::string>& strategies,
                                    int dump_per_domain = 40, int accuracy_episodes = 60,
                                    const std::function<void(const std::string&, const metalearn::StepReport&)>&
                                        on_step = nullptr) {
  AblationOutcome out;
  MixtureSpec mixture = config::build_mixture(cfg);
  for (const std::string& name : strategies) {
    ExperimentConfig row_cfg = cfg;
    row_cfg.train.augment = taskaug::AugmentSpec::parse(name);
    row_cfg.label_conditioned_encoder = row_cfg.train.augment.use_relabel;

    metalearn::ModelSpec ms = config::build_model_spec(row_cfg, metalearn::Method::parse("maml"));
    ms.embedding_mode = metalearn::EmbeddingMode::SetEncoder;
    Model model = train_contrastive_encoder(
        mixture, ms, row_cfg.train,
        on_step ? [&name, &on_step](const metalearn::StepReport& r) { on_step(name, r); }
                : std::function<void(const metalearn::StepReport&)>());

    metalearn::AdaptState st = row_cfg.train.adapt_state(metalearn::Family::Maml);
    EmbeddingDump dump =
        embed_dump(model, mixture, dump_per_domain, row_cfg.train.ways, row_cfg.train.shots,
                   row_cfg.train.query_per_class, metalearn::EmbeddingMode::SetEncoder, st,
                   derive_seed(cfg.seed, "ablate-dump:" + name));

    AblationRow row;
    row.strategy = name;
    row.db = evalkit::davies_bouldin(dump.points, dump.domains);
    row.probe = evalkit::linear_probe(dump.points, dump.domains, derive_seed(cfg.seed, "probe:" + name));
    row.accuracy = encoder_feature_accuracy(model, mixture, accuracy_episodes, row_cfg.train.ways,
                                            row_cfg.train.shots, row_cfg.train.query_per_class,
                                            derive_seed(cfg.seed, "acc:" + name))
                       .overall.mean;
    out.rows.push_back(row);
    out.dumps.emplace(name, std::move(dump));
    out.models.emplace(name, std::move(model));
  }
  return out;
}

// ---------------------------------------------------------------------------
// entropy-collapse experiment (clustering loss with/without the entropy term)

struct CollapseOutcome {
  double initial_max_share = 0.0;
  double final_max_share = 0.0;
};

/**
 * Fixed task embeddings forming one tight blob, adversarial cluster-head
 * start (bias strongly favoring cluster 0). Splitting the blob needs huge
 * head weights, so without the entropy term gradient descent stays in the
 * all-one-cluster solution; the entropy term forces the marginal apart.
 */
inline CollapseOutcome collapse_experiment(double entropy_weight, std::uint64_t seed,
                                           int steps = 400, int pairs = 24, int clusters = 3) {
  Rng rng(derive_seed(seed, "collapse"));
  int dim = 8;
  std::vector<double> center(static_cast<std::size_t>(dim));
  for (double& v : center) v = 2.0 * rng.normal();
  std::vector<std::vector<double>> rows;
  for (int p = 0; p < pairs; ++p) {
    std::vector<double> base = center;
    for (double& v : base) v += 0.05 * rng.normal();
    for (int view = 0; view < 2; ++view) {
      std::vector<double> v = base;
      for (double& x : v) x += 0.02 * rng.normal();
      rows.push_back(std::move(v));
    }
  }
  Tensor zt({static_cast<int>(rows.size()), dim});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < dim; ++j) zt.at(static_cast<int>(i), j) = rows[i][static_cast<std::size_t>(j)];
  Var z = Var::constant(zt);

  losses::ClusterHead head = losses::ClusterHead::init(dim, clusters, rng);
  for (long i = 0; i < head.w.value().size(); ++i) head.w.value_mut()[i] *= 0.05;
  head.b.value_mut()[0] = 5.0;  // adversarial start: everything lands in cluster 0

  losses::LossConfig lc;
  lc.temperature = 0.5;
  lc.cluster_count = clusters;
  lc.entropy_weight = entropy_weight;

  auto max_share = [&head, &z]() {
    NoGradScope ng;
    Tensor probs = head.assign(z).value();
    double best = 0.0;
    for (int c = 0; c < probs.dim(1); ++c) {
      double share = 0.0;
      for (int i = 0; i < probs.dim(0); ++i) share += probs.at(i, c);
      best = std::max(best, share / probs.dim(0));
    }
    return best;
  };

  CollapseOutcome out;
  out.initial_max_share = max_share();
  std::vector<Var> params = {head.w, head.b};
  AdamOptimizer opt(0.05);
  for (int s = 0; s < steps; ++s) {
    auto parts = losses::contrastive_clustering_loss(z, head, lc);
    std::vector<Var> grads = grad_all(parts.total, params);
    std::vector<Tensor> gv = {grads[0].value(), grads[1].value()};
    opt.step(params, gv);
  }
  out.final_max_share = max_share();
  return out;
}

// ---------------------------------------------------------------------------
// full experiment runner (train -> optional expert bank -> evaluation)

struct RunArtifacts {
  Model model;
  metalearn::TrainResult train_log;
  std::optional<routing::ExpertBank> bank;
  metalearn::AccuracyReport accuracy;
  EmbeddingDump dump;
  std::vector<int> assignments;  // router / k-means cluster per dumped task
  evalkit::MetricsReport metrics;
};

namespace detail {

inline metalearn::AdaptScope eval_scope_for(const routing::ExpertScope& scope) {
  switch (scope.kind) {
    case routing::ExpertScopeKind::Full: return metalearn::AdaptScope::Full;
    case routing::ExpertScopeKind::Head: return metalearn::AdaptScope::Head;
    case routing::ExpertScopeKind::Bias: return metalearn::AdaptScope::Bias;
    case routing::ExpertScopeKind::Tail: return metalearn::AdaptScope::Head;
  }
  return metalearn::AdaptScope::Full;
}

}  // namespace detail

inline RunArtifacts run_experiment(
    const ExperimentConfig& cfg,
    const std::function<void(int, const Model&, const metalearn::StepReport&)>& on_step = nullptr) {
  PipelineMethod method = PipelineMethod::parse(cfg.method);
  MixtureSpec mixture = config::build_mixture(cfg);
  metalearn::ModelSpec ms = config::build_model_spec(cfg, method.base);
  metalearn::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  if (method.base.family == metalearn::Family::CcFilm && tc.loss.cluster_count < 2)
    tc.loss.cluster_count = cfg.routing.experts;

  RunArtifacts art;
  art.model = Model::init(ms, cfg.seed);
  art.train_log = metalearn::meta_train(art.model, mixture, tc, method.base, on_step);

  metalearn::AdaptState adapt = tc.adapt_state(method.base.family);

  // --- optional TSA expert-bank stage ---
  if (method.tsa) {
    routing::ClusterSpace space;
    if (cfg.routing.space == "embedding")
      space = routing::ClusterSpace::Embedding;
    else if (cfg.routing.space == "parameter")
      space = routing::ClusterSpace::Parameter;
    else if (cfg.routing.space.empty())
      space = method.base.sup == metalearn::Supervision::Plain ? routing::ClusterSpace::Parameter
                                                               : routing::ClusterSpace::Embedding;
    else
      throw ConfigError("config: unknown routing space '" + cfg.routing.space + "'");

    routing::EmbedFn embed_fn = [&art, &tc, adapt](const Task& t) {
      return metalearn::embed_task(art.model, t, tc.embedding_mode, adapt).raw();
    };

    std::vector<Task> pool;
    evalkit::PointSet pool_points;
    {
      episodes::DomainBlindScope blind;  // clustering never sees domain labels
      for (int i = 0; i < cfg.routing.pool_tasks; ++i) {
        std::uint64_t ps = derive_seed(cfg.seed, "routing-pool", static_cast<std::uint64_t>(i));
        Rng rng(ps);
        int which = rng.pick_weighted(mixture.weights);
        pool.push_back(episodes::sample_episode(mixture.domains[static_cast<std::size_t>(which)],
                                                tc.ways, tc.shots, tc.query_per_class,
                                                rng.next_u64()));
        if (space == routing::ClusterSpace::Embedding) {
          pool_points.push_back(embed_fn(pool.back()));
        } else {
          metalearn::AdaptState trial = adapt;
          trial.scope = metalearn::AdaptScope::Full;
          auto ar = metalearn::inner_adapt(art.model.backbone, art.model.head, nullptr,
                                           pool.back().support, trial);
          pool_points.push_back(routing::flatten_task_network(ar.trunk, ar.head));
        }
      }
      routing::ClusterModel router = routing::fit_task_clusters(
          pool_points, cfg.routing.experts, derive_seed(cfg.seed, "router"), space);

      routing::FineTuneSpec ft;
      ft.tasks = pool;
      ft.steps = cfg.routing.finetune_steps;
      ft.lr = cfg.routing.finetune_lr;
      ft.route_mode = space == routing::ClusterSpace::Embedding
                          ? routing::RouteMode::Embedding
                          : routing::RouteMode::TrialAdaptation;
      ft.embed_fn = embed_fn;
      auto bank = routing::build_expert_bank(art.model, router,
                                             routing::ExpertScope::parse(cfg.routing.scope), ft);
      bank.trial_state = adapt;
      bank.trial_state.scope = metalearn::AdaptScope::Full;
      art.bank = std::move(bank);
    }

    metalearn::AdaptState eval_state = adapt;
    eval_state.scope = detail::eval_scope_for(art.bank->scope);
    auto mode = space == routing::ClusterSpace::Embedding ? routing::RouteMode::Embedding
                                                          : routing::RouteMode::TrialAdaptation;
    art.accuracy = metalearn::evaluate_few_shot(
        routing::make_bank_adapter(*art.bank, mode, embed_fn, eval_state), mixture,
        cfg.eval_episodes, tc.ways, tc.shots, tc.query_per_class, derive_seed(cfg.seed, "eval"));
  } else {
    art.accuracy = metalearn::evaluate_few_shot(
        metalearn::make_adapter(art.model, method.base, tc), mixture, cfg.eval_episodes, tc.ways,
        tc.shots, tc.query_per_class, derive_seed(cfg.seed, "eval"));
  }

  // --- embedding dump + clustering metrics ---
  metalearn::EmbeddingMode dump_mode =
      (method.base.family == metalearn::Family::Mmaml ||
       method.base.family == metalearn::Family::CcFilm)
          ? metalearn::EmbeddingMode::SetEncoder
          : tc.embedding_mode;
  int per_domain = std::max(12, cfg.eval_episodes / std::max(1, int(mixture.domains.size()) * 2));
  art.dump = embed_dump(art.model, mixture, per_domain, tc.ways, tc.shots, tc.query_per_class,
                        dump_mode, adapt, derive_seed(cfg.seed, "metrics-dump"));

  int k = static_cast<int>(mixture.domains.size());
  if (method.base.family == metalearn::Family::CcFilm) {
    NoGradScope ng;
    for (const auto& p : art.dump.points) {
      Tensor row({1, static_cast<int>(p.size())});
      for (std::size_t j = 0; j < p.size(); ++j) row.at(0, static_cast<int>(j)) = p[j];
      Tensor probs = art.model.cluster.assign(Var::constant(row)).value();
      int best = 0;
      for (int c = 1; c < probs.dim(1); ++c)
        if (probs.at(0, c) > probs.at(0, best)) best = c;
      art.assignments.push_back(best);
    }
    k = art.model.spec.cluster_count;
  } else if (art.bank) {
    for (std::size_t i = 0; i < art.dump.points.size(); ++i)
      art.assignments.push_back(art.bank->router.space == routing::ClusterSpace::Embedding
                                    ? art.bank->router.nearest(art.dump.points[i])
                                    : 0);
    if (art.bank->router.space != routing::ClusterSpace::Embedding) {
      // parameter-space router: re-derive dump assignments by trial adaptation
      art.assignments.clear();
      for (std::size_t d = 0; d < mixture.domains.size(); ++d)
        for (int i = 0; i < per_domain; ++i) {
          Task t = episodes::sample_episode(
              mixture.domains[d], tc.ways, tc.shots, tc.query_per_class,
              derive_seed(derive_seed(cfg.seed, "metrics-dump"), "dump",
                          d * 1000003ULL + static_cast<std::uint64_t>(i)));
          art.assignments.push_back(routing::route_task(t, *art.bank,
                                                        routing::RouteMode::TrialAdaptation));
        }
    }
    k = art.bank->router.k();
  } else {
    auto km = routing::fit_task_clusters(art.dump.points, k, derive_seed(cfg.seed, "metrics-kmeans"));
    art.assignments = routing::assign_all(km, art.dump.points);
  }

  if (mixture.domains.size() >= 2) {
    art.metrics.db_index = evalkit::davies_bouldin(art.dump.points, art.dump.domains);
    art.metrics.probe_accuracy = evalkit::linear_probe(art.dump.points, art.dump.domains,
                                                       derive_seed(cfg.seed, "metrics-probe"));
  }
  art.metrics.overall = art.accuracy.overall;
  for (const auto& [dom, stat] : art.accuracy.by_domain)
    art.metrics.accuracy_by_domain[mixture.domains[static_cast<std::size_t>(dom)].name] = stat;
  art.metrics.heatmap = evalkit::cluster_domain_matrix(art.assignments, art.dump.domains, k,
                                                       static_cast<int>(mixture.domains.size()));
  art.metrics.projection = evalkit::project_2d(art.dump.points);
  return art;
}

}  // namespace taskcl::experiments
