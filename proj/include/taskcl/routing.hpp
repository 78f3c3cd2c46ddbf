#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "taskcl/metalearn.hpp"

namespace taskcl::routing {

using episodes::Task;
using evalkit::PointSet;
using metalearn::Model;

// ---------------------------------------------------------------------------
// k-means clustering

enum class ClusterSpace { Embedding, Parameter };

struct ClusterModel {
  PointSet centers;
  ClusterSpace space = ClusterSpace::Embedding;
  std::uint64_t seed = 0;

  int k() const { return static_cast<int>(centers.size()); }

  // Nearest center by Euclidean distance; ties resolve to the lowest index.
  int nearest(const std::vector<double>& p) const {
    if (centers.empty()) throw ConfigError("ClusterModel: no centers");
    if (p.size() != centers[0].size()) throw ConfigError("ClusterModel: dimension mismatch");
    int best = 0;
    double best_d = evalkit::detail::sq_dist(p, centers[0]);
    for (int c = 1; c < k(); ++c) {
      double d = evalkit::detail::sq_dist(p, centers[static_cast<std::size_t>(c)]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }
};

namespace detail {

struct KmeansRun {
  PointSet centers;
  std::vector<int> assign;
  double inertia = std::numeric_limits<double>::infinity();
};

inline KmeansRun kmeans_once(const PointSet& points, int k, std::uint64_t seed) {
  std::size_t n = points.size(), d = points[0].size();
  Rng rng(seed);
  KmeansRun run;

  // k-means++ seeding
  run.centers.push_back(points[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n)))]);
  std::vector<double> dist2(n);
  while (static_cast<int>(run.centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : run.centers) best = std::min(best, evalkit::detail::sq_dist(points[i], c));
      dist2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total, acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist2[i];
        if (r < acc) {
          pick = i;
          break;
        }
        pick = i;
      }
    } else {
      pick = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n)));
    }
    run.centers.push_back(points[pick]);
  }

  run.assign.assign(n, -1);
  for (int iter = 0; iter < 200; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = evalkit::detail::sq_dist(points[i], run.centers[0]);
      for (int c = 1; c < k; ++c) {
        double dd = evalkit::detail::sq_dist(points[i], run.centers[static_cast<std::size_t>(c)]);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (run.assign[i] != best) {
        run.assign[i] = best;
        changed = true;
      }
    }
    // recompute centers; an emptied cluster takes the point farthest from its center
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    PointSet sums(static_cast<std::size_t>(k), std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      counts[static_cast<std::size_t>(run.assign[i])]++;
      for (std::size_t j = 0; j < d; ++j) sums[static_cast<std::size_t>(run.assign[i])][j] += points[i][j];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          double dd = evalkit::detail::sq_dist(points[i],
                                               run.centers[static_cast<std::size_t>(run.assign[i])]);
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        run.centers[static_cast<std::size_t>(c)] = points[far];
        run.assign[far] = c;
        changed = true;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j)
        run.centers[static_cast<std::size_t>(c)][j] = sums[static_cast<std::size_t>(c)][j] / counts[static_cast<std::size_t>(c)];
    }
    if (!changed) break;
  }

  run.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    run.inertia += evalkit::detail::sq_dist(points[i], run.centers[static_cast<std::size_t>(run.assign[i])]);
  return run;
}

}  // namespace detail

/**
 * K-means with k-means++ seeding, 10 restarts, best inertia kept.
 * Deterministic given the seed.
 */
inline ClusterModel fit_task_clusters(const PointSet& points, int k, std::uint64_t seed,
                                      ClusterSpace space = ClusterSpace::Embedding) {
  evalkit::detail::check_points(points);
  if (k < 1) throw ConfigError("fit_task_clusters: k must be positive");
  if (static_cast<int>(points.size()) < k)
    throw ConfigError("fit_task_clusters: fewer points than clusters");

  detail::KmeansRun best;
  for (int restart = 0; restart < 10; ++restart) {
    auto run = detail::kmeans_once(points, k, derive_seed(seed, "kmeans-restart",
                                                          static_cast<std::uint64_t>(restart)));
    if (run.inertia < best.inertia) best = std::move(run);
  }
  ClusterModel model;
  model.centers = std::move(best.centers);
  model.space = space;
  model.seed = seed;
  return model;
}

inline std::vector<int> assign_all(const ClusterModel& model, const PointSet& points) {
  std::vector<int> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(model.nearest(p));
  return out;
}

/** Best label-permutation agreement between cluster ids and ground truth (k <= 8). */
inline double cluster_match_accuracy(const std::vector<int>& assignments,
                                     const std::vector<int>& truth, int k) {
  if (assignments.size() != truth.size() || assignments.empty())
    throw ConfigError("cluster_match_accuracy: bad inputs");
  if (k > 8) throw ConfigError("cluster_match_accuracy: permutation search limited to k <= 8");
  std::vector<int> perm(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) perm[static_cast<std::size_t>(i)] = i;
  double best = 0.0;
  do {
    int hits = 0;
    for (std::size_t i = 0; i < assignments.size(); ++i)
      if (perm[static_cast<std::size_t>(assignments[i])] == truth[i]) ++hits;
    best = std::max(best, double(hits) / double(assignments.size()));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// ---------------------------------------------------------------------------
// expert banks

enum class ExpertScopeKind { Full, Head, Bias, Tail };

struct ExpertScope {
  ExpertScopeKind kind = ExpertScopeKind::Head;
  int frozen_blocks = 0;  // Tail: adapt blocks >= frozen_blocks plus the head

  static ExpertScope parse(const std::string& s) {
    ExpertScope e;
    if (s == "full") e.kind = ExpertScopeKind::Full;
    else if (s == "head") e.kind = ExpertScopeKind::Head;
    else if (s == "bias") e.kind = ExpertScopeKind::Bias;
    else if (s.rfind("tail", 0) == 0) {
      e.kind = ExpertScopeKind::Tail;
      e.frozen_blocks = std::stoi(s.substr(4));
    } else {
      throw ConfigError("ExpertScope: unknown scope '" + s + "'");
    }
    return e;
  }

  std::string name() const {
    switch (kind) {
      case ExpertScopeKind::Full: return "full";
      case ExpertScopeKind::Head: return "head";
      case ExpertScopeKind::Bias: return "bias";
      case ExpertScopeKind::Tail: return "tail" + std::to_string(frozen_blocks);
    }
    return "?";
  }
};

namespace detail {

// Named slots of the task network (trunk + head) covered by a scope.
inline std::vector<std::pair<std::string, Var*>> scope_slots(models::Trunk& t,
                                                             models::LinearHead& h,
                                                             const ExpertScope& scope) {
  std::vector<std::pair<std::string, Var*>> slots;
  auto head_slots = [&slots, &h]() {
    slots.push_back({"head.w", &h.w});
    slots.push_back({"head.b", &h.b});
  };
  switch (scope.kind) {
    case ExpertScopeKind::Full:
    case ExpertScopeKind::Tail: {
      int from = scope.kind == ExpertScopeKind::Full ? 0 : scope.frozen_blocks;
      if (t.kind == models::InputKind::Image) {
        if (from > t.conv.blocks) throw ConfigError("ExpertScope: frozen block count too large");
        for (int i = from; i < t.conv.blocks; ++i) {
          slots.push_back({"backbone.conv" + std::to_string(i) + ".w",
                           &t.conv.w[static_cast<std::size_t>(i)]});
          slots.push_back({"backbone.conv" + std::to_string(i) + ".b",
                           &t.conv.b[static_cast<std::size_t>(i)]});
        }
      } else {
        if (from > 2) throw ConfigError("ExpertScope: frozen block count too large");
        if (from <= 0) {
          slots.push_back({"backbone.fc1.w", &t.mlp.w1});
          slots.push_back({"backbone.fc1.b", &t.mlp.b1});
        }
        if (from <= 1) {
          slots.push_back({"backbone.fc2.w", &t.mlp.w2});
          slots.push_back({"backbone.fc2.b", &t.mlp.b2});
        }
      }
      head_slots();
      break;
    }
    case ExpertScopeKind::Head:
      head_slots();
      break;
    case ExpertScopeKind::Bias: {
      if (t.kind == models::InputKind::Image) {
        for (int i = 0; i < t.conv.blocks; ++i)
          slots.push_back({"backbone.conv" + std::to_string(i) + ".b",
                           &t.conv.b[static_cast<std::size_t>(i)]});
      } else {
        slots.push_back({"backbone.fc1.b", &t.mlp.b1});
        slots.push_back({"backbone.fc2.b", &t.mlp.b2});
      }
      slots.push_back({"head.b", &h.b});
      break;
    }
  }
  return slots;
}

}  // namespace detail

struct Expert {
  models::ParamList params;  // copies of the scope arrays
  bool trained = false;      // false: cluster was empty, expert stayed at base
};

struct ExpertBank {
  Model base;  // shares parameter storage with the trained model
  ExpertScope scope;
  ClusterModel router;
  std::vector<Expert> experts;
  metalearn::AdaptState trial_state;  // trial-adaptation routing settings
  std::vector<std::string> warnings;

  int expert_count() const { return static_cast<int>(experts.size()); }

  // Task network (trunk + head) with an expert's arrays swapped in.
  std::pair<models::Trunk, models::LinearHead> merged(int expert_idx) const {
    models::Trunk t = base.backbone;
    models::LinearHead h = base.head;
    ExpertScope sc = scope;
    auto slots = detail::scope_slots(t, h, sc);
    const auto& items = experts[static_cast<std::size_t>(expert_idx)].params.items;
    if (slots.size() != items.size()) throw ConfigError("ExpertBank: scope/expert array mismatch");
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].second = items[i].second;
    return {t, h};
  }
};

// Flattened task-network parameters in manifest order (trial-adaptation space).
inline std::vector<double> flatten_task_network(const models::Trunk& trunk,
                                                const models::LinearHead& head) {
  models::ParamList list;
  trunk.collect(list, "backbone.");
  head.collect(list, "head.");
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(list.total_size()));
  for (const auto& [name, v] : list.items)
    flat.insert(flat.end(), v.value().raw().begin(), v.value().raw().end());
  return flat;
}

enum class RouteMode { Embedding, TrialAdaptation };

using EmbedFn = std::function<std::vector<double>(const Task&)>;

/**
 * Embedding mode: one forward pass, nearest center, no gradient steps.
 * Trial mode: one full adaptation on the support set, then nearest center in
 * parameter space.
 */
inline int route_task(const Task& task, const ExpertBank& bank, RouteMode mode,
                      const EmbedFn& embed_fn = nullptr) {
  if (bank.experts.empty()) throw ConfigError("route_task: empty expert bank");
  if (mode == RouteMode::Embedding) {
    if (bank.router.space != ClusterSpace::Embedding)
      throw ConfigError("route_task: embedding mode needs an embedding-space router");
    if (!embed_fn) throw ConfigError("route_task: embedding mode needs an embed_fn");
    return bank.router.nearest(embed_fn(task));
  }
  if (bank.router.space != ClusterSpace::Parameter)
    throw ConfigError("route_task: trial mode needs a parameter-space router");
  metalearn::AdaptState st = bank.trial_state;
  st.scope = metalearn::AdaptScope::Full;
  auto adapted = metalearn::inner_adapt(bank.base.backbone, bank.base.head, nullptr, task.support, st);
  return bank.router.nearest(flatten_task_network(adapted.trunk, adapted.head));
}

struct FineTuneSpec {
  std::vector<Task> tasks;  // pool to route and fine-tune on
  int steps = 100;          // gradient steps per expert
  double lr = 0.05;
  RouteMode route_mode = RouteMode::Embedding;
  EmbedFn embed_fn;  // embedding-mode routing of the pool
};

/**
 * Experts start as copies of the base restricted to the scope, then take
 * plain gradient steps on the support+query cross-entropy of the tasks routed
 * to their cluster (one task per step, cycled). A cluster with no routed
 * tasks leaves its expert at the base initialization, with a warning.
 */
inline ExpertBank build_expert_bank(const Model& base, const ClusterModel& router,
                                    const ExpertScope& scope, const FineTuneSpec& ft) {
  ExpertBank bank;
  bank.base = base;
  bank.scope = scope;
  bank.router = router;

  // fresh copies of the scope arrays per expert
  for (int e = 0; e < router.k(); ++e) {
    models::Trunk t = base.backbone;
    models::LinearHead h = base.head;
    ExpertScope sc = scope;
    Expert expert;
    for (auto& [name, slot] : detail::scope_slots(t, h, sc))
      expert.params.add(name, Var::leaf(slot->value()));
    bank.experts.push_back(std::move(expert));
  }

  std::vector<std::vector<const Task*>> routed(static_cast<std::size_t>(router.k()));
  for (const Task& task : ft.tasks) {
    int e = route_task(task, bank, ft.route_mode, ft.embed_fn);
    routed[static_cast<std::size_t>(e)].push_back(&task);
  }

  for (int e = 0; e < router.k(); ++e) {
    auto& pool = routed[static_cast<std::size_t>(e)];
    if (pool.empty()) {
      bank.warnings.push_back("expert " + std::to_string(e) +
                              ": no routed tasks, kept at base initialization");
      continue;
    }
    if (ft.steps > 0) bank.experts[static_cast<std::size_t>(e)].trained = true;

    // wire the expert arrays into a task network copy
    models::Trunk t = base.backbone;
    models::LinearHead h = base.head;
    ExpertScope sc = scope;
    auto slots = detail::scope_slots(t, h, sc);
    auto& items = bank.experts[static_cast<std::size_t>(e)].params.items;
    std::vector<Var> tuned;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      *slots[i].second = items[i].second;
      tuned.push_back(items[i].second);
    }

    SgdOptimizer opt(ft.lr);
    for (int s = 0; s < ft.steps; ++s) {
      const Task& task = *pool[static_cast<std::size_t>(s) % pool.size()];
      std::vector<episodes::LabeledSample> all = task.support;
      all.insert(all.end(), task.query.begin(), task.query.end());
      Var logits = metalearn::net_logits(t, h, Var::constant(metalearn::detail::stack_inputs(all)));
      Var loss = cross_entropy_mean(logits, metalearn::detail::labels_of(all));
      if (!std::isfinite(loss.value().item()))
        throw NumericalError("build_expert_bank: non-finite fine-tune loss");
      std::vector<Var> grads = grad_all(loss, tuned);
      std::vector<Tensor> gvals;
      for (auto& g : grads) gvals.push_back(g.value());
      opt.step(tuned, gvals);
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// parameter accounting (memory story of the expert-bank family)

struct ParamAccounting {
  long base_params = 0;    // N: task-network (trunk + head) parameter count
  long per_expert = 0;     // n: stored parameters per expert
  long total_stored = 0;   // N + M*n
  double adapted_fraction = 0.0;  // n / N
  int experts = 0;
};

/** Exhaustive array-size enumeration over the bank's stored parameters. */
inline ParamAccounting account_parameters(const ExpertBank& bank) {
  ParamAccounting acc;
  models::ParamList base_list;
  bank.base.backbone.collect(base_list, "backbone.");
  bank.base.head.collect(base_list, "head.");
  acc.base_params = base_list.total_size();
  acc.experts = bank.expert_count();
  long expert_total = 0;
  for (const auto& e : bank.experts) {
    long n = e.params.total_size();
    expert_total += n;
    acc.per_expert = n;  // all experts share one scope, hence one size
  }
  acc.total_stored = acc.base_params + expert_total;
  acc.adapted_fraction = acc.base_params > 0 ? double(acc.per_expert) / double(acc.base_params) : 0.0;
  return acc;
}

/** Adapter that routes each task to its expert and adapts from that expert. */
inline metalearn::TaskAdapter make_bank_adapter(const ExpertBank& bank, RouteMode mode,
                                                const EmbedFn& embed_fn,
                                                metalearn::AdaptState eval_state) {
  eval_state.zero_head_init = false;  // experts carry the domain-specific head
  return [&bank, mode, embed_fn, eval_state](const Task& task) {
    int e = route_task(task, bank, mode, embed_fn);
    auto [trunk, head] = bank.merged(e);
    auto adapted = metalearn::inner_adapt(trunk, head, nullptr, task.support, eval_state);
    return metalearn::predict_query(adapted.trunk, adapted.head, task, nullptr);
  };
}

}  // namespace taskcl::routing
