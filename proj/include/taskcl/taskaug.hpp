#pragma once

#include <algorithm>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "taskcl/episodes.hpp"

namespace taskcl::taskaug {

using episodes::Task;
using episodes::TaskBatch;

enum class TransformKind { HorizontalFlip, RandomCrop, BrightnessJitter };

struct TransformSpec {
  TransformKind kind;
  int pad = 2;          // RandomCrop
  double amount = 0.2;  // BrightnessJitter
};

// Conservative subset of the SimCLR family, for 28x28 single-channel inputs.
inline std::vector<TransformSpec> default_transform_family() {
  return {{TransformKind::HorizontalFlip}, {TransformKind::RandomCrop, 2},
          {TransformKind::BrightnessJitter, 2, 0.2}};
}

struct AugmentSpec {
  bool use_relabel = false;
  bool use_instance = false;
  bool use_mix = false;
  std::vector<TransformSpec> transforms = default_transform_family();
  bool augment_query = false;
  int mix_count = -1;  // -1 resolves to the maximum feasible M = N*min(K,q)

  bool none() const { return !use_relabel && !use_instance && !use_mix; }

  int resolve_mix_count(const Task& t) const {
    if (mix_count >= 0) return mix_count;
    return t.ways * std::min(t.shots, t.query_per_class);
  }

  // Strategy names follow the ablation row labels:
  // none, relabel, instance, mix, mix+relabel, mix+instance, relabel+mix+instance.
  static AugmentSpec parse(const std::string& name) {
    AugmentSpec s;
    if (name == "none" || name.empty()) return s;
    std::stringstream ss(name);
    std::string tok;
    while (std::getline(ss, tok, '+')) {
      if (tok == "relabel")
        s.use_relabel = true;
      else if (tok == "instance")
        s.use_instance = true;
      else if (tok == "mix")
        s.use_mix = true;
      else
        throw ConfigError("AugmentSpec: unknown strategy token '" + tok + "'");
    }
    return s;
  }

  std::string canonical_name() const {
    if (none()) return "none";
    std::vector<std::string> parts;
    if (use_relabel && use_mix && use_instance) return "relabel+mix+instance";
    if (use_mix) parts.push_back("mix");
    if (use_relabel) parts.push_back("relabel");
    if (use_instance) parts.push_back("instance");
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "+" : "") + parts[i];
    return out;
  }
};

inline const std::vector<std::string>& all_strategies() {
  static const std::vector<std::string> names = {
      "none", "relabel", "mix", "instance", "mix+relabel", "mix+instance", "relabel+mix+instance"};
  return names;
}

struct AugmentedBatch {
  std::vector<Task> views;  // pairs at (2k, 2k+1)

  std::size_t pair_count() const { return views.size() / 2; }

  void validate() const {
    if (views.empty() || views.size() % 2 != 0)
      throw ConfigError("AugmentedBatch: view count must be even and nonzero");
    for (std::size_t k = 0; k < views.size(); k += 2)
      if (views[k].origin_id != views[k + 1].origin_id)
        throw ConfigError("AugmentedBatch: pair does not share an origin id");
  }
};

// ---------------------------------------------------------------------------
// relabeling (label permutation applied to S and Q)

inline Task relabel(const Task& task, const std::vector<int>& permutation) {
  if (static_cast<int>(permutation.size()) != task.ways)
    throw ConfigError("relabel: permutation size != ways");
  std::vector<bool> hit(permutation.size(), false);
  for (int v : permutation) {
    if (v < 0 || v >= task.ways || hit[static_cast<std::size_t>(v)])
      throw ConfigError("relabel: map is not a bijection on the label set");
    hit[static_cast<std::size_t>(v)] = true;
  }
  Task out = task;
  for (auto& ls : out.support) ls.label = permutation[static_cast<std::size_t>(ls.label)];
  for (auto& ls : out.query) ls.label = permutation[static_cast<std::size_t>(ls.label)];
  return out;
}

inline std::vector<int> inverse_permutation(const std::vector<int>& p) {
  std::vector<int> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[static_cast<std::size_t>(p[i])] = static_cast<int>(i);
  return inv;
}

// ---------------------------------------------------------------------------
// instance augmentation (one operator drawn per call, SimCLR style)

namespace detail {

struct TransformDraw {
  bool flip = false;
  int dx = 0, dy = 0;  // crop offsets in the padded frame; pad == dx == dy is identity
  int pad = 0;
  double brightness = 0.0;
};

inline std::vector<TransformDraw> draw_operator(const std::vector<TransformSpec>& family, Rng& rng) {
  std::vector<TransformDraw> draws;
  for (const TransformSpec& t : family) {
    TransformDraw d;
    switch (t.kind) {
      case TransformKind::HorizontalFlip:
        d.flip = rng.uniform() < 0.5;
        break;
      case TransformKind::RandomCrop:
        d.pad = t.pad;
        d.dx = rng.uniform_int(2 * t.pad + 1);
        d.dy = rng.uniform_int(2 * t.pad + 1);
        break;
      case TransformKind::BrightnessJitter:
        d.brightness = rng.uniform(-t.amount, t.amount);
        break;
    }
    draws.push_back(d);
  }
  return draws;
}

inline Tensor apply_draw(const Tensor& img, const std::vector<TransformSpec>& family,
                         const std::vector<TransformDraw>& draws) {
  if (img.rank() != 3)
    throw ConfigError("instance_augment: image transforms need [C,H,W] samples");
  Tensor out = img;
  int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  for (std::size_t i = 0; i < family.size(); ++i) {
    const TransformDraw& d = draws[i];
    switch (family[i].kind) {
      case TransformKind::HorizontalFlip:
        if (d.flip) {
          Tensor t = out;
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
              for (int x = 0; x < W; ++x)
                out[(static_cast<long>(c) * H + y) * W + x] =
                    t[(static_cast<long>(c) * H + y) * W + (W - 1 - x)];
        }
        break;
      case TransformKind::RandomCrop: {
        Tensor t = out;
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
              int sy = y + d.dy - d.pad;
              int sx = x + d.dx - d.pad;
              out[(static_cast<long>(c) * H + y) * W + x] =
                  (sy >= 0 && sy < H && sx >= 0 && sx < W)
                      ? t[(static_cast<long>(c) * H + sy) * W + sx]
                      : 0.0;
            }
        break;
      }
      case TransformKind::BrightnessJitter:
        for (long j = 0; j < out.size(); ++j)
          out[j] = std::clamp(out[j] + d.brightness, 0.0, 1.0);
        break;
    }
  }
  return out;
}

}  // namespace detail

/**
 * Replaces support samples by t(x) for a single operator t drawn from the
 * family; labels untouched. The query set is transformed with the same draw
 * only when spec.augment_query is set.
 */
inline Task instance_augment(const Task& task, const AugmentSpec& spec, std::uint64_t seed) {
  Task out = task;
  if (spec.transforms.empty()) return out;
  Rng rng(derive_seed(seed, "instance-op"));
  auto draws = detail::draw_operator(spec.transforms, rng);
  for (auto& ls : out.support) ls.sample.data = detail::apply_draw(ls.sample.data, spec.transforms, draws);
  if (spec.augment_query)
    for (auto& ls : out.query) ls.sample.data = detail::apply_draw(ls.sample.data, spec.transforms, draws);
  return out;
}

// ---------------------------------------------------------------------------
// mixing (support/query exchange)

/**
 * Exchanges m = M/N same-class samples between the support and query sets of
 * each class. The swapped-in query samples leave the query view, and the
 * displaced support samples take their slots, so (N,K,q), class balance and
 * support/query disjointness are preserved exactly.
 */
inline Task mix(const Task& task, int M, std::uint64_t seed) {
  if (M < 0) throw ConfigError("mix: M must be nonnegative");
  int cap = std::min(static_cast<int>(task.support.size()), static_cast<int>(task.query.size()));
  if (M > cap) throw ConfigError("mix: M exceeds min(|S|,|Q|)");
  if (M % task.ways != 0) throw ConfigError("mix: M must be divisible by the way count");
  int m = M / task.ways;
  if (m > std::min(task.shots, task.query_per_class))
    throw ConfigError("mix: per-class substitution exceeds availability");

  Task out = task;
  if (m == 0) return out;
  Rng rng(derive_seed(seed, "mix-op"));
  for (int cls = 0; cls < task.ways; ++cls) {
    std::vector<int> sup_slots, qry_slots;
    for (std::size_t i = 0; i < out.support.size(); ++i)
      if (out.support[i].label == cls) sup_slots.push_back(static_cast<int>(i));
    for (std::size_t i = 0; i < out.query.size(); ++i)
      if (out.query[i].label == cls) qry_slots.push_back(static_cast<int>(i));
    std::vector<int> s_pick = rng.sample_without_replacement(static_cast<int>(sup_slots.size()), m);
    std::vector<int> q_pick = rng.sample_without_replacement(static_cast<int>(qry_slots.size()), m);
    for (int j = 0; j < m; ++j) {
      auto& s = out.support[static_cast<std::size_t>(sup_slots[static_cast<std::size_t>(s_pick[j])])];
      auto& q = out.query[static_cast<std::size_t>(qry_slots[static_cast<std::size_t>(q_pick[j])])];
      std::swap(s.sample, q.sample);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// contrastive batch construction

namespace detail {

inline Task compose_view(const Task& task, const AugmentSpec& spec, std::uint64_t view_seed) {
  Task v = task;
  if (spec.use_mix) v = mix(v, spec.resolve_mix_count(v), derive_seed(view_seed, "mix"));
  if (spec.use_relabel) {
    Rng rng(derive_seed(view_seed, "relabel"));
    std::vector<int> perm(static_cast<std::size_t>(v.ways));
    for (int i = 0; i < v.ways; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    v = relabel(v, perm);
  }
  if (spec.use_instance) v = instance_augment(v, spec, derive_seed(view_seed, "instance"));
  return v;
}

}  // namespace detail

/**
 * Two independently augmented views per task; pairs sit at (2k, 2k+1).
 * Composition order: mix, then relabel, then instance augmentation.
 */
inline AugmentedBatch make_contrastive_batch(const TaskBatch& batch, const AugmentSpec& spec,
                                             std::uint64_t seed) {
  if (batch.tasks.empty()) throw ConfigError("make_contrastive_batch: empty batch");
  AugmentedBatch out;
  for (std::size_t k = 0; k < batch.tasks.size(); ++k) {
    for (int view = 0; view < 2; ++view) {
      std::uint64_t vs = derive_seed(seed, "view", 2 * k + static_cast<std::uint64_t>(view));
      out.views.push_back(spec.none() ? batch.tasks[k]
                                      : detail::compose_view(batch.tasks[k], spec, vs));
    }
  }
  out.validate();
  return out;
}

}  // namespace taskcl::taskaug
