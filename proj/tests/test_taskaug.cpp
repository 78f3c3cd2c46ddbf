#include <catch2/catch_amalgamated.hpp>
#include <map>
#include <set>

#include "taskcl/taskaug.hpp"

using namespace taskcl;
using namespace taskcl::taskaug;
using episodes::Task;

namespace {

episodes::DomainSpec image_domain(std::uint64_t seed = 3) {
  episodes::DomainConfig c;
  c.kind = "synthetic-image";
  c.name = "tex";
  c.texture = "stripes";
  c.class_count = 7;
  return episodes::build_domain(c, seed);
}

episodes::DomainSpec vec_domain(std::uint64_t seed = 3) {
  episodes::DomainConfig c;
  c.kind = "synthetic-gaussian";
  c.name = "vec";
  c.class_count = 7;
  c.dim = 4;
  return episodes::build_domain(c, seed);
}

std::multiset<std::uint64_t> support_ids(const Task& t) {
  std::multiset<std::uint64_t> ids;
  for (const auto& ls : t.support) ids.insert(ls.sample.id);
  return ids;
}

}  // namespace

TEST_CASE("relabel identity, swap and round trip") {
  Task t = episodes::sample_episode(vec_domain(), 3, 2, 4, 11);

  std::vector<int> identity = {0, 1, 2};
  REQUIRE(episodes::tasks_identical(relabel(t, identity), t));

  Task two = episodes::sample_episode(vec_domain(), 2, 2, 3, 5);
  Task swapped = relabel(two, {1, 0});
  std::multiset<std::uint64_t> class0_before, class1_after;
  for (const auto& ls : two.support)
    if (ls.label == 0) class0_before.insert(ls.sample.id);
  for (const auto& ls : swapped.support)
    if (ls.label == 1) class1_after.insert(ls.sample.id);
  REQUIRE(class0_before == class1_after);

  std::vector<int> p = {2, 0, 1};
  REQUIRE(episodes::tasks_identical(relabel(relabel(t, p), inverse_permutation(p)), t));
}

TEST_CASE("relabel rejects non-bijections") {
  Task t = episodes::sample_episode(vec_domain(), 3, 1, 2, 1);
  REQUIRE_THROWS_AS(relabel(t, {0, 0, 1}), ConfigError);
  REQUIRE_THROWS_AS(relabel(t, {0, 1}), ConfigError);
  REQUIRE_THROWS_AS(relabel(t, {0, 1, 3}), ConfigError);
}

TEST_CASE("instance_augment identity family and query preservation") {
  Task t = episodes::sample_episode(image_domain(), 3, 2, 4, 21);

  AugmentSpec ident;
  ident.transforms.clear();
  REQUIRE(episodes::tasks_identical(instance_augment(t, ident, 9), t));

  AugmentSpec spec;  // default flip+crop+brightness family
  spec.augment_query = false;
  Task a = instance_augment(t, spec, 40);
  // query bytes identical, labels unchanged everywhere
  REQUIRE(a.query.size() == t.query.size());
  for (std::size_t i = 0; i < t.query.size(); ++i)
    REQUIRE(bitwise_equal(a.query[i].sample.data, t.query[i].sample.data));
  bool support_changed = false;
  for (std::size_t i = 0; i < t.support.size(); ++i) {
    REQUIRE(a.support[i].label == t.support[i].label);
    if (!bitwise_equal(a.support[i].sample.data, t.support[i].sample.data)) support_changed = true;
  }
  REQUIRE(support_changed);

  Task b = instance_augment(t, spec, 41);
  bool views_differ = false;
  for (std::size_t i = 0; i < a.support.size(); ++i)
    if (!bitwise_equal(a.support[i].sample.data, b.support[i].sample.data)) views_differ = true;
  REQUIRE(views_differ);

  spec.augment_query = true;
  Task q = instance_augment(t, spec, 40);
  bool query_changed = false;
  for (std::size_t i = 0; i < t.query.size(); ++i)
    if (!bitwise_equal(q.query[i].sample.data, t.query[i].sample.data)) query_changed = true;
  REQUIRE(query_changed);
}

TEST_CASE("instance_augment rejects vector samples") {
  Task t = episodes::sample_episode(vec_domain(), 3, 1, 2, 2);
  AugmentSpec spec;
  REQUIRE_THROWS_AS(instance_augment(t, spec, 1), ConfigError);
}

TEST_CASE("mix per-class substitution rule") {
  // 5-way 1-shot, q=15: M = min(|S|,|Q|) = 5 -> exactly one swap per class
  Task t = episodes::sample_episode(image_domain(), 5, 1, 15, 33);
  Task m = mix(t, 5, 7);
  episodes::validate_task(m);
  std::multiset<std::uint64_t> orig = support_ids(t), mixed = support_ids(m);
  std::size_t kept = 0;
  for (auto id : mixed)
    if (orig.count(id)) ++kept;
  REQUIRE(kept == 0);  // 1-shot with m=1 replaces every support sample

  // m = M/N = 1 of K=3 per class kept
  Task t3 = episodes::sample_episode(image_domain(), 3, 3, 4, 34);
  Task m3 = mix(t3, 3, 8);
  episodes::validate_task(m3);
  std::map<int, int> replaced;
  std::set<std::uint64_t> orig_ids;
  for (const auto& ls : t3.support) orig_ids.insert(ls.sample.id);
  for (const auto& ls : m3.support)
    if (!orig_ids.count(ls.sample.id)) replaced[ls.label]++;
  for (int c = 0; c < 3; ++c) REQUIRE(replaced[c] == 1);
}

TEST_CASE("mix M=0 is the identity and errors are enforced") {
  Task t = episodes::sample_episode(image_domain(), 3, 2, 4, 35);
  REQUIRE(episodes::tasks_identical(mix(t, 0, 1), t));
  REQUIRE_THROWS_AS(mix(t, 4, 1), ConfigError);   // not divisible by N=3
  REQUIRE_THROWS_AS(mix(t, 60, 1), ConfigError);  // exceeds min(|S|,|Q|) = 6
  REQUIRE_THROWS_AS(mix(t, -3, 1), ConfigError);
  // per-class availability: m = 3 > min(K=2, q=4)
  REQUIRE_THROWS_AS(mix(t, 9, 1), ConfigError);
}

TEST_CASE("mix keeps support/query disjoint and swaps preserve the sample pool") {
  Task t = episodes::sample_episode(image_domain(), 4, 2, 5, 36);
  Task m = mix(t, 8, 3);
  episodes::validate_task(m);  // includes disjointness
  std::multiset<std::uint64_t> before, after;
  for (const auto& ls : t.support) before.insert(ls.sample.id);
  for (const auto& ls : t.query) before.insert(ls.sample.id);
  for (const auto& ls : m.support) after.insert(ls.sample.id);
  for (const auto& ls : m.query) after.insert(ls.sample.id);
  REQUIRE(before == after);
}

TEST_CASE("two independent mixes share at most N*(K-m) original support samples") {
  Task t = episodes::sample_episode(image_domain(), 4, 3, 6, 37);
  int m_per_class = 2;
  Task v1 = mix(t, 4 * m_per_class, 71);
  Task v2 = mix(t, 4 * m_per_class, 72);
  std::set<std::uint64_t> orig, s1;
  for (const auto& ls : t.support) orig.insert(ls.sample.id);
  for (const auto& ls : v1.support) s1.insert(ls.sample.id);
  int shared_originals = 0;
  for (const auto& ls : v2.support)
    if (s1.count(ls.sample.id) && orig.count(ls.sample.id)) ++shared_originals;
  REQUIRE(shared_originals <= 4 * (3 - m_per_class));
}

TEST_CASE("make_contrastive_batch shapes and origin pairing") {
  auto mixref = episodes::uniform_mixture({image_domain(1), image_domain(2)});
  auto batch = episodes::sample_task_batch(mixref, 4, 3, 2, 4, 5);

  AugmentSpec spec = AugmentSpec::parse("mix");
  auto aug = make_contrastive_batch(batch, spec, 17);
  REQUIRE(aug.views.size() == 8);
  for (std::size_t k = 0; k < 4; ++k) {
    REQUIRE(aug.views[2 * k].origin_id == batch.tasks[k].origin_id);
    REQUIRE(aug.views[2 * k + 1].origin_id == batch.tasks[k].origin_id);
    episodes::validate_task(aug.views[2 * k]);
  }

  auto none = make_contrastive_batch(batch, AugmentSpec::parse("none"), 17);
  for (std::size_t k = 0; k < 4; ++k) {
    REQUIRE(episodes::tasks_identical(none.views[2 * k], batch.tasks[k]));
    REQUIRE(episodes::tasks_identical(none.views[2 * k + 1], batch.tasks[k]));
  }

  auto mr = make_contrastive_batch(batch, AugmentSpec::parse("mix+relabel"), 18);
  bool samples_changed = false, labels_changed = false;
  const Task& src = batch.tasks[0];
  const Task& view = mr.views[0];
  std::set<std::uint64_t> src_sup;
  for (const auto& ls : src.support) src_sup.insert(ls.sample.id);
  for (const auto& ls : view.support)
    if (!src_sup.count(ls.sample.id)) samples_changed = true;
  std::map<std::uint64_t, int> src_labels;
  for (const auto& ls : src.query) src_labels[ls.sample.id] = ls.label;
  for (const auto& ls : view.query)
    if (src_labels.count(ls.sample.id) && src_labels[ls.sample.id] != ls.label) labels_changed = true;
  REQUIRE(samples_changed);
  REQUIRE(labels_changed);
}

TEST_CASE("augmentations preserve shape, label set and balance over 1000 seeded tasks") {
  auto dom = image_domain(9);
  for (const std::string& strategy : all_strategies()) {
    AugmentSpec spec = AugmentSpec::parse(strategy);
    for (int s = 0; s < 1000 / 7; ++s) {
      Task t = episodes::sample_episode(dom, 4, 2, 3, static_cast<std::uint64_t>(1000 + s));
      episodes::TaskBatch b;
      b.tasks = {t};
      auto aug = make_contrastive_batch(b, spec, static_cast<std::uint64_t>(s));
      for (const Task& v : aug.views) {
        REQUIRE(v.ways == t.ways);
        REQUIRE(v.shots == t.shots);
        REQUIRE(v.query_per_class == t.query_per_class);
        episodes::validate_task(v);
      }
    }
  }
}

TEST_CASE("relabel commutes with instance augmentation under equal seeds") {
  Task t = episodes::sample_episode(image_domain(5), 4, 2, 3, 77);
  AugmentSpec spec;
  std::vector<int> p = {3, 0, 2, 1};
  Task a = relabel(instance_augment(t, spec, 91), p);
  Task b = instance_augment(relabel(t, p), spec, 91);
  REQUIRE(episodes::tasks_identical(a, b));
}

TEST_CASE("strategy parsing matches the ablation row names") {
  for (const std::string& name : all_strategies())
    REQUIRE(AugmentSpec::parse(name).canonical_name() == name);
  REQUIRE_THROWS_AS(AugmentSpec::parse("mix+warp"), ConfigError);
  REQUIRE(AugmentSpec::parse("none").none());
}
