// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one [PASS]/[FAIL] line per criterion. Exit code = failure count.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "taskcl/cli.hpp"
#include "taskcl/experiments.hpp"

using namespace taskcl;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %d: %s  (%s)\n", ok ? "PASS" : "FAIL", criterion, name.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double now_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

Tensor random_rows(int n, int d, std::uint64_t seed) {
  Rng r(seed);
  return Tensor::randn({n, d}, r);
}

// Independent double-loop oracle of the paired contrastive loss.
double brute_force_pair_loss(const Tensor& z, double tau) {
  int n = z.dim(0), d = z.dim(1);
  auto cos = [&z, d](int i, int j) {
    double dot = 0, ni = 0, nj = 0;
    for (int k = 0; k < d; ++k) {
      dot += z.at(i, k) * z.at(j, k);
      ni += z.at(i, k) * z.at(i, k);
      nj += z.at(j, k) * z.at(j, k);
    }
    return dot / (std::sqrt(ni) * std::sqrt(nj));
  };
  auto term = [&](int i, int j) {
    double denom = 0.0;
    for (int k = 0; k < n; ++k)
      if (k != i) denom += std::exp(cos(i, k) / tau);
    return -std::log(std::exp(cos(i, j) / tau) / denom);
  };
  double total = 0.0;
  for (int k = 0; k < n / 2; ++k) total += term(2 * k, 2 * k + 1) + term(2 * k + 1, 2 * k);
  return total / n;
}

// ---------------------------------------------------------------------------
// criterion 1: gradient correctness of every contrastive objective

void criterion_1() {
  double t0 = now_seconds();
  double worst = 0.0;
  std::string worst_name = "-";
  auto track = [&worst, &worst_name](const std::string& name, double err) {
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  };

  auto fd_on_matrix = [](const std::function<Var(const Var&)>& f, const Tensor& x0, int probes) {
    auto loss = [&f, &x0](const std::vector<double>& p) {
      NoGradScope ng;
      return f(Var::constant(Tensor::from(x0.shape(), p))).value().item();
    };
    auto grad = [&f, &x0](const std::vector<double>& p) {
      Var v = Var::leaf(Tensor::from(x0.shape(), p));
      return grad_of(f(v), v).raw();
    };
    return evalkit::finite_difference_check(loss, grad, x0.raw(), probes, 1e-4);
  };

  Tensor z = random_rows(10, 6, 2001);
  track("nt_xent", fd_on_matrix([](const Var& v) { return losses::nt_xent(3, 2, v, 0.5); }, z, 100));
  track("task_contrastive_loss",
        fd_on_matrix([](const Var& v) { return losses::task_contrastive_loss(v, 0.5); }, z, 100));

  std::vector<int> labels = {0, 1, 0, 1, 2, 2, 0, 1, 2, 0};
  track("supervised_task_contrastive_loss",
        fd_on_matrix([&labels](const Var& v) {
          return losses::supervised_task_contrastive_loss(v, labels, 0.5);
        }, z, 100));

  // clustering loss: probe both the embeddings and the cluster-head parameters
  {
    losses::LossConfig cfg;
    cfg.temperature = 0.5;
    cfg.cluster_count = 3;
    Rng hr(2002);
    losses::ClusterHead head = losses::ClusterHead::init(6, 3, hr);
    track("contrastive_clustering_loss (dZ)",
          fd_on_matrix([&head, &cfg](const Var& v) {
            return losses::contrastive_clustering_loss(v, head, cfg).total;
          }, z, 100));

    Var zc = Var::constant(z);
    long wn = head.w.value().size();
    std::vector<double> flat = head.w.value().raw();
    flat.insert(flat.end(), head.b.value().raw().begin(), head.b.value().raw().end());
    auto rebuild = [&head, wn](const std::vector<double>& p) {
      losses::ClusterHead h = head;
      h.w = Var::leaf(Tensor::from(head.w.value().shape(),
                                   std::vector<double>(p.begin(), p.begin() + wn)));
      h.b = Var::leaf(Tensor::from(head.b.value().shape(),
                                   std::vector<double>(p.begin() + wn, p.end())));
      return h;
    };
    auto loss = [&zc, &cfg, &rebuild](const std::vector<double>& p) {
      NoGradScope ng;
      return losses::contrastive_clustering_loss(zc, rebuild(p), cfg).total.value().item();
    };
    auto grad = [&zc, &cfg, &rebuild](const std::vector<double>& p) {
      losses::ClusterHead h = rebuild(p);
      Var total = losses::contrastive_clustering_loss(zc, h, cfg).total;
      auto grads = grad_all(total, {h.w, h.b});
      std::vector<double> out = grads[0].value().raw();
      out.insert(out.end(), grads[1].value().raw().begin(), grads[1].value().raw().end());
      return out;
    };
    track("contrastive_clustering_loss (dhead)",
          evalkit::finite_difference_check(loss, grad, flat, 100, 1e-4));
  }

  double elapsed = now_seconds() - t0;
  std::ostringstream os;
  os << "max rel err " << worst << " at " << worst_name << ", " << elapsed << "s";
  report(1, "loss gradients match central finite differences (< 1e-4)",
         worst < 1e-4 && elapsed < 120.0, os.str());
}

// ---------------------------------------------------------------------------
// criterion 2: brute-force oracle equivalence

void criterion_2() {
  NoGradScope ng;
  double worst = 0.0;
  for (int n : {8, 10, 12, 14, 16}) {
    Tensor z = random_rows(n, 6, static_cast<std::uint64_t>(3000 + n));
    double ours = losses::task_contrastive_loss(Var::constant(z), 0.5).value().item();
    worst = std::max(worst, std::abs(ours - brute_force_pair_loss(z, 0.5)));
  }

  Tensor ortho = Tensor::from({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  double per_term = losses::nt_xent(0, 1, Var::constant(ortho), 1.0).value().item();
  double avg = losses::task_contrastive_loss(Var::constant(ortho), 1.0).value().item();

  bool ok = worst < 1e-10 && std::abs(per_term - expect) < 1e-12 && std::abs(avg - expect) < 1e-12 &&
            std::abs(expect - 0.5514) < 5e-5;
  std::ostringstream os;
  os << "max |diff| " << worst << ", orthogonal-pair term " << per_term;
  report(2, "task contrastive loss equals the double-loop oracle (1e-10)", ok, os.str());
}

// ---------------------------------------------------------------------------
// criterion 3: augmentation invariants, 1000 seeded tasks per strategy

void criterion_3() {
  episodes::DomainConfig dc;
  dc.kind = "synthetic-image";
  dc.name = "tex";
  dc.texture = "stripes";
  dc.class_count = 7;
  dc.image_size = 16;  // small canvas keeps the 7000-task sweep quick
  auto dom = episodes::build_domain(dc, 404);

  long violations = 0;
  int ways = 4, shots = 2, qpc = 3;
  for (const std::string& strategy : taskaug::all_strategies()) {
    taskaug::AugmentSpec spec = taskaug::AugmentSpec::parse(strategy);
    for (int s = 0; s < 1000; ++s) {
      episodes::Task t =
          episodes::sample_episode(dom, ways, shots, qpc, derive_seed(505, strategy, s));
      episodes::TaskBatch b;
      b.tasks = {t};
      auto views = taskaug::make_contrastive_batch(b, spec, static_cast<std::uint64_t>(s)).views;
      for (const auto& v : views) {
        if (v.ways != ways || v.shots != shots || v.query_per_class != qpc) ++violations;
        try {
          episodes::validate_task(v);  // class balance, label set, id disjointness
        } catch (const std::exception&) {
          ++violations;
        }
      }
    }
  }

  // relabel round trip, mix identity, exact per-class substitution counts
  for (int s = 0; s < 1000; ++s) {
    episodes::Task t = episodes::sample_episode(dom, ways, shots, qpc, derive_seed(606, "ops", s));
    Rng rng(derive_seed(707, "perm", s));
    std::vector<int> perm(static_cast<std::size_t>(ways));
    for (int i = 0; i < ways; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    if (!episodes::tasks_identical(
            taskaug::relabel(taskaug::relabel(t, perm), taskaug::inverse_permutation(perm)), t))
      ++violations;
    if (!episodes::tasks_identical(taskaug::mix(t, 0, s), t)) ++violations;

    int m = 2;  // M = N*m substitutions, m per class
    episodes::Task mixed = taskaug::mix(t, ways * m, derive_seed(808, "mix", s));
    std::set<std::uint64_t> orig;
    for (const auto& ls : t.support) orig.insert(ls.sample.id);
    std::map<int, int> replaced;
    for (const auto& ls : mixed.support)
      if (!orig.count(ls.sample.id)) replaced[ls.label]++;
    for (int c = 0; c < ways; ++c)
      if (replaced[c] != m) ++violations;
  }

  std::ostringstream os;
  os << violations << " violations over 7x1000 strategy tasks + 1000 op checks";
  report(3, "augmentation invariants hold with zero violations", violations == 0, os.str());
}

// ---------------------------------------------------------------------------
// criteria 4 + 5: the synthetic-image ablation and embedding routing

config::ExperimentConfig image_experiment_config() {
  config::ExperimentConfig cfg;
  cfg.method = "maml";
  cfg.seed = 31337;
  cfg.train.ways = 5;
  cfg.train.shots = 1;
  cfg.train.query_per_class = 15;
  cfg.train.batch_size = 8;
  cfg.train.steps = 400;  // <= 2000 budget
  cfg.train.outer_lr = 1e-3;
  cfg.train.outer_opt = "adam";
  cfg.train.inner_lr = 0.5;
  cfg.train.inner_steps = 1;
  cfg.train.loss.temperature = 0.5;
  cfg.train.seed = cfg.seed;
  cfg.embed_dim = 64;
  cfg.conv_channels = 32;
  cfg.conv_blocks = 4;
  const char* tex[3] = {"stripes", "checker", "blobs"};
  for (int i = 0; i < 3; ++i) {
    episodes::DomainConfig d;
    d.kind = "synthetic-image";
    d.name = tex[i];
    d.texture = tex[i];
    d.class_count = 8;
    d.image_noise = 0.06;
    cfg.domain_configs.push_back(d);
  }
  return cfg;
}

void criteria_4_5() {
  double t0 = now_seconds();
  config::ExperimentConfig cfg = image_experiment_config();
  auto mixture = config::build_mixture(cfg);

  auto outcome = experiments::run_ablation(cfg, {"none", "instance", "mix"}, 60, 60);
  double db_none = 0, db_inst = 0, db_mix = 0, pr_none = 0, pr_inst = 0, pr_mix = 0;
  for (const auto& r : outcome.rows) {
    if (r.strategy == "none") db_none = r.db, pr_none = r.probe;
    if (r.strategy == "instance") db_inst = r.db, pr_inst = r.probe;
    if (r.strategy == "mix") db_mix = r.db, pr_mix = r.probe;
  }

  // untrained-encoder baseline probe (embedding-quality floor)
  metalearn::ModelSpec fresh_spec = config::build_model_spec(cfg, metalearn::Method::parse("maml"));
  metalearn::Model fresh = metalearn::Model::init(fresh_spec, cfg.seed);
  metalearn::AdaptState st;
  auto fresh_dump = experiments::embed_dump(fresh, mixture, 60, 5, 1, 15,
                                            metalearn::EmbeddingMode::SetEncoder, st,
                                            derive_seed(cfg.seed, "fresh-dump"));
  double pr_fresh = evalkit::linear_probe(fresh_dump.points, fresh_dump.domains,
                                          derive_seed(cfg.seed, "fresh-probe"));

  double elapsed = now_seconds() - t0;
  bool db_order = db_mix < db_inst && db_inst < db_none;
  bool probe_order = pr_mix > pr_inst && pr_inst > pr_none;
  bool ok4 = db_order && probe_order && pr_mix >= 0.95 && pr_mix >= pr_fresh && elapsed < 900.0;
  {
    std::ostringstream os;
    os << "DB " << db_mix << " < " << db_inst << " < " << db_none << "; probe " << pr_mix << " > "
       << pr_inst << " > " << pr_none << " (untrained " << pr_fresh << "); " << int(elapsed) << "s";
    report(4, "directional ablation orderings on the synthetic-image setup", ok4, os.str());
  }

  // --- criterion 5: routing on the mixing-trained encoder ---
  const metalearn::Model& model = outcome.models.at("mix");
  const experiments::EmbeddingDump& fit_dump = outcome.dumps.at("mix");
  auto router = routing::fit_task_clusters(fit_dump.points, 3, derive_seed(cfg.seed, "router"),
                                           routing::ClusterSpace::Embedding);

  routing::EmbedFn embed = [&model, st](const episodes::Task& t) {
    return metalearn::embed_task(model, t, metalearn::EmbeddingMode::SetEncoder, st).raw();
  };
  routing::FineTuneSpec ft;
  ft.steps = 0;
  ft.embed_fn = embed;
  auto bank = routing::build_expert_bank(model, router, routing::ExpertScope::parse("head"), ft);

  long adapt_before = metalearn::inner_adapt_calls();
  std::vector<int> assigned, truth;
  bool oracle_ok = true;
  for (int i = 0; i < 200; ++i) {
    std::uint64_t es = derive_seed(cfg.seed, "route-eval", static_cast<std::uint64_t>(i));
    Rng rng(es);
    int which = rng.pick_weighted(mixture.weights);
    episodes::Task task = episodes::sample_episode(mixture.domains[static_cast<std::size_t>(which)],
                                                   5, 1, 15, rng.next_u64());
    int expert = routing::route_task(task, bank, routing::RouteMode::Embedding, embed);
    // independent brute-force nearest-center oracle
    std::vector<double> z = embed(task);
    int best = 0;
    double bd = 1e300;
    for (int c = 0; c < router.k(); ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < z.size(); ++j)
        d += (z[j] - router.centers[static_cast<std::size_t>(c)][j]) *
             (z[j] - router.centers[static_cast<std::size_t>(c)][j]);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    if (expert != best) oracle_ok = false;
    assigned.push_back(expert);
    truth.push_back(task.domain_id());
  }
  bool no_adaptation = metalearn::inner_adapt_calls() == adapt_before;
  double match = routing::cluster_match_accuracy(assigned, truth, 3);
  bool ok5 = match >= 0.95 && oracle_ok && no_adaptation;
  std::ostringstream os;
  os << "routing accuracy " << match << ", oracle match " << (oracle_ok ? "exact" : "BROKEN")
     << ", adaptation calls during routing: " << (no_adaptation ? "0" : ">0");
  report(5, "embedding-mode routing: accuracy >= 0.95, oracle-exact, no gradient steps", ok5,
         os.str());
}

// ---------------------------------------------------------------------------
// criterion 6: parameter accounting

void criterion_6() {
  // vector-backbone bank: exact N + M*N and N + M*n counts
  metalearn::ModelSpec ms;
  ms.input = models::InputKind::Vector;
  ms.input_dim = 6;
  ms.mlp_hidden = 16;
  ms.ways = 3;
  ms.embed_dim = 12;
  metalearn::Model base = metalearn::Model::init(ms, 99);

  episodes::DomainConfig dc;
  dc.kind = "synthetic-gaussian";
  dc.name = "acc";
  dc.class_count = 6;
  dc.dim = 6;
  auto dom = episodes::build_domain(dc, 5);
  metalearn::AdaptState st;
  std::vector<episodes::Task> pool;
  evalkit::PointSet pts;
  for (int i = 0; i < 9; ++i) {
    pool.push_back(episodes::sample_episode(dom, 3, 2, 3, static_cast<std::uint64_t>(900 + i)));
    pts.push_back(
        metalearn::embed_task(base, pool.back(), metalearn::EmbeddingMode::SetEncoder, st).raw());
  }
  auto router = routing::fit_task_clusters(pts, 3, 11);
  routing::FineTuneSpec ft;
  ft.tasks = pool;
  ft.steps = 0;
  ft.embed_fn = [&base, st](const episodes::Task& t) {
    return metalearn::embed_task(base, t, metalearn::EmbeddingMode::SetEncoder, st).raw();
  };

  long N = 6 * 16 + 16 + 16 * 16 + 16 + 16 * 3 + 3;  // hand-summed mlp trunk + head
  long n_head = 16 * 3 + 3;
  auto acc_full = routing::account_parameters(
      routing::build_expert_bank(base, router, routing::ExpertScope::parse("full"), ft));
  auto acc_head = routing::account_parameters(
      routing::build_expert_bank(base, router, routing::ExpertScope::parse("head"), ft));
  bool vec_ok = acc_full.base_params == N && acc_full.total_stored == N + 3 * N &&
                acc_full.adapted_fraction == 1.0 && acc_head.total_stored == N + 3 * n_head &&
                acc_head.per_expert == n_head && n_head < N;

  // conv4 backbone: hand-derived head-scope fraction and tail accounting
  metalearn::ModelSpec imspec;
  imspec.input = models::InputKind::Image;
  imspec.conv_channels = 32;
  imspec.conv_blocks = 4;
  imspec.ways = 5;
  imspec.embed_dim = 64;
  metalearn::Model conv_base = metalearn::Model::init(imspec, 7);
  long conv_N = (32 * 1 * 9 + 32) + 3 * (32 * 32 * 9 + 32) + (32 * 5 + 5);
  long conv_head = 32 * 5 + 5;
  long conv_tail3 = (32 * 32 * 9 + 32) + conv_head;  // last block + head

  routing::ExpertBank dummy;
  dummy.base = conv_base;
  dummy.scope = routing::ExpertScope::parse("head");
  dummy.router = router;
  for (int e = 0; e < 3; ++e) {
    models::Trunk t = conv_base.backbone;
    models::LinearHead h = conv_base.head;
    routing::Expert ex;
    for (auto& [name, slot] : routing::detail::scope_slots(t, h, dummy.scope))
      ex.params.add(name, Var::leaf(slot->value()));
    dummy.experts.push_back(std::move(ex));
  }
  auto acc_conv = routing::account_parameters(dummy);

  routing::ExpertBank tail;
  tail.base = conv_base;
  tail.scope = routing::ExpertScope::parse("tail3");
  tail.router = router;
  {
    models::Trunk t = conv_base.backbone;
    models::LinearHead h = conv_base.head;
    routing::Expert ex;
    for (auto& [name, slot] : routing::detail::scope_slots(t, h, tail.scope))
      ex.params.add(name, Var::leaf(slot->value()));
    tail.experts.push_back(std::move(ex));
  }
  auto acc_tail = routing::account_parameters(tail);

  bool conv_ok = acc_conv.base_params == conv_N && acc_conv.per_expert == conv_head &&
                 acc_conv.adapted_fraction == double(conv_head) / double(conv_N) &&
                 acc_tail.per_expert == conv_tail3;

  std::ostringstream os;
  os << "mlp: N=" << N << " full=" << acc_full.total_stored << " head=" << acc_head.total_stored
     << "; conv4: N=" << conv_N << " head fraction " << acc_conv.adapted_fraction << " tail3 n="
     << acc_tail.per_expert;
  report(6, "expert banks store exactly N + M*N (full) and N + M*n (head), hand-verified",
         vec_ok && conv_ok, os.str());
}

// ---------------------------------------------------------------------------
// criterion 7: entropy term prevents cluster collapse

void criterion_7() {
  auto without = experiments::collapse_experiment(0.0, 2024);
  auto with = experiments::collapse_experiment(1.0, 2024);
  bool ok = without.final_max_share > 0.9 && with.final_max_share < 0.6;
  std::ostringstream os;
  os << "max marginal share: weight 0 -> " << without.final_max_share << ", weight 1 -> "
     << with.final_max_share << " (initial " << without.initial_max_share << ")";
  report(7, "collapse control: entropy weight 0 stays > 0.9, weight 1 stays < 0.6", ok, os.str());
}

// ---------------------------------------------------------------------------
// criterion 8: contrastive benefit for MMAML, matched seeds and budgets

config::ExperimentConfig mmaml_config(const std::string& method, std::uint64_t seed) {
  config::ExperimentConfig cfg;
  cfg.method = method;
  cfg.seed = seed;
  cfg.train.ways = 5;
  cfg.train.shots = 1;
  cfg.train.query_per_class = 10;
  cfg.train.batch_size = 8;
  cfg.train.steps = 500;
  cfg.train.outer_lr = 3e-3;
  cfg.train.outer_opt = "adam";
  cfg.train.inner_lr = 0.3;
  cfg.train.inner_steps = 2;
  cfg.train.loss.lambda_con = 0.5;
  cfg.train.augment = taskaug::AugmentSpec::parse("mix");
  cfg.train.seed = seed;
  cfg.eval_episodes = 400;
  cfg.mlp_hidden = 20;
  cfg.embed_dim = 32;
  for (int i = 0; i < 3; ++i) {
    episodes::DomainConfig d;
    d.kind = "synthetic-gaussian";
    d.name = "dom" + std::to_string(i);
    d.class_count = 14;
    d.dim = 16;
    d.sigma = 0.25 + 0.15 * i;
    cfg.domain_configs.push_back(d);
  }
  return cfg;
}

void criterion_8() {
  double t0 = now_seconds();
  std::vector<std::uint64_t> seeds = {20240810, 7, 555};
  double plain = 0, con = 0, sup = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed : seeds) {
    double p = experiments::run_experiment(mmaml_config("mmaml", seed)).accuracy.overall.mean;
    double c =
        experiments::run_experiment(mmaml_config("mmaml-contrastive", seed)).accuracy.overall.mean;
    double s =
        experiments::run_experiment(mmaml_config("mmaml-supervised", seed)).accuracy.overall.mean;
    plain += p;
    con += c;
    sup += s;
    per_seed << " [seed " << seed << ": " << p << "/" << c << "/" << s << "]";
  }
  plain /= seeds.size();
  con /= seeds.size();
  sup /= seeds.size();
  double elapsed = now_seconds() - t0;
  bool ok = con >= plain && con >= sup - 0.02 && elapsed < 1800.0;
  std::ostringstream os;
  os << "mean acc plain " << plain << ", contrastive " << con << ", supervised " << sup << ";"
     << per_seed.str() << "; " << int(elapsed) << "s";
  report(8, "contrastive MMAML >= plain, within 2 points of supervised", ok, os.str());
}

// ---------------------------------------------------------------------------
// criterion 9: determinism and persistence

void criterion_9() {
  fs::path dir = fs::temp_directory_path() / "taskcl_acceptance_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::path cfg_path = dir / "exp.ini";
  {
    std::ofstream out(cfg_path);
    out << "[experiment]\nmethod = mmaml-contrastive\nseed = 11\nout = " << (dir / "a").string()
        << "\n[episode]\nways = 3\nshots = 2\nquery = 3\n"
        << "[train]\nsteps = 6\nbatch = 3\nouter_lr = 0.005\ninner_lr = 0.2\ninner_steps = 1\n"
        << "lambda = 1.0\n[augment]\nstrategy = mix\n[model]\nmlp_hidden = 16\nembed_dim = 12\n"
        << "[eval]\nepisodes = 12\n"
        << "[domain.a]\nkind = synthetic-gaussian\nclasses = 6\ndim = 5\nsigma = 0.1\n"
        << "[domain.b]\nkind = synthetic-gaussian\nclasses = 6\ndim = 5\nsigma = 0.2\n"
        << "[domain.c]\nkind = synthetic-gaussian\nclasses = 6\ndim = 5\nsigma = 0.4\n";
  }
  cli::CommonArgs run_a{cfg_path.string(), std::nullopt, std::nullopt};
  cli::CommonArgs run_b{cfg_path.string(), std::nullopt, (dir / "b").string()};
  bool exit_ok = cli::cmd_train(run_a) == 0 && cli::cmd_train(run_b) == 0;
  bool logs_equal = exit_ok && io::read_text((dir / "a" / "train_log.jsonl").string()) ==
                                   io::read_text((dir / "b" / "train_log.jsonl").string());
  bool metrics_equal = exit_ok && io::read_text((dir / "a" / "metrics.json").string()) ==
                                      io::read_text((dir / "b" / "metrics.json").string());

  // checkpoint round trip preserves evaluation output exactly
  bool ckpt_ok = false;
  if (exit_ok) {
    auto cfg = config::parse_experiment_file(cfg_path.string());
    cfg.train.seed = cfg.seed;
    auto mixture = config::build_mixture(cfg);
    metalearn::Model loaded = checkpoint::load_model((dir / "a" / "checkpoint").string());
    metalearn::Model loaded2 = checkpoint::load_model((dir / "b" / "checkpoint").string());
    auto adapter1 = metalearn::make_adapter(loaded, metalearn::Method::parse("mmaml"), cfg.train);
    auto adapter2 = metalearn::make_adapter(loaded2, metalearn::Method::parse("mmaml"), cfg.train);
    auto r1 = metalearn::evaluate_few_shot(adapter1, mixture, 12, 3, 2, 3, 77);
    auto r2 = metalearn::evaluate_few_shot(adapter2, mixture, 12, 3, 2, 3, 77);
    ckpt_ok = r1.per_episode == r2.per_episode;

    // and an in-memory save -> load -> evaluate identity
    fs::path again = dir / "again";
    checkpoint::save_model(again.string(), loaded);
    metalearn::Model reloaded = checkpoint::load_model(again.string());
    auto r3 = metalearn::evaluate_few_shot(
        metalearn::make_adapter(reloaded, metalearn::Method::parse("mmaml"), cfg.train), mixture,
        12, 3, 2, 3, 77);
    ckpt_ok = ckpt_ok && r1.per_episode == r3.per_episode;
  }

  bool ok = exit_ok && logs_equal && metrics_equal && ckpt_ok;
  std::ostringstream os;
  os << "logs byte-identical: " << (logs_equal ? "yes" : "no") << ", metrics: "
     << (metrics_equal ? "yes" : "no") << ", checkpoint round trip exact: "
     << (ckpt_ok ? "yes" : "no");
  report(9, "identical seeds reproduce byte-identical logs; checkpoints round-trip exactly", ok,
         os.str());
  fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto want = [&only](int c) { return only.empty() || only.count(c); };

  double t0 = now_seconds();
  if (want(1)) criterion_1();
  if (want(2)) criterion_2();
  if (want(3)) criterion_3();
  if (want(4) || want(5)) criteria_4_5();
  if (want(6)) criterion_6();
  if (want(7)) criterion_7();
  if (want(8)) criterion_8();
  if (want(9)) criterion_9();
  std::printf("acceptance finished in %.0fs with %d failure(s)\n", now_seconds() - t0, g_failures);
  return g_failures;
}
