#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "taskcl/experiments.hpp"
#include "taskcl/io.hpp"
#include "taskcl/plot.hpp"

namespace taskcl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct CommonArgs {
  std::string config_path;
  std::optional<long> seed;
  std::optional<std::string> out_dir;
};

namespace detail {

inline config::ExperimentConfig load_config(const CommonArgs& args) {
  if (args.config_path.empty()) throw ConfigError("missing --config PATH");
  config::ExperimentConfig cfg = config::parse_experiment_file(args.config_path);
  if (args.seed) cfg.seed = static_cast<std::uint64_t>(*args.seed);
  if (args.out_dir) cfg.out_dir = *args.out_dir;
  cfg.train.seed = cfg.seed;
  cfg.train.validate();  // reject bad settings before any compute
  return cfg;
}

// Wall-clock data is confined to this sidecar so every other artifact is
// byte-identical across reruns of the same config and seed.
inline void write_sidecar(const std::string& out_dir, const std::string& command) {
  json meta;
  meta["command"] = command;
  meta["finished_unix_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::system_clock::now().time_since_epoch())
                                 .count();
  io::write_text((fs::path(out_dir) / "run_meta.json").string(), meta.dump(2) + "\n");
}

inline std::string log_line(const metalearn::StepReport& r, const std::string& method,
                            std::uint64_t seed) {
  std::ostringstream os;
  os << "{\"step\":" << r.step << ",\"episodic\":" << io::fmt_double(r.episodic)
     << ",\"l_con\":" << io::fmt_double(r.l_con) << ",\"l_clu\":" << io::fmt_double(r.l_clu)
     << ",\"h\":" << io::fmt_double(r.entropy) << ",\"lambda\":" << io::fmt_double(r.lambda)
     << ",\"total\":" << io::fmt_double(r.total) << ",\"method\":\"" << method
     << "\",\"seed\":" << seed << "}";
  return os.str();
}

inline void write_embeddings_csv(const std::string& path, const experiments::EmbeddingDump& dump) {
  io::CsvWriter csv(path);
  if (dump.points.empty()) return;
  std::vector<std::string> header = {"origin_id", "domain_id"};
  for (std::size_t j = 0; j < dump.points[0].size(); ++j) header.push_back("v" + std::to_string(j));
  csv.row(header);
  for (std::size_t i = 0; i < dump.points.size(); ++i) {
    std::vector<std::string> row = {std::to_string(dump.origin_ids[i]),
                                    std::to_string(dump.domains[i])};
    for (double v : dump.points[i]) row.push_back(io::fmt_double(v));
    csv.row(row);
  }
}

inline void write_heatmap(const std::string& dir, const evalkit::HeatmapMatrix& hm,
                          const std::vector<std::string>& domain_names) {
  io::CsvWriter csv((fs::path(dir) / "heatmap.csv").string());
  std::vector<std::string> header = {"cluster"};
  for (const auto& n : domain_names) header.push_back(n);
  header.push_back("empty");
  csv.row(header);
  for (int r = 0; r < hm.clusters(); ++r) {
    std::vector<std::string> row = {std::to_string(r)};
    for (int c = 0; c < hm.domains(); ++c) row.push_back(io::fmt_double(hm.matrix.at(r, c)));
    row.push_back(hm.empty_rows[static_cast<std::size_t>(r)] ? "1" : "0");
    csv.row(row);
  }
  plot::write_ppm((fs::path(dir) / "heatmap.ppm").string(), plot::heatmap_image(hm));
}

inline void write_projection(const std::string& dir,
                             const std::vector<std::array<double, 2>>& proj,
                             const experiments::EmbeddingDump& dump) {
  io::CsvWriter csv((fs::path(dir) / "projection.csv").string());
  csv.row({"origin_id", "domain_id", "x", "y"});
  for (std::size_t i = 0; i < proj.size(); ++i)
    csv.row({std::to_string(dump.origin_ids[i]), std::to_string(dump.domains[i]),
             io::fmt_double(proj[i][0]), io::fmt_double(proj[i][1])});
  plot::write_ppm((fs::path(dir) / "projection.ppm").string(),
                  plot::scatter_image(proj, dump.domains));
}

inline json accuracy_json(const evalkit::AccuracyStat& s) {
  json j;
  j["mean"] = s.mean;
  j["ci95"] = s.ci;
  j["episodes"] = s.episodes;
  return j;
}

inline void write_metrics(const std::string& dir, const evalkit::MetricsReport& m) {
  json j;
  j["db_index"] = m.db_index;
  j["probe_accuracy"] = m.probe_accuracy;
  j["accuracy"]["overall"] = accuracy_json(m.overall);
  for (const auto& [name, stat] : m.accuracy_by_domain)
    j["accuracy"]["by_domain"][name] = accuracy_json(stat);
  io::write_text((fs::path(dir) / "metrics.json").string(), j.dump(2) + "\n");
}

inline void save_bank(const std::string& dir, const routing::ExpertBank& bank) {
  fs::create_directories(dir);
  json meta;
  meta["scope"] = bank.scope.name();
  meta["experts"] = bank.expert_count();
  meta["space"] = bank.router.space == routing::ClusterSpace::Embedding ? "embedding" : "parameter";
  meta["warnings"] = bank.warnings;
  io::write_text((fs::path(dir) / "bank.json").string(), meta.dump(2) + "\n");

  io::CsvWriter centers((fs::path(dir) / "centers.csv").string());
  for (const auto& c : bank.router.centers) {
    std::vector<std::string> row;
    for (double v : c) row.push_back(io::fmt_double(v));
    centers.row(row);
  }
  for (int e = 0; e < bank.expert_count(); ++e)
    checkpoint::save_params((fs::path(dir) / ("expert_" + std::to_string(e))).string(),
                            bank.experts[static_cast<std::size_t>(e)].params, {});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// commands (exit code 0 success, 1 usage/config, 2 numerical failure)

inline int guarded(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int cmd_train(const CommonArgs& args) {
  return guarded([&args]() {
    config::ExperimentConfig cfg = detail::load_config(args);
    fs::create_directories(cfg.out_dir);
    std::ofstream log((fs::path(cfg.out_dir) / "train_log.jsonl").string());
    if (!log) throw ConfigError("cannot open training log in " + cfg.out_dir);

    int ckpt_every = std::max(1, cfg.train.steps / 4);
    auto on_step = [&](int step, const metalearn::Model& model, const metalearn::StepReport& r) {
      log << detail::log_line(r, cfg.method, cfg.seed) << "\n";
      if ((step + 1) % ckpt_every == 0 && step + 1 < cfg.train.steps)
        checkpoint::save_model(
            (fs::path(cfg.out_dir) / "checkpoints" / ("step_" + std::to_string(step + 1))).string(),
            model, {{"method", cfg.method}});
    };

    experiments::RunArtifacts art = experiments::run_experiment(cfg, on_step);
    log.close();

    checkpoint::save_model((fs::path(cfg.out_dir) / "checkpoint").string(), art.model,
                           {{"method", cfg.method}});
    if (art.bank) detail::save_bank((fs::path(cfg.out_dir) / "bank").string(), *art.bank);

    detail::write_embeddings_csv((fs::path(cfg.out_dir) / "embeddings.csv").string(), art.dump);
    std::vector<std::string> names;
    for (const auto& d : config::build_mixture(cfg).domains) names.push_back(d.name);
    detail::write_heatmap(cfg.out_dir, art.metrics.heatmap, names);
    detail::write_projection(cfg.out_dir, art.metrics.projection, art.dump);
    detail::write_metrics(cfg.out_dir, art.metrics);
    detail::write_sidecar(cfg.out_dir, "train");
    std::cout << "train: accuracy " << io::fmt_double(art.metrics.overall.mean) << " +- "
              << io::fmt_double(art.metrics.overall.ci) << " over " << art.metrics.overall.episodes
              << " episodes\n";
  });
}

inline int cmd_eval(const CommonArgs& args, const std::string& checkpoint_dir) {
  return guarded([&args, &checkpoint_dir]() {
    config::ExperimentConfig cfg = detail::load_config(args);
    if (!fs::exists(fs::path(checkpoint_dir) / "manifest.json"))
      throw ConfigError("checkpoint not found: " + checkpoint_dir);
    metalearn::Model model = checkpoint::load_model(checkpoint_dir);
    experiments::PipelineMethod method = experiments::PipelineMethod::parse(cfg.method);
    if (method.tsa)
      throw ConfigError("eval: tsa pipelines are evaluated by `train`; point --config at the base method");
    metalearn::TrainConfig tc = cfg.train;
    auto mixture = config::build_mixture(cfg);
    auto rep = metalearn::evaluate_few_shot(metalearn::make_adapter(model, method.base, tc), mixture,
                                            cfg.eval_episodes, tc.ways, tc.shots,
                                            tc.query_per_class, derive_seed(cfg.seed, "eval"));
    fs::create_directories(cfg.out_dir);
    json j;
    j["accuracy"]["overall"] = detail::accuracy_json(rep.overall);
    for (const auto& [dom, stat] : rep.by_domain)
      j["accuracy"]["by_domain"][mixture.domains[static_cast<std::size_t>(dom)].name] =
          detail::accuracy_json(stat);
    io::write_text((fs::path(cfg.out_dir) / "eval.json").string(), j.dump(2) + "\n");
    detail::write_sidecar(cfg.out_dir, "eval");
    std::cout << "eval: accuracy " << io::fmt_double(rep.overall.mean) << " +- "
              << io::fmt_double(rep.overall.ci) << "\n";
  });
}

inline int cmd_ablate_aug(const CommonArgs& args) {
  return guarded([&args]() {
    config::ExperimentConfig cfg = detail::load_config(args);
    fs::create_directories(cfg.out_dir);
    auto outcome = experiments::run_ablation(cfg, taskaug::all_strategies());
    io::CsvWriter csv((fs::path(cfg.out_dir) / "ablation.csv").string());
    csv.row({"strategy", "db", "probe_accuracy", "few_shot_accuracy"});
    for (const auto& row : outcome.rows)
      csv.row({row.strategy, io::fmt_double(row.db), io::fmt_double(row.probe),
               io::fmt_double(row.accuracy)});
    for (const auto& [name, dump] : outcome.dumps) {
      std::string safe = name;
      for (char& c : safe)
        if (c == '+') c = '_';
      detail::write_embeddings_csv((fs::path(cfg.out_dir) / ("embeddings_" + safe + ".csv")).string(),
                                   dump);
    }
    detail::write_sidecar(cfg.out_dir, "ablate-aug");
    std::cout << "ablate-aug: " << outcome.rows.size() << " strategies written\n";
  });
}

inline int cmd_route(const CommonArgs& args, const std::string& run_dir, int task_count) {
  return guarded([&args, &run_dir, task_count]() {
    config::ExperimentConfig cfg = detail::load_config(args);
    std::string ckpt = (fs::path(run_dir) / "checkpoint").string();
    if (!fs::exists(fs::path(ckpt) / "manifest.json"))
      throw ConfigError("route: missing checkpoint under " + run_dir);
    metalearn::Model model = checkpoint::load_model(ckpt);
    auto mixture = config::build_mixture(cfg);
    metalearn::AdaptState st = cfg.train.adapt_state(metalearn::Family::Maml);

    auto embed = [&model, &cfg, st](const episodes::Task& t) {
      return metalearn::embed_task(model, t, cfg.train.embedding_mode, st).raw();
    };

    // router: persisted bank centers when present, otherwise k-means on the fly
    routing::ClusterModel router;
    std::string bank_dir = (fs::path(run_dir) / "bank").string();
    if (fs::exists(fs::path(bank_dir) / "centers.csv")) {
      json bmeta = json::parse(io::read_text((fs::path(bank_dir) / "bank.json").string()));
      if (bmeta["space"] != "embedding")
        throw ConfigError("route: only embedding-space banks can be routed from artifacts");
      // centers.csv is headerless; the reader surfaces row 0 as the header
      auto table = io::read_csv((fs::path(bank_dir) / "centers.csv").string());
      std::vector<std::vector<double>> centers;
      auto parse_row = [](const std::vector<std::string>& cells) {
        std::vector<double> c;
        for (const auto& s : cells) c.push_back(std::stod(s));
        return c;
      };
      centers.push_back(parse_row(table.header));
      for (const auto& r : table.rows) centers.push_back(parse_row(r));
      router.centers = std::move(centers);
      router.space = routing::ClusterSpace::Embedding;
    } else {
      int per_domain = std::max(10, task_count / std::max<int>(1, mixture.domains.size()));
      auto dump = experiments::embed_dump(model, mixture, per_domain, cfg.train.ways,
                                          cfg.train.shots, cfg.train.query_per_class,
                                          cfg.train.embedding_mode, st,
                                          derive_seed(cfg.seed, "route-fit"));
      router = routing::fit_task_clusters(dump.points, static_cast<int>(mixture.domains.size()),
                                          derive_seed(cfg.seed, "route-router"));
    }

    fs::create_directories(cfg.out_dir);
    io::CsvWriter csv((fs::path(cfg.out_dir) / "routing.csv").string());
    csv.row({"origin_id", "expert", "domain_id"});
    std::vector<int> assignments, domains;
    for (int i = 0; i < task_count; ++i) {
      std::uint64_t es = derive_seed(cfg.seed, "route-task", static_cast<std::uint64_t>(i));
      Rng rng(es);
      int which = rng.pick_weighted(mixture.weights);
      episodes::Task t = episodes::sample_episode(mixture.domains[static_cast<std::size_t>(which)],
                                        cfg.train.ways, cfg.train.shots, cfg.train.query_per_class,
                                        rng.next_u64());
      int expert = router.nearest(embed(t));
      assignments.push_back(expert);
      domains.push_back(t.domain_id());
      csv.row({std::to_string(t.origin_id), std::to_string(expert), std::to_string(t.domain_id())});
    }
    auto hm = evalkit::cluster_domain_matrix(assignments, domains, router.k(),
                                             static_cast<int>(mixture.domains.size()));
    std::vector<std::string> names;
    for (const auto& d : mixture.domains) names.push_back(d.name);
    detail::write_heatmap(cfg.out_dir, hm, names);
    detail::write_sidecar(cfg.out_dir, "route");
    std::cout << "route: " << task_count << " tasks routed over " << router.k() << " experts\n";
  });
}

inline int cmd_probe(const std::string& embeddings_csv, const std::string& out_dir,
                     long split_seed) {
  return guarded([&embeddings_csv, &out_dir, split_seed]() {
    if (!fs::exists(embeddings_csv)) throw ConfigError("probe: missing " + embeddings_csv);
    io::CsvTable table = io::read_csv(embeddings_csv);
    if (table.header.size() < 3 || table.header[0] != "origin_id" || table.header[1] != "domain_id")
      throw ConfigError("probe: not an embeddings CSV: " + embeddings_csv);
    evalkit::PointSet points;
    std::vector<int> domains;
    for (const auto& row : table.rows) {
      domains.push_back(std::stoi(row[1]));
      std::vector<double> p;
      for (std::size_t j = 2; j < row.size(); ++j) p.push_back(std::stod(row[j]));
      points.push_back(std::move(p));
    }
    double acc = evalkit::linear_probe(points, domains, static_cast<std::uint64_t>(split_seed));
    fs::create_directories(out_dir);
    json j;
    j["probe_accuracy"] = acc;
    j["points"] = points.size();
    io::write_text((fs::path(out_dir) / "probe.json").string(), j.dump(2) + "\n");
    std::cout << "probe: accuracy " << io::fmt_double(acc) << "\n";
  });
}

inline int cmd_report(const std::string& run_dir, const std::string& out_path) {
  return guarded([&run_dir, &out_path]() {
    std::ostringstream os;
    os << "# Run report: " << run_dir << "\n\n";
    std::string metrics_path = (fs::path(run_dir) / "metrics.json").string();
    if (!fs::exists(metrics_path)) throw ConfigError("report: missing " + metrics_path);
    json m = json::parse(io::read_text(metrics_path));
    os << "## Accuracy\n";
    os << "overall: " << m["accuracy"]["overall"]["mean"].get<double>() << " +- "
       << m["accuracy"]["overall"]["ci95"].get<double>() << " ("
       << m["accuracy"]["overall"]["episodes"].get<int>() << " episodes)\n";
    if (m["accuracy"].contains("by_domain"))
      for (auto& [name, stat] : m["accuracy"]["by_domain"].items())
        os << "  " << name << ": " << stat["mean"].get<double>() << " +- "
           << stat["ci95"].get<double>() << "\n";
    os << "\n## Embedding quality\n";
    os << "Davies-Bouldin index: " << m["db_index"].get<double>() << "\n";
    os << "linear probe accuracy: " << m["probe_accuracy"].get<double>() << "\n";

    std::string bank_meta = (fs::path(run_dir) / "bank" / "bank.json").string();
    if (fs::exists(bank_meta)) {
      json b = json::parse(io::read_text(bank_meta));
      // parameter accounting from the stored arrays
      auto count_params = [](const std::string& dir, bool task_net_only) {
        json man = json::parse(io::read_text((fs::path(dir) / "manifest.json").string()));
        long total = 0;
        for (const auto& a : man["arrays"]) {
          std::string name = a["name"].get<std::string>();
          if (task_net_only && name.rfind("backbone.", 0) != 0 && name.rfind("head.", 0) != 0)
            continue;
          long n = 1;
          for (int d : a["shape"].get<std::vector<int>>()) n *= d;
          total += n;
        }
        return total;
      };
      long base_n = count_params((fs::path(run_dir) / "checkpoint").string(), true);
      int experts = b["experts"].get<int>();
      long expert_n = experts > 0
                          ? count_params((fs::path(run_dir) / "bank" / "expert_0").string(), false)
                          : 0;
      os << "\n## Expert bank\n";
      os << "scope: " << b["scope"].get<std::string>() << ", experts: " << experts << ", space: "
         << b["space"].get<std::string>() << "\n";
      os << "task-network parameters N = " << base_n << "\n";
      os << "per-expert parameters  n = " << expert_n << "\n";
      os << "stored total N + M*n  = " << (base_n + experts * expert_n) << " (full-copy banks would store N + M*N = "
         << (base_n + experts * base_n) << ")\n";
      os << "adapted fraction n/N  = " << io::fmt_double(double(expert_n) / double(base_n)) << "\n";
    }

    std::string ablation_path = (fs::path(run_dir) / "ablation.csv").string();
    if (fs::exists(ablation_path)) {
      os << "\n## Augmentation ablation\n";
      io::CsvTable t = io::read_csv(ablation_path);
      for (const auto& row : t.rows)
        os << "  " << row[0] << ": DB " << row[1] << ", probe " << row[2] << ", accuracy " << row[3]
           << "\n";
    }

    io::write_text(out_path, os.str());
    std::cout << "report written to " << out_path << "\n";
  });
}

}  // namespace taskcl::cli
