#pragma once

// `relfm` command-line front end. Exit codes: 0 success, 1 validation error
// (including bad usage), 2 I/O error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "relfm/downstream.hpp"
#include "relfm/encoders.hpp"
#include "relfm/error.hpp"
#include "relfm/graph_io.hpp"
#include "relfm/pretrain.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rowtext.hpp"
#include "relfm/synth.hpp"
#include "relfm/task.hpp"

namespace relfm::cli {

namespace fs = std::filesystem;

/// Level from RELFM_LOG (error, warn, info, debug); info when unset.
inline void setup_logging() {
  static bool done = false;
  if (!done) {
    auto logger = spdlog::stderr_color_mt("relfm");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    done = true;
  }
  const char* env = std::getenv("RELFM_LOG");
  const std::string lvl = env ? env : "info";
  if (lvl == "error") spdlog::set_level(spdlog::level::err);
  else if (lvl == "warn") spdlog::set_level(spdlog::level::warn);
  else if (lvl == "debug") spdlog::set_level(spdlog::level::debug);
  else {
    spdlog::set_level(spdlog::level::info);
    if (lvl != "info") spdlog::warn("unrecognized RELFM_LOG value '{}', using info", lvl);
  }
}

inline void log_config(const std::string& command, const nlohmann::json& cfg) {
  spdlog::info("{} resolved config: {}", command, cfg.dump());
}

inline void ensure_dir(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string());
}

inline EntityGraph load_graph_checked(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing file " + p.string());
  return read_graph(p);
}

inline EmbeddingMatrix load_features_for(const fs::path& p, const EntityGraph& g, bool standardize) {
  if (!fs::exists(p)) throw IoError("missing file " + p.string());
  auto m = load_embedding_file(p);
  check_features_match(m, g);
  if (standardize) {
    const EmbeddingMatrix* one[] = {&m};
    Standardizer::fit(one).apply(m);
  }
  return m;
}

struct TaskInputs {
  std::string graph, features, task, task_manifest;
  bool random_split = false;
  bool standardize = false;
};

inline void add_task_flags(CLI::App* c, TaskInputs& t) {
  c->add_option("--graph", t.graph, "graph file from build-graph")->required();
  c->add_option("--features", t.features, "REMB feature file aligned with the graph")->required();
  c->add_option("--task", t.task, "task CSV (entity_id,timestamp,label)")->required();
  c->add_option("--task-manifest", t.task_manifest, "task JSON with entity_table and time_split")->required();
  c->add_flag("--random-split", t.random_split, "seeded 70/10/20 split instead of the temporal one");
  c->add_flag("--standardize", t.standardize, "standardize feature dimensions before use");
}

inline void add_downstream_flags(CLI::App* c, downstream::DownstreamConfig& cfg, bool& no_time_filter) {
  c->add_option("--epochs", cfg.epochs, "training epochs")->capture_default_str();
  c->add_option("--lr", cfg.lr, "Adam learning rate")->capture_default_str();
  c->add_option("--batch-size", cfg.batch_size, "task rows per batch")->capture_default_str();
  c->add_option("--seed", cfg.seed, "random seed")->capture_default_str();
  c->add_option("--hidden", cfg.hidden_channels, "hidden width when no checkpoint is given")->capture_default_str();
  c->add_option("--layers", cfg.layers, "conv layers when no checkpoint is given")->capture_default_str();
  c->add_option("--fanout", cfg.fanout.caps, "per-hop neighbor caps")->delimiter(',')->capture_default_str();
  c->add_option("--date-dim", cfg.date_dim, "date encoder width")->capture_default_str();
  c->add_option("--head", cfg.head_hidden, "hidden widths of the head")->delimiter(',')->capture_default_str();
  c->add_option("--dropout-keep", cfg.dropout_keep, "dropout keep probability in the head")->capture_default_str();
  c->add_flag("--no-time-filter", no_time_filter, "let neighbors after the seed time through");
}

struct LoadedTask {
  EntityGraph graph;
  EmbeddingMatrix features;
  TaskTable task;
};

inline LoadedTask load_task_inputs(const TaskInputs& in, std::uint64_t seed) {
  LoadedTask t;
  t.graph = load_graph_checked(in.graph);
  t.features = load_features_for(in.features, t.graph, in.standardize);
  auto tm = load_task_manifest(in.task_manifest);
  t.task = load_task_table(fs::path(in.task), tm.entity_table, t.graph);
  if (in.random_split) apply_random_split(t.task, seed);
  else apply_time_split(t.task, tm.val_start, tm.test_start);
  spdlog::info("task: {} rows ({} train, {} validation, {} test)", t.task.rows.size(),
               t.task.indices(Split::train).size(), t.task.indices(Split::validation).size(),
               t.task.indices(Split::test).size());
  return t;
}

inline std::optional<gnn::HeteroSageParams<float>> load_pretrained(const std::string& path) {
  if (path.empty()) return std::nullopt;
  if (!fs::exists(path)) throw IoError("missing file " + path);
  return gnn::params_from_checkpoint<float>(tensor::read_checkpoint(path));
}

/// Parses argv and runs one subcommand.
inline int dispatch(int argc, const char* const* argv) {
  setup_logging();
  CLI::App app{"relfm: relational foundation-model pipeline", "relfm"};
  app.require_subcommand(1, 1);
  std::function<void()> action;

  // build-graph
  auto* bg = app.add_subcommand("build-graph", "load a schema and its CSVs and write the entity graph");
  std::string bg_schema, bg_out, bg_dump;
  std::optional<std::size_t> bg_cap;
  bool bg_strict = false;
  bg->add_option("--schema", bg_schema, "schema manifest JSON")->required();
  bg->add_option("--out", bg_out, "output graph file")->required();
  bg->add_option("--row-cap", bg_cap, "keep only the first N rows of every table");
  bg->add_flag("--strict", bg_strict, "reject dangling foreign keys");
  bg->add_option("--dump-edges", bg_dump, "also write one EDGE line per edge to this file");
  bg->callback([&] {
    action = [&] {
      log_config("build-graph", {{"schema", bg_schema}, {"out", bg_out}, {"row_cap", bg_cap ? nlohmann::json(*bg_cap) : nlohmann::json()},
                                 {"strict", bg_strict}});
      auto m = parse_schema_manifest(bg_schema);
      auto store = load_tables(m, fs::path(bg_schema).parent_path(), LoadOptions{bg_cap});
      if (store.warnings) spdlog::warn("{} cells were unparseable or null in non-nullable columns", store.warnings);
      auto g = build_entity_graph(m, store, GraphBuildOptions{bg_strict});
      auto rep = validate_graph(g);
      if (!rep.ok) throw Error("graph validation failed: " + rep.violations.front());
      ensure_dir(fs::path(bg_out).parent_path());
      write_graph(g, bg_out);
      if (!bg_dump.empty()) {
        std::ofstream f(bg_dump);
        if (!f) throw IoError("cannot write " + bg_dump);
        dump_edges(g, f);
      }
      spdlog::info("graph: {} nodes, {} directed edges, {} relations, {} dangling foreign keys", g.num_nodes(),
                   g.num_edges(), g.relations.size(), g.dangling_fks);
    };
  });

  // linearize
  auto* li = app.add_subcommand("linearize", "write the masked row-text corpus");
  std::string li_schema, li_out;
  std::optional<std::size_t> li_quota;
  std::uint64_t li_seed = 0;
  rowtext::MaskProbabilities li_p;
  li->add_option("--schema", li_schema, "schema manifest JSON")->required();
  li->add_option("--out", li_out, "output directory")->required();
  li->add_option("--rows-per-table", li_quota, "first N rows of every table");
  li->add_option("--seed", li_seed, "split and mask seed")->capture_default_str();
  li->add_option("--p-table", li_p.table_name, "table-name mask probability")->capture_default_str();
  li->add_option("--p-attr", li_p.attr_name, "attribute-name mask probability")->capture_default_str();
  li->add_option("--p-value", li_p.value, "value mask probability")->capture_default_str();
  li->callback([&] {
    action = [&] {
      log_config("linearize", {{"schema", li_schema}, {"out", li_out},
                               {"rows_per_table", li_quota ? nlohmann::json(*li_quota) : nlohmann::json()},
                               {"seed", li_seed}, {"p_table", li_p.table_name}, {"p_attr", li_p.attr_name},
                               {"p_value", li_p.value}});
      auto m = parse_schema_manifest(li_schema);
      auto store = load_tables(m, fs::path(li_schema).parent_path());
      auto picks = rowtext::select_rows(store, li_quota);
      std::vector<rowtext::LinearizedRow> rows;
      std::vector<rowtext::MaskPlan> plans;
      for (std::size_t i = 0; i < picks.size(); ++i) {
        rows.push_back(rowtext::linearize_row(m, store, m.tables[picks[i].first].name, picks[i].second));
        Rng rng(derive_seed(li_seed, {0x11, i}));
        plans.push_back(rowtext::sample_mask_plan(rows.back(), rng, li_p, i));
      }
      auto split = rowtext::split_corpus(rows.size(), li_seed);
      rowtext::export_corpus(rows, plans, split, li_out);
      spdlog::info("corpus: {} train, {} validation, {} test rows", split.train.size(), split.validation.size(),
                   split.test.size());
    };
  });

  // encode
  auto* en = app.add_subcommand("encode", "write initial node features as a REMB file, or validate one");
  std::string en_schema, en_out, en_method = "hash", en_reference, en_validate;
  std::size_t en_dim = 1024, en_rank = 16;
  std::uint64_t en_seed = 0;
  en->add_option("--schema", en_schema, "schema manifest JSON")->required();
  en->add_option("--out", en_out, "output REMB file");
  en->add_option("--method", en_method, "hash, projected or random")->check(CLI::IsMember({"hash", "projected", "random"}))->capture_default_str();
  en->add_option("--dim", en_dim, "feature dimension for hashing")->capture_default_str();
  en->add_option("--rank", en_rank, "subspace rank for the projected method")->capture_default_str();
  en->add_option("--seed", en_seed, "hash / random seed")->capture_default_str();
  en->add_option("--reference", en_reference, "REMB file whose value range the random baseline matches");
  en->add_option("--validate", en_validate, "check an existing REMB file against the schema and exit");
  en->callback([&] {
    action = [&] {
      log_config("encode", {{"schema", en_schema}, {"out", en_out}, {"method", en_method}, {"dim", en_dim},
                            {"rank", en_rank}, {"seed", en_seed}, {"reference", en_reference}, {"validate", en_validate}});
      auto m = parse_schema_manifest(en_schema);
      auto store = load_tables(m, fs::path(en_schema).parent_path());
      if (!en_validate.empty()) {
        if (!fs::exists(en_validate)) throw IoError("missing file " + en_validate);
        auto e = load_embedding_file(en_validate, &m, &store);
        spdlog::info("{}: ok ({} tables, {} rows, dim {})", en_validate, e.blocks.size(), e.total_rows(), e.dim);
        return;
      }
      if (en_out.empty()) throw Error("--out is required unless --validate is given");
      EmbeddingMatrix out;
      if (en_method == "hash") {
        out = encode_hashed(m, store, en_dim, en_seed);
      } else if (en_method == "projected") {
        out = encode_projected(m, store, en_dim, en_rank, en_seed);
      } else {
        auto ref = en_reference.empty() ? encode_hashed(m, store, en_dim, en_seed)
                                        : load_embedding_file(en_reference, &m, &store);
        out = gen_random_embeddings(ref, en_seed);
      }
      ensure_dir(fs::path(en_out).parent_path());
      write_embedding_file(out, en_out);
      spdlog::info("features: {} rows x {} dims", out.total_rows(), out.dim);
    };
  });

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "masked feature reconstruction pretraining");
  std::string pt_config, pt_out;
  std::vector<std::string> pt_graphs, pt_feats;
  std::optional<std::size_t> pt_epochs, pt_batch, pt_workers;
  std::optional<std::uint64_t> pt_seed;
  std::optional<double> pt_lr, pt_mask;
  bool pt_det = false, pt_std = false;
  pt->add_option("--config", pt_config, "JSON config (keys as in the resolved config log)");
  pt->add_option("--graphs", pt_graphs, "comma-separated graph files")->delimiter(',')->required();
  pt->add_option("--features", pt_feats, "comma-separated REMB files, one per graph")->delimiter(',')->required();
  pt->add_option("--out", pt_out, "output directory")->required();
  pt->add_option("--epochs", pt_epochs, "override epochs");
  pt->add_option("--batch-size", pt_batch, "override batch size");
  pt->add_option("--lr", pt_lr, "override learning rate");
  pt->add_option("--mask-prob", pt_mask, "override masking probability");
  pt->add_option("--seed", pt_seed, "override seed");
  pt->add_option("--workers", pt_workers, "batch preparation threads");
  pt->add_flag("--deterministic", pt_det, "force one preparation thread");
  pt->add_flag("--standardize", pt_std, "standardize features over all pretraining databases");
  pt->callback([&] {
    action = [&] {
      auto cfg = pt_config.empty() ? pretrain::PretrainConfig{} : pretrain::load_config(pt_config);
      if (pt_epochs) cfg.epochs = *pt_epochs;
      if (pt_batch) cfg.batch_size = *pt_batch;
      if (pt_lr) cfg.lr = *pt_lr;
      if (pt_mask) cfg.mask_prob = *pt_mask;
      if (pt_seed) cfg.seed = *pt_seed;
      if (pt_workers) cfg.workers = *pt_workers;
      if (pt_det) cfg.workers = 1;
      cfg.validate();
      if (pt_graphs.size() != pt_feats.size())
        throw Error("--graphs and --features need the same number of entries");
      auto j = pretrain::to_json(cfg);
      j["graphs"] = pt_graphs;
      j["features"] = pt_feats;
      j["standardize"] = pt_std;
      log_config("pretrain", j);
      std::vector<EntityGraph> graphs;
      std::vector<EmbeddingMatrix> feats;
      for (std::size_t i = 0; i < pt_graphs.size(); ++i) {
        graphs.push_back(load_graph_checked(pt_graphs[i]));
        feats.push_back(load_features_for(pt_feats[i], graphs.back(), false));
      }
      if (pt_std) {
        std::vector<const EmbeddingMatrix*> all;
        for (const auto& f : feats) all.push_back(&f);
        auto s = Standardizer::fit(all);
        for (auto& f : feats) s.apply(f);
      }
      std::vector<pretrain::PretrainSource> sources;
      for (std::size_t i = 0; i < graphs.size(); ++i)
        sources.push_back({"db" + std::to_string(i), &graphs[i], &feats[i]});
      ensure_dir(pt_out);
      pretrain::RunOptions opts;
      opts.checkpoint_dir = fs::path(pt_out) / "checkpoints";
      opts.on_record = [](const pretrain::LossRecord& r) {
        spdlog::info("epoch {} {}: combined {:.6g} cos {:.6g} mse {:.6g}", r.epoch, r.split, r.combined, r.cos, r.mse);
      };
      auto res = pretrain::run_pretraining(sources, cfg, opts);
      pretrain::write_history_csv(res.history, fs::path(pt_out) / "loss_history.csv");
      tensor::write_checkpoint(res.params.to_checkpoint(), fs::path(pt_out) / "model.rfmp");
      if (res.skipped_batches) spdlog::warn("{} batches had no masked entries and were skipped", res.skipped_batches);
    };
  });

  // adapt
  auto* ad = app.add_subcommand("adapt", "train a task head on a target database");
  TaskInputs ad_in;
  downstream::DownstreamConfig ad_cfg;
  bool ad_no_tf = false;
  std::string ad_mode, ad_ckpt, ad_out;
  add_task_flags(ad, ad_in);
  add_downstream_flags(ad, ad_cfg, ad_no_tf);
  ad->add_option("--mode", ad_mode, "frozen, finetune or no_gnn")->required();
  ad->add_option("--checkpoint", ad_ckpt, "pretrained RFMP file (conv layers are reused)");
  ad->add_option("--out", ad_out, "output directory")->required();
  ad->callback([&] {
    action = [&] {
      ad_cfg.time_filter = !ad_no_tf;
      auto mode = downstream::parse_adapt_mode(ad_mode);
      auto j = downstream::to_json(ad_cfg);
      j["mode"] = ad_mode;
      j["checkpoint"] = ad_ckpt;
      j["random_split"] = ad_in.random_split;
      j["standardize"] = ad_in.standardize;
      log_config("adapt", j);
      auto pre = load_pretrained(ad_ckpt);
      auto t = load_task_inputs(ad_in, ad_cfg.seed);
      auto norm = downstream::fit_time_normalization(t.task);
      auto model = downstream::init_model<float>(t.graph, t.features.dim, mode, pre ? &*pre : nullptr, ad_cfg, norm);
      auto res = downstream::train_downstream(model, t.graph, t.features, t.task, ad_cfg);
      for (const auto& e : res.history)
        spdlog::info("epoch {}: train loss {:.6g} val auc {}", e.epoch, e.train_loss, downstream::format_metric(e.val_auc));
      ensure_dir(ad_out);
      std::vector<downstream::MetricRow> rows;
      for (auto s : {Split::validation, Split::test})
        rows.push_back({std::string(downstream::to_string(mode)), s,
                        downstream::evaluate(model, t.graph, t.features, t.task, s, ad_cfg)});
      downstream::write_metrics_csv(rows, fs::path(ad_out) / "metrics.csv");
      tensor::write_checkpoint(downstream::model_to_checkpoint(model), fs::path(ad_out) / "model.rfmp");
      std::ofstream h(fs::path(ad_out) / "train_history.csv", std::ios::binary);
      if (!h) throw IoError("cannot write train history");
      h << "epoch,train_loss,val_auc\n";
      for (const auto& e : res.history)
        h << e.epoch << ',' << pretrain::format_number(e.train_loss) << ',' << downstream::format_metric(e.val_auc) << '\n';
      spdlog::info("best epoch {}", res.best_epoch);
    };
  });

  // eval
  auto* ev = app.add_subcommand("eval", "score a trained task model");
  TaskInputs ev_in;
  downstream::DownstreamConfig ev_cfg;
  bool ev_no_tf = false;
  std::string ev_model, ev_out, ev_name = "model";
  add_task_flags(ev, ev_in);
  add_downstream_flags(ev, ev_cfg, ev_no_tf);
  ev->add_option("--model", ev_model, "RFMP file written by adapt")->required();
  ev->add_option("--out", ev_out, "metrics CSV")->required();
  ev->add_option("--name", ev_name, "config column value")->capture_default_str();
  ev->callback([&] {
    action = [&] {
      ev_cfg.time_filter = !ev_no_tf;
      auto j = downstream::to_json(ev_cfg);
      j["model"] = ev_model;
      log_config("eval", j);
      if (!fs::exists(ev_model)) throw IoError("missing file " + ev_model);
      auto t = load_task_inputs(ev_in, ev_cfg.seed);
      auto norm = downstream::fit_time_normalization(t.task);
      auto model = downstream::model_from_checkpoint<float>(tensor::read_checkpoint(ev_model), t.graph,
                                                           downstream::AdaptMode::finetune, norm);
      if (model.gnn && model.gnn->convs.size() != ev_cfg.fanout.layers())
        throw Error("--fanout must have one cap per conv layer");
      std::vector<downstream::MetricRow> rows;
      for (auto s : {Split::train, Split::validation, Split::test})
        rows.push_back({ev_name, s, downstream::evaluate(model, t.graph, t.features, t.task, s, ev_cfg)});
      ensure_dir(fs::path(ev_out).parent_path());
      downstream::write_metrics_csv(rows, ev_out);
    };
  });

  // ablate
  auto* ab = app.add_subcommand("ablate", "six-way feature source x GNN usage ablation");
  TaskInputs ab_in;
  downstream::DownstreamConfig ab_cfg;
  bool ab_no_tf = false;
  std::string ab_random, ab_ckpt, ab_out;
  add_task_flags(ab, ab_in);
  add_downstream_flags(ab, ab_cfg, ab_no_tf);
  ab->add_option("--random-features", ab_random, "random baseline REMB (generated from --features when absent)");
  ab->add_option("--checkpoint", ab_ckpt, "pretrained RFMP file");
  ab->add_option("--out", ab_out, "metrics CSV")->required();
  ab->callback([&] {
    action = [&] {
      ab_cfg.time_filter = !ab_no_tf;
      auto j = downstream::to_json(ab_cfg);
      j["checkpoint"] = ab_ckpt;
      j["random_features"] = ab_random;
      log_config("ablate", j);
      auto pre = load_pretrained(ab_ckpt);
      auto t = load_task_inputs(ab_in, ab_cfg.seed);
      auto rnd = ab_random.empty() ? gen_random_embeddings(t.features, derive_seed(ab_cfg.seed, {0xAB}))
                                   : load_features_for(ab_random, t.graph, ab_in.standardize);
      auto rows = downstream::run_ablation(t.graph, t.features, rnd, t.task, pre ? &*pre : nullptr, ab_cfg);
      ensure_dir(fs::path(ab_out).parent_path());
      downstream::write_metrics_csv(rows, ab_out);
      for (const auto& r : rows) spdlog::info("{}: auc {}", r.config, downstream::format_metric(r.metrics.roc_auc));
    };
  });

  // synth
  auto* sy = app.add_subcommand("synth", "generate a synthetic database and planted task");
  synth::SynthProfile sp;
  std::string sy_profile = "star", sy_signal = "neighbor-aggregate", sy_out;
  bool sy_no_task = false;
  sy->add_option("--profile", sy_profile, "star or chain")->capture_default_str();
  sy->add_option("--out", sy_out, "output directory")->required();
  sy->add_option("--tables", sp.tables, "table count")->capture_default_str();
  sy->add_option("--rows", sp.rows_per_table, "rows per table")->capture_default_str();
  sy->add_option("--entity-rows", sp.entity_rows, "rows of the entity table (0: same as --rows)")->capture_default_str();
  sy->add_option("--attributes", sp.attributes, "text attributes per table")->capture_default_str();
  sy->add_option("--vocab", sp.vocabulary, "vocabulary size")->capture_default_str();
  sy->add_option("--signal", sy_signal, "neighbor-aggregate or node-local")->capture_default_str();
  sy->add_option("--noise", sp.noise, "label flip probability")->capture_default_str();
  sy->add_option("--seed", sp.seed, "generator seed")->capture_default_str();
  sy->add_option("--prefix", sp.prefix, "table name prefix")->capture_default_str();
  sy->add_flag("--no-task", sy_no_task, "skip task.csv / task.json");
  sy->callback([&] {
    action = [&] {
      sp.topology = synth::parse_topology(sy_profile);
      sp.signal = synth::parse_signal_mode(sy_signal);
      sp.validate();
      log_config("synth", synth::to_json(sp));
      auto m = synth::generate_database(sp, sy_out);
      if (!sy_no_task) {
        auto store = load_tables(m, sy_out);
        auto g = build_entity_graph(m, store);
        synth::PlantOptions po;
        po.mode = sp.signal;
        po.noise = sp.noise;
        po.seed = derive_seed(sp.seed, {0x7A5C});
        auto planted = synth::plant_labels(m, store, g, m.tables.front().name, po);
        synth::write_task_files(planted, sy_out);
        spdlog::info("task: {} rows, {} coin-flip labels", planted.task.rows.size(), planted.coin_flips);
      }
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  try {
    if (action) action();
    return 0;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}

}  // namespace relfm::cli
