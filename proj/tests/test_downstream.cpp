#include <gtest/gtest.h>

#include "relfm/downstream.hpp"
#include "support.hpp"

using namespace relfm;
using namespace relfm::testing;
using namespace relfm::downstream;

namespace {

constexpr std::int32_t kDay0 = 18262;  // 2020-01-01

DownstreamConfig tiny_config() {
  DownstreamConfig c;
  c.epochs = 2;
  c.lr = 1e-2;
  c.batch_size = 8;
  c.date_dim = 4;
  c.head_hidden = {8, 4};
  c.hidden_channels = 8;
  c.fanout = gnn::FanoutSpec{{5, 3}};
  c.seed = 3;
  return c;
}

/// 3 hubs with 60 daily spokes; hub task rows over the first 30 days.
struct HubTask {
  TempDir dir;
  LoadedDb db;
  EmbeddingMatrix feats;
  TaskTable task;

  HubTask() {
    write_hub_db(dir.path(), 3, 60, kDay0);
    db = load_db(dir.path());
    feats = random_features(db.graph, 6, 1);
    task.entity_table = "hubs";
    for (std::int32_t d = 0; d < 30; ++d) {
      const NodeId h = static_cast<NodeId>(d % 3);
      task.rows.push_back({"h" + std::to_string(h), h, kDay0 + d, (d / 3) % 2, Split::train});
    }
    apply_time_split(task, kDay0 + 18, kDay0 + 24);
  }
};

}  // namespace

TEST(Metrics, AucFixtures) {
  const std::vector<double> s{0.8, 0.6, 0.6, 0.2};
  const std::vector<int> y{1, 0, 1, 0};
  EXPECT_EQ(roc_auc(s, y), 0.875);
  EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{0, 1, 1}), 0.5);
  try {
    roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("undefined AUC"), std::string::npos);
  }
  EXPECT_THROW(roc_auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), Error);
}

TEST(Metrics, AucEqualsPairwiseOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 1000)(rng);
    const int levels = std::uniform_int_distribution<int>(2, 50)(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::uniform_int_distribution<int>(0, levels)(rng) / static_cast<double>(levels);
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(roc_auc(s, y), pairwise_auc(s, y)) << "n=" << n;
  }
}

TEST(Metrics, AucMonotoneInvariance) {
  std::mt19937_64 rng(2);
  std::vector<double> s(300), t(300);
  std::vector<int> y(300);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = std::uniform_int_distribution<int>(0, 40)(rng) / 40.0;
    y[i] = static_cast<int>(rng() % 2);
    t[i] = std::exp(3 * s[i]) + s[i] * s[i] * s[i] - 7;
  }
  EXPECT_EQ(roc_auc(s, y), roc_auc(t, y));
}

TEST(Metrics, ThresholdCollapse) {
  std::vector<double> perfect{0.9, 0.1, 0.8};
  std::vector<int> py{1, 0, 1};
  auto p = precision_accuracy_f1(perfect, py);
  EXPECT_EQ(*p.precision, 1.0);
  EXPECT_EQ(p.accuracy, 1.0);
  EXPECT_EQ(*p.f1, 1.0);

  // 141 of 200 positive; every probability above 0.5 but still ranked
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 200; ++i) {
    y.push_back(i < 141);
    s.push_back(0.6 + (i < 141 ? 0.2 : 0.1) + 0.0001 * i);
  }
  auto m = precision_accuracy_f1(s, y);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.705);
  EXPECT_DOUBLE_EQ(*m.precision, 0.705);
  EXPECT_EQ(roc_auc(s, y), 1.0);

  std::vector<double> low(10, 0.2);
  std::vector<int> ly{1, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  auto none = precision_accuracy_f1(low, ly);
  EXPECT_FALSE(none.precision.has_value());
  EXPECT_DOUBLE_EQ(none.accuracy, 0.9);
  std::ostringstream csv;
  write_metrics_csv({{"x", Split::test, score_predictions(low, ly)}}, csv);
  EXPECT_EQ(csv.str(), "config,split,roc_auc,precision,accuracy,f1\nx,test,0.500000,undefined,0.900000,0.000000\n");
}

TEST(Task, LoadAndErrors) {
  TempDir dir;
  write_toy_db(dir.path());
  auto db = load_db(dir.path());
  std::string ok = "entity_id,timestamp,label\n";
  for (int i = 0; i < 10; ++i) ok += std::to_string(i % 3 + 1) + ",2020-0" + std::to_string(i % 9 + 1) + "-01," + std::to_string(i % 2) + "\n";
  std::istringstream in(ok);
  auto t = load_task_table(in, "drivers", db.graph);
  ASSERT_EQ(t.rows.size(), 10u);
  EXPECT_EQ(t.rows[4].node, 1u);
  EXPECT_EQ(t.rows[4].label, 0);

  auto expect_error = [&](const std::string& body, const std::string& needle) {
    std::istringstream s("entity_id,timestamp,label\n" + body);
    try {
      load_task_table(s, "drivers", db.graph);
      FAIL() << body;
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("1,2020-01-01,0\n2,2020-01-01,1\n3,2020-01-01,2\n", "task row 3");
  expect_error("7,2020-01-01,0\n", "unknown entity id '7'");
  expect_error("1,2020-02-30,0\n", "unparseable date");
  std::istringstream bad_header("id,timestamp,label\n");
  EXPECT_THROW(load_task_table(bad_header, "drivers", db.graph), Error);
  std::istringstream any("entity_id,timestamp,label\n");
  EXPECT_THROW(load_task_table(any, "pilots", db.graph), Error);
  EXPECT_THROW(load_task_table(dir / "none.csv", "drivers", db.graph), IoError);
}

TEST(Task, Splits) {
  HubTask h;
  EXPECT_TRUE(temporally_ordered(h.task));
  EXPECT_EQ(h.task.indices(Split::train).size(), 18u);
  EXPECT_EQ(h.task.indices(Split::validation).size(), 6u);
  EXPECT_EQ(h.task.indices(Split::test).size(), 6u);
  auto r = h.task;
  apply_random_split(r, 4);
  EXPECT_EQ(r.indices(Split::train).size(), 21u);
  EXPECT_EQ(r.indices(Split::validation).size(), 3u);
  auto again = h.task;
  apply_random_split(again, 4);
  for (std::size_t i = 0; i < r.rows.size(); ++i) EXPECT_EQ(r.rows[i].split, again.rows[i].split);
  auto m = task_manifest_from_json(nlohmann::json::parse(
      R"({"entity_table": "hubs", "time_split": {"val_start": "2020-01-19", "test_start": "2020-01-25"}})"));
  EXPECT_EQ(m.val_start, kDay0 + 18);
  EXPECT_EQ(task_manifest_from_json(task_manifest_to_json(m)).test_start, m.test_start);
  EXPECT_THROW(task_manifest_from_json(nlohmann::json::parse(
                   R"({"entity_table": "hubs", "time_split": {"val_start": "2020-03-01", "test_start": "2020-01-25"}})")),
               Error);
}

TEST(DateEncoder, Cases) {
  HubTask h;
  auto norm = fit_time_normalization(h.task);
  EXPECT_NEAR(norm.first, kDay0 + 8.5, 1e-9);
  auto m = init_model<double>(h.db.graph, 6, AdaptMode::finetune, nullptr, tiny_config(), norm);
  ASSERT_EQ(m.date.l1.W.shape(), (tensor::Shape{1, 4}));
  // biases start at zero, so the mean time encodes to zeros
  DateEncoder<double> at_mean = m.date;
  at_mean.mean = kDay0 + 8;
  for (double v : encode_date(at_mean, kDay0 + 8)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(encode_date(m.date, kDay0 + 3), encode_date(m.date, kDay0 + 3));

  DateEncoder<double> hand;
  hand.l1 = {tensor::Tensor<double>::matrix(1, 1, {2.0}), tensor::Tensor<double>::vector({0.5})};
  hand.l2 = {tensor::Tensor<double>::matrix(1, 1, {3.0}), tensor::Tensor<double>::vector({-1.0})};
  hand.mean = 100;
  hand.std = 4;
  EXPECT_DOUBLE_EQ(encode_date(hand, 108)[0], 3.0 * (2.0 * 2.0 + 0.5) - 1.0);
  EXPECT_DOUBLE_EQ(encode_date(hand, 90)[0], -1.0);

  TaskTable flat{"hubs", {{"h0", 0, kDay0, 1, Split::train}, {"h1", 1, kDay0, 0, Split::train}}};
  try {
    fit_time_normalization(flat);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate time range"), std::string::npos);
  }
}

TEST(Model, ZeroWeightsGiveHalf) {
  HubTask h;
  auto m = init_model<double>(h.db.graph, 6, AdaptMode::finetune, nullptr, tiny_config(), fit_time_normalization(h.task));
  for (auto& [name, t] : m.named_parameters())
    for (auto& v : t.data()) v = 0.0;
  auto p = predict(m, h.db.graph, h.feats, h.task.rows, tiny_config());
  for (double v : p) EXPECT_EQ(v, 0.5);
}

TEST(Model, EvalIsDeterministic) {
  HubTask h;
  auto cfg = tiny_config();
  auto m = init_model<float>(h.db.graph, 6, AdaptMode::finetune, nullptr, cfg, fit_time_normalization(h.task));
  std::vector<TaskRow> twice{h.task.rows[4], h.task.rows[4]};
  auto p = predict(m, h.db.graph, h.feats, twice, cfg);
  EXPECT_EQ(p[0], p[1]);
  EXPECT_EQ(predict(m, h.db.graph, h.feats, h.task.rows, cfg), predict(m, h.db.graph, h.feats, h.task.rows, cfg));
}

TEST(Model, FrozenConvsUnchanged) {
  HubTask h;
  auto cfg = tiny_config();
  const auto pre = gnn::init_params<float>({"src/a"}, 6, 8, 2, 77);
  const auto norm = fit_time_normalization(h.task);
  auto frozen = init_model<float>(h.db.graph, 6, AdaptMode::frozen, &pre, cfg, norm);
  auto conv_bytes = [](const auto& m) {
    std::vector<tensor::NamedArray> out;
    for (const auto& [name, t] : m.gnn->conv_parameters()) out.push_back(tensor::to_named(name, t));
    return tensor::encode_checkpoint(out);
  };
  std::vector<tensor::NamedArray> pre_conv;
  for (const auto& [name, t] : pre.conv_parameters()) pre_conv.push_back(tensor::to_named(name, t));
  const auto before = conv_bytes(frozen);
  EXPECT_EQ(before, tensor::encode_checkpoint(pre_conv));
  const auto proj_before = tensor::to_named("p", frozen.gnn->proj[0].W);
  train_downstream(frozen, h.db.graph, h.feats, h.task, cfg);
  EXPECT_EQ(conv_bytes(frozen), before);
  EXPECT_NE(tensor::to_named("p", frozen.gnn->proj[0].W), proj_before);

  auto tuned = init_model<float>(h.db.graph, 6, AdaptMode::finetune, &pre, cfg, norm);
  train_downstream(tuned, h.db.graph, h.feats, h.task, cfg);
  EXPECT_NE(conv_bytes(tuned), before);
  // the pretrained tensors themselves are never touched
  EXPECT_EQ(tensor::to_named("conv1.self.W", pre.convs[0].W_self), pre_conv[0]);
}

TEST(Model, IncompatibleEncoder) {
  HubTask h;
  auto cfg = tiny_config();
  const auto three = gnn::init_params<float>({"a"}, 6, 8, 3, 1);
  EXPECT_THROW(init_model<float>(h.db.graph, 6, AdaptMode::frozen, &three, cfg, {0.0, 1.0}), Error);
  auto m = init_model<float>(h.db.graph, 6, AdaptMode::no_gnn, nullptr, cfg, {0.0, 1.0});
  EXPECT_FALSE(m.gnn);
  EXPECT_EQ(m.head.front().W.rows(), 6u + 4u);
  auto narrow = random_features(h.db.graph, 5, 1);
  EXPECT_THROW(predict(m, h.db.graph, narrow, h.task.rows, cfg), Error);
}

TEST(Model, TemporalLeakageGuard) {
  HubTask h;
  auto cfg = tiny_config();
  cfg.fanout = gnn::FanoutSpec{{100, 100}};
  auto m = init_model<float>(h.db.graph, 6, AdaptMode::finetune, nullptr, cfg, fit_time_normalization(h.task));
  train_downstream(m, h.db.graph, h.feats, h.task, cfg);
  auto base = predict(m, h.db.graph, h.feats, h.task.rows, cfg);
  // spokes 30.. are dated after every seed time
  auto moved = h.feats;
  for (std::size_t r = 30; r < 60; ++r)
    for (std::size_t k = 0; k < 6; ++k) moved.blocks[1].values[r * 6 + k] = 50.0f;
  EXPECT_EQ(predict(m, h.db.graph, moved, h.task.rows, cfg), base);
  cfg.time_filter = false;
  EXPECT_NE(predict(m, h.db.graph, moved, h.task.rows, cfg), predict(m, h.db.graph, h.feats, h.task.rows, cfg));
}

TEST(Model, CheckpointRoundTrip) {
  HubTask h;
  auto cfg = tiny_config();
  const auto norm = fit_time_normalization(h.task);
  for (auto mode : {AdaptMode::no_gnn, AdaptMode::finetune}) {
    auto m = init_model<float>(h.db.graph, 6, mode, nullptr, cfg, norm);
    train_downstream(m, h.db.graph, h.feats, h.task, cfg);
    auto back = model_from_checkpoint<float>(model_to_checkpoint(m), h.db.graph, mode, norm);
    EXPECT_EQ(back.mode, mode);
    EXPECT_EQ(predict(back, h.db.graph, h.feats, h.task.rows, cfg), predict(m, h.db.graph, h.feats, h.task.rows, cfg));
  }
}

TEST(Training, BestValidationEpochKept) {
  HubTask h;
  auto cfg = tiny_config();
  cfg.epochs = 4;
  auto m = init_model<float>(h.db.graph, 6, AdaptMode::finetune, nullptr, cfg, fit_time_normalization(h.task));
  auto res = train_downstream(m, h.db.graph, h.feats, h.task, cfg);
  ASSERT_EQ(res.history.size(), 4u);
  ASSERT_GE(res.best_epoch, 1u);
  double best = 0;
  for (const auto& e : res.history) best = std::max(best, e.val_auc.value_or(0));
  EXPECT_EQ(*evaluate(m, h.db.graph, h.feats, h.task, Split::validation, cfg).roc_auc, best);
  TaskTable none = h.task;
  for (auto& r : none.rows) r.split = Split::test;
  EXPECT_THROW(train_downstream(m, h.db.graph, h.feats, none, cfg), Error);
}

TEST(Ablation, SixRowsAndStableCsv) {
  HubTask h;
  auto cfg = tiny_config();
  auto rnd = gen_random_embeddings(h.feats, 5);
  auto run = [&] {
    std::ostringstream out;
    write_metrics_csv(run_ablation(h.db.graph, h.feats, rnd, h.task, nullptr, cfg), out);
    return out.str();
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 7);
  EXPECT_NE(a.find("\ninformative+finetune,test,"), std::string::npos);
  EXPECT_NE(a.find("\nrandom+no_gnn,test,"), std::string::npos);
}

TEST(AdaptMode, Parse) {
  EXPECT_EQ(parse_adapt_mode("frozen"), AdaptMode::frozen);
  EXPECT_EQ(parse_adapt_mode("fine-tune"), AdaptMode::finetune);
  EXPECT_EQ(parse_adapt_mode("none"), AdaptMode::no_gnn);
  EXPECT_THROW(parse_adapt_mode("thawed"), Error);
}
