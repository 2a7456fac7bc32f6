#include <gtest/gtest.h>

#include <cstdlib>

#include "relfm/cli.hpp"
#include "support.hpp"

using namespace relfm;
using namespace relfm::testing;

namespace {

int run(std::vector<std::string> args) {
  ::setenv("RELFM_LOG", "error", 1);
  args.insert(args.begin(), "relfm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}), 1);
  EXPECT_EQ(run({"frobnicate"}), 1);
  EXPECT_EQ(run({"build-graph", "--out", "x"}), 1);
  EXPECT_EQ(run({"--help"}), 0);
}

TEST(Cli, IoAndValidationExitCodes) {
  TempDir dir;
  EXPECT_EQ(run({"build-graph", "--schema", (dir / "missing.json").string(), "--out", (dir / "g.rgph").string()}), 2);
  write_toy_db(dir.path());
  auto j = nlohmann::json::parse(kToySchema);
  j["tables"][2]["foreign_keys"][0]["references"] = "pilots";
  write_text(dir / "bad.json", j.dump());
  EXPECT_EQ(run({"build-graph", "--schema", (dir / "bad.json").string(), "--out", (dir / "g.rgph").string()}), 1);
  write_text(dir / "results.csv", "resultId,driverId,raceId,points\n100,1,10,25\n101,9,10,1\n");
  EXPECT_EQ(run({"build-graph", "--schema", (dir / "schema.json").string(), "--out", (dir / "g.rgph").string(),
                 "--strict"}),
            1);
  EXPECT_EQ(run({"build-graph", "--schema", (dir / "schema.json").string(), "--out", (dir / "g.rgph").string()}), 0);
  EXPECT_EQ(run({"encode", "--schema", (dir / "schema.json").string(), "--validate", (dir / "none.remb").string()}), 2);
}

TEST(Cli, SynthThenBuildGraph) {
  TempDir dir;
  const auto db = (dir / "db").string();
  ASSERT_EQ(run({"synth", "--out", db, "--tables", "3", "--rows", "50", "--seed", "2"}), 0);
  EXPECT_TRUE(fs::exists(dir / "db" / "task.csv"));
  ASSERT_EQ(run({"build-graph", "--schema", db + "/schema.json", "--out", (dir / "g.rgph").string(), "--dump-edges",
                 (dir / "edges.txt").string()}),
            0);
  auto g = read_graph(dir / "g.rgph");
  EXPECT_EQ(g.num_nodes(), 150u);
  EXPECT_EQ(g.num_edges(), 200u);
  auto edges = read_text(dir / "edges.txt");
  EXPECT_EQ(static_cast<std::size_t>(std::count(edges.begin(), edges.end(), '\n')), 200u);
}

TEST(Cli, LinearizeAndEncode) {
  TempDir dir;
  write_toy_db(dir.path());
  const auto schema = (dir / "schema.json").string();
  ASSERT_EQ(run({"linearize", "--schema", schema, "--out", (dir / "corpus").string(), "--seed", "4"}), 0);
  EXPECT_TRUE(fs::exists(dir / "corpus" / "train.txt"));
  ASSERT_EQ(run({"encode", "--schema", schema, "--out", (dir / "h.remb").string(), "--dim", "32"}), 0);
  EXPECT_EQ(run({"encode", "--schema", schema, "--validate", (dir / "h.remb").string()}), 0);
  ASSERT_EQ(run({"encode", "--schema", schema, "--out", (dir / "r.remb").string(), "--method", "random",
                 "--reference", (dir / "h.remb").string()}),
            0);
  EXPECT_EQ(load_embedding_file(dir / "r.remb").dim, 32u);
  ASSERT_EQ(run({"encode", "--schema", schema, "--out", (dir / "p.remb").string(), "--method", "projected", "--dim",
                 "32", "--rank", "4"}),
            0);
  EXPECT_EQ(load_embedding_file(dir / "p.remb").dim, 32u);
  EXPECT_EQ(run({"encode", "--schema", schema, "--out", (dir / "q.remb").string(), "--method", "projected", "--dim",
                 "8", "--rank", "9"}),
            1);
  EXPECT_EQ(run({"encode", "--schema", schema, "--method", "bogus", "--out", (dir / "x.remb").string()}), 1);
}

TEST(Cli, PretrainAdaptEvalAblate) {
  TempDir dir;
  auto p = [&](const std::string& s) { return (dir / s).string(); };
  for (std::string name : {"a", "b", "c"}) {
    ASSERT_EQ(run({"synth", "--out", p(name), "--tables", "3", "--rows", "80", "--entity-rows", "30", "--seed",
                   name == "a" ? "1" : (name == "b" ? "2" : "3")}),
              0);
    ASSERT_EQ(run({"build-graph", "--schema", p(name + "/schema.json"), "--out", p(name + ".rgph")}), 0);
    ASSERT_EQ(run({"encode", "--schema", p(name + "/schema.json"), "--out", p(name + ".remb"), "--dim", "16"}), 0);
  }
  write_text(dir / "pt.json", R"({"hidden_channels": 8, "fanout": [4, 2], "batch_size": 32, "epochs": 2, "lr": 0.01})");
  ASSERT_EQ(run({"pretrain", "--config", p("pt.json"), "--graphs", p("a.rgph") + "," + p("b.rgph"), "--features",
                 p("a.remb") + "," + p("b.remb"), "--out", p("pre"), "--deterministic"}),
            0);
  EXPECT_TRUE(fs::exists(dir / "pre" / "model.rfmp"));
  EXPECT_TRUE(fs::exists(dir / "pre" / "checkpoints" / "epoch_2.rfmp"));
  auto hist = read_text(dir / "pre" / "loss_history.csv");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 5);

  const std::vector<std::string> task{"--graph",         p("c.rgph"),          "--features", p("c.remb"),
                                      "--task",          p("c/task.csv"),      "--task-manifest",
                                      p("c/task.json"),  "--epochs",           "2",
                                      "--fanout",        "4,2",                "--head",
                                      "8,4",             "--date-dim",         "4"};
  auto with = [&](std::vector<std::string> head, std::vector<std::string> tail = {}) {
    head.insert(head.end(), task.begin(), task.end());
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  };
  ASSERT_EQ(run(with({"adapt", "--mode", "frozen", "--checkpoint", p("pre/model.rfmp"), "--out", p("ad")})), 0);
  auto metrics = read_text(dir / "ad" / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "config,split,roc_auc,precision,accuracy,f1");
  ASSERT_EQ(run(with({"eval", "--model", p("ad/model.rfmp"), "--out", p("ev.csv")})), 0);
  auto ev = read_text(dir / "ev.csv");
  EXPECT_EQ(std::count(ev.begin(), ev.end(), '\n'), 4);
  ASSERT_EQ(run(with({"ablate", "--checkpoint", p("pre/model.rfmp"), "--out", p("ab.csv")})), 0);
  auto ab = read_text(dir / "ab.csv");
  EXPECT_EQ(std::count(ab.begin(), ab.end(), '\n'), 7);
  EXPECT_EQ(run(with({"adapt", "--mode", "sideways", "--out", p("x")})), 1);
  EXPECT_EQ(run(with({"adapt", "--mode", "frozen", "--checkpoint", p("nothing.rfmp"), "--out", p("x")})), 2);
}
