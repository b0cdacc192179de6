#include <gtest/gtest.h>

#include <atomic>

#include "descevo/descevo.hpp"
#include "support/memory_cases.hpp"
#include "support/runs.hpp"

using namespace descevo;

namespace {

std::string reply(const DescriptorSet& ds) { return "```json\n" + serialize_descriptor_set(ds) + "```"; }

DescriptorSet one_each(std::initializer_list<std::pair<const char*, const char*>> entries) {
  DescriptorSet ds;
  for (const auto& [cls, d] : entries) ds.set(ClassLabel(cls), {Descriptor(d)});
  return ds;
}

// Two orthogonal classes; "good" descriptors point at the class, "bad" ones at the other class.
struct TwoClass {
  std::vector<LabeledEmbedding> images{{ClassLabel("a"), "a0", {1, 0}}, {ClassLabel("b"), "b0", {0, 1}}};
  EmbeddingTable table{{"a, which good", {1, 0}}, {"a, which bad", {0, 1}}, {"b, which good", {0, 1}},
                       {"b, which bad", {1, 0}}, {"A photo of a a", {1, 0}}, {"A photo of a b", {0, 1}}};
};

}  // namespace

TEST(ParallelFor, VisitsEveryIndexAndRethrowsTheLowestFailure) {
  std::vector<std::atomic<int>> seen(100);
  parallel_for(100, 4, [&](std::size_t i) { seen[i]++; });
  for (auto& s : seen) EXPECT_EQ(s.load(), 1);
  try {
    parallel_for(50, 4, [](std::size_t i) {
      if (i == 7 || i == 30) throw std::runtime_error(std::to_string(i));
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "7");
  }
}

TEST(MemoryUpdate, PolarityTable) {
  for (const auto& k : memcase::cases()) {
    const auto inst = memcase::build(k);
    const std::vector<MemoryRecord> before{{ClassLabel("B"), Descriptor("b"), 1, Polarity::positive}};
    const auto after = update_memory(before, inst.prev, inst.next, inst.images, inst.table, {}, 5);
    ASSERT_EQ(after.size(), 3u) << k.name;
    EXPECT_EQ(after[0], before[0]) << k.name;
    const auto want = memcase::expected(k, 5);
    EXPECT_EQ(after[1], want[0]) << k.name;
    EXPECT_EQ(after[2], want[1]) << k.name;
  }
}

TEST(MemoryUpdate, UnchangedSetAddsNothing) {
  const auto inst = memcase::build(memcase::cases().front());
  EXPECT_TRUE(update_memory({}, inst.prev, inst.prev, inst.images, inst.table, {}, 1).empty());
  EXPECT_THROW(update_memory({}, inst.prev, one_each({{"A", "u"}}), inst.images, inst.table, {}, 1),
               PreconditionError);
}

TEST(Selection, TiesGoToTheFirstCandidate) {
  TwoClass w;
  const auto good = one_each({{"a", "good"}, {"b", "good"}});
  const auto bad = one_each({{"a", "bad"}, {"b", "bad"}});
  RunConfig c;
  std::vector<DescriptorSet> pool{bad, good, good};
  auto r = select_cluster(pool, w.images, w.table, c, bad);
  EXPECT_EQ(r.winner, 1u);
  ASSERT_EQ(r.feedback.size(), 3u);
  EXPECT_DOUBLE_EQ(fitness(r.feedback[2]), 1.0);
  std::vector<DescriptorSet> ties{bad, bad};
  EXPECT_EQ(select_cluster(ties, w.images, w.table, c, bad).winner, 0u);
  EXPECT_THROW(select_cluster({}, w.images, w.table, c, bad), PreconditionError);
}

TEST(Selection, ClusterScopeOnlySeesItsOwnImages) {
  TwoClass w;
  w.images.push_back({ClassLabel("c"), "c0", {1, 0}});
  w.table["c, which good"] = {0.6f, 0.8f};
  const auto current = one_each({{"a", "good"}, {"b", "good"}, {"c", "good"}});
  std::vector<DescriptorSet> pool{one_each({{"a", "good"}, {"b", "good"}})};

  RunConfig cluster;
  const auto scoped = evaluate_candidates(pool, w.images, w.table, cluster, current);
  EXPECT_DOUBLE_EQ(scoped[0].overall_accuracy, 1.0);
  EXPECT_EQ(scoped[0].per_class_accuracy.size(), 2u);

  RunConfig global;
  global.selection_scope = SelectionScope::global;
  const auto full = evaluate_candidates(pool, w.images, w.table, global, current);
  EXPECT_NEAR(full[0].overall_accuracy, 2.0 / 3.0, 1e-12);  // c0 goes to a

  std::vector<DescriptorSet> lonely{one_each({{"d", "x"}})};
  EXPECT_EQ(evaluate_candidates(lonely, w.images, w.table, cluster, current)[0].overall_accuracy, 0.0);
}

namespace {

struct Harness {
  TwoClass w;
  RunConfig config;
  TextEmbedder embedder;
  std::unique_ptr<FunctionProvider> llm;
  std::unique_ptr<Evolution> evo;
  RunState state;

  explicit Harness(FunctionProvider::Fn fn)
      : embedder(TextEmbedder::custom([t = w.table](std::span<const PromptRequest> prompts) {
          std::vector<Embedding> out;
          for (const auto& p : prompts) out.push_back(t.at(p.prompt));
          return out;
        })) {
    config.n_init = 1;
    config.n_change = 1;
    config.n_mutants = 3;
    llm = std::make_unique<FunctionProvider>(std::move(fn));
    evo = std::make_unique<Evolution>(config, *llm, embedder, w.images);
    state.current = one_each({{"a", "bad"}, {"b", "bad"}});
  }
};

}  // namespace

TEST(Mutation, UnusableVariantFallsBackToACopy) {
  const auto good = one_each({{"a", "good"}, {"b", "good"}});
  Harness h([&](const ChatRequest& r) { return r.tag.variant == 1 ? std::string("no idea") : reply(good); });
  const auto classes = make_labels({"a", "b"});
  const auto out = h.evo->mutate_cluster(h.state, classes, h.evo->evaluate(h.state.current));
  ASSERT_EQ(out.candidates.size(), 3u);
  EXPECT_EQ(out.candidates[0], good);
  EXPECT_EQ(out.candidates[1], h.state.current);
  EXPECT_EQ(out.fallback, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(out.warnings[1].size(), 2u);
  EXPECT_EQ(h.llm->usage().calls, 4u);  // the failing variant is asked twice
}

TEST(Mutation, AllVariantsUnusableIsAnIterationError) {
  Harness h([](const ChatRequest&) { return std::string("{\"a\": [\"x\"]}"); });  // b missing
  const auto classes = make_labels({"a", "b"});
  EXPECT_THROW(h.evo->mutate_cluster(h.state, classes, h.evo->evaluate(h.state.current)), IterationError);
}

TEST(Crossover, FallsBackToTheFittestMutant) {
  Harness h([](const ChatRequest&) { return std::string("later"); });
  const auto good = one_each({{"a", "good"}, {"b", "good"}});
  const auto bad = h.state.current;
  std::vector<ScoredCandidate> mutants{{bad, h.evo->evaluate(bad)}, {good, h.evo->evaluate(good)}, {bad, h.evo->evaluate(bad)}};
  const auto out = h.evo->crossover_cluster(mutants);
  EXPECT_TRUE(out.fallback);
  EXPECT_EQ(out.candidate, good);
  EXPECT_EQ(h.llm->usage().calls, 2u);
}

TEST(Crossover, UsesAParsableReply) {
  const auto good = one_each({{"a", "good"}, {"b", "good"}});
  Harness h([&](const ChatRequest& r) {
    EXPECT_EQ(r.tag.stage, Stage::crossover);
    return reply(good);
  });
  const auto bad = h.state.current;
  std::vector<ScoredCandidate> mutants{{bad, h.evo->evaluate(bad)}};
  const auto out = h.evo->crossover_cluster(mutants);
  EXPECT_FALSE(out.fallback);
  EXPECT_EQ(out.candidate, good);
}

TEST(Initialize, RetriesOnceThenFails) {
  std::atomic<int> calls{0};
  Harness h([&](const ChatRequest&) { return ++calls == 1 ? std::string("hmm") : reply(one_each({{"a", "good"}, {"b", "bad"}})); });
  const auto classes = make_labels({"a", "b"});
  const auto s = h.evo->initialize(classes);
  EXPECT_EQ(s.iteration, 0u);
  EXPECT_DOUBLE_EQ(s.global_best_fitness, 0.5);
  EXPECT_EQ(s.global_best, s.current);

  Harness broken([](const ChatRequest&) { return std::string("hmm"); });
  EXPECT_THROW(broken.evo->initialize(classes), ResponseError);
  EXPECT_EQ(broken.llm->usage().calls, 2u);
}

TEST(Initialize, RejectsBadClassLists) {
  Harness h([](const ChatRequest&) { return std::string(); });
  EXPECT_THROW(h.evo->initialize(make_labels({"a"})), DataError);  // images of b
  EXPECT_THROW(h.evo->initialize(make_labels({"a", "b", "a"})), DataError);
  EXPECT_THROW(h.evo->initialize(std::vector<ClassLabel>{}), DataError);
}

TEST(Checkpoint, RoundTripAndLatestWins) {
  const auto dir = simrun::fresh_dir("checkpoints");
  EXPECT_FALSE(load_latest_checkpoint(dir).has_value());
  RunState s;
  s.current = one_each({{"a", "x"}});
  s.global_best = s.current;
  s.global_best_fitness = 0.25;
  s.memory = {{ClassLabel("a"), Descriptor("y"), 1, Polarity::negative}};
  s.rng_seed = 0xFFFFFFFFFFFFFFFFULL;
  s.clusters = ClusterAssignment{{make_labels({"a"})}};
  for (std::size_t i : {2u, 10u, 9u}) {
    s.iteration = i;
    save_checkpoint(s, dir);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint-0010.json"));
  const auto back = load_latest_checkpoint(dir);
  ASSERT_TRUE(back.has_value());
  s.iteration = 10;
  EXPECT_EQ(*back, s);
  write_text_file(dir / "checkpoint-0011.json", "{");
  EXPECT_THROW(load_latest_checkpoint(dir), DataError);
}

TEST(Run, ZeroIterationsOnlyInitializes) {
  const auto world = synthetic::make_world(3, 16, 0.3, 5, 1);
  auto config = simrun::small_config(0, 4);
  const auto dir = simrun::fresh_dir("zero-iterations");
  const auto out = simrun::run(world, simrun::behavior_for(config, 4), config, {dir / "ckpt", dir / "log.jsonl"});
  ASSERT_EQ(out.result.reports.size(), 1u);
  EXPECT_EQ(out.result.state.iteration, 0u);
  EXPECT_EQ(std::count(out.log.begin(), out.log.end(), '\n'), 1);
  EXPECT_FALSE(std::filesystem::exists(dir / "ckpt"));
}

TEST(Run, GlobalBestNeverDecreasesAndMatchesItsFitness) {
  const auto world = synthetic::make_world(5, 32, 0.3, 8, 2);
  auto config = simrun::small_config(6, 11);
  auto behavior = simrun::behavior_for(config, 11);
  behavior.p_mimic = 0.3;
  const auto out = simrun::run(world, behavior, config);
  ASSERT_EQ(out.result.reports.size(), 7u);
  double best = -1.0;
  for (const auto& r : out.result.reports) {
    EXPECT_GE(r.global_best_fitness, best);
    EXPECT_GE(r.global_best_fitness, r.fitness);
    best = r.global_best_fitness;
  }
  auto embedder = synthetic::planted_embedder(world.dim);
  embedder.ensure(prompts_for(out.result.state.global_best, {}));
  EXPECT_DOUBLE_EQ(fitness(evaluate_feedback(world.images, out.result.state.global_best, embedder.table(), 0.9, 3, {})),
                   out.result.state.global_best_fitness);
}

TEST(Run, ReportsDescribeEveryCluster) {
  const auto world = synthetic::make_world(5, 16, 0.3, 4, 3);
  const auto config = simrun::small_config(1, 5);
  const auto out = simrun::run(world, simrun::behavior_for(config, 5), config);
  const auto& r = out.result.reports.back();
  ASSERT_EQ(r.selection.size(), r.clusters.k());
  EXPECT_EQ(r.clusters.k(), 3u);  // 5 classes, target size 2
  for (const auto& c : r.selection) {
    ASSERT_EQ(c.candidates.size(), 5u);
    EXPECT_EQ(c.candidates.back().origin, "crossover");
    for (const auto& cand : c.candidates) EXPECT_LE(cand.fitness, c.candidates[c.winner].fitness);
  }
  const auto j = json(r);
  for (const char* key : {"iteration", "fitness", "global_best_fitness", "feedback", "clusters", "selection", "memory", "usage"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
}

TEST(Run, ThreadCountDoesNotChangeResults) {
  const auto world = synthetic::make_world(5, 16, 0.3, 6, 4);
  const auto serial = simrun::run(world, simrun::behavior_for(simrun::small_config(3, 8), 8), simrun::small_config(3, 8, 1));
  const auto parallel = simrun::run(world, simrun::behavior_for(simrun::small_config(3, 8), 8), simrun::small_config(3, 8, 4));
  EXPECT_EQ(serial.result.state, parallel.result.state);
  ASSERT_EQ(serial.result.reports.size(), parallel.result.reports.size());
  for (std::size_t i = 0; i < serial.result.reports.size(); ++i) {
    EXPECT_EQ(json(serial.result.reports[i]), json(parallel.result.reports[i]));
  }
}

TEST(Run, ResumeContinuesWhereACheckpointLeftOff) {
  const auto world = synthetic::make_world(4, 16, 0.3, 5, 6);
  const auto behavior = simrun::behavior_for(simrun::small_config(4, 3), 3);

  const auto straight_dir = simrun::fresh_dir("resume-straight");
  const auto straight = simrun::run(world, behavior, simrun::small_config(4, 3),
                                    {straight_dir / "ckpt", straight_dir / "log.jsonl"});

  const auto dir = simrun::fresh_dir("resume-split");
  const RunPaths paths{dir / "ckpt", dir / "log.jsonl"};
  simrun::run(world, behavior, simrun::small_config(4, 3), paths);
  // pretend the run died after iteration 2
  std::filesystem::remove(checkpoint_path(paths.checkpoint_dir, 3));
  std::filesystem::remove(checkpoint_path(paths.checkpoint_dir, 4));
  const auto resumed = simrun::run(world, behavior, simrun::small_config(4, 3), paths, /*resume=*/true);

  EXPECT_EQ(resumed.result.state, straight.result.state);
  ASSERT_EQ(resumed.result.reports.size(), 2u);
  EXPECT_EQ(resumed.result.reports.front().iteration, 3u);

  // usage counters restart with the new process, everything else matches
  auto strip = [](const std::string& log) {
    std::string out;
    std::istringstream in(log);
    for (std::string line; std::getline(in, line);) {
      auto j = json::parse(line);
      j.erase("usage");
      out += j.dump() + "\n";
    }
    return out;
  };
  EXPECT_EQ(strip(resumed.log), strip(straight.log));

  auto other = world.classes;
  other.pop_back();
  EXPECT_THROW(simrun::run(synthetic::World{other, world.dim, simrun::images_of_classes(world, other)}, behavior,
                           simrun::small_config(4, 3), paths, true),
               ConfigError);
}
