#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/data/loaders.hpp"
#include "tscil/methods/generative.hpp"
#include "tscil/methods/replay.hpp"

using namespace tscil;
using namespace tscil::methods;

namespace {

struct Fixture {
  data::TaskStream stream;
  model::BackboneConfig backbone;
  train::TrainConfig cfg;

  explicit Fixture(int epochs = 3) {
    const auto raw = data::make_synthetic(tscil::testing::small_synthetic(1));
    stream = data::make_task_stream(raw, 2, 5);
    backbone.in_channels = raw.channels;
    backbone.length = raw.length;
    backbone.filters = {8, 16};
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.patience = epochs;
    cfg.seed = 11;
  }

  model::Model fresh() const { return model::Model::build(backbone, {}, 4); }
};

}  // namespace

TEST(Assembly, KnownKinds) {
  EXPECT_TRUE(method_assembly("der").capture_logits);
  EXPECT_EQ(method_assembly("aser").retrieval, RetrievalPolicy::aser);
  EXPECT_EQ(method_assembly("herding").update, UpdatePolicy::herding);
  EXPECT_EQ(method_assembly("er_subject_balanced").retrieval, RetrievalPolicy::subject_balanced);
  EXPECT_EQ(method_assembly("er_subject_restricted").update, UpdatePolicy::subject_restricted);
  EXPECT_TRUE(is_replay_kind("clops"));
  EXPECT_FALSE(is_replay_kind("lwf"));
  EXPECT_THROW(method_assembly("icarl2"), ConfigError);
}

TEST(Der, LossMatchesHandValue) {
  auto logits = ag::parameter(Tensor({2, 3}, {1.0, 2.0, 3.0, 0.0, 0.0, 0.0}));
  const std::vector<double> a{0.0, 2.0}, b{1.0, 1.0, 1.0};
  // Sample 0 compares its first two columns: ((1-0)^2 + 0) / 2 = 0.5; sample 1: 1.
  const double v = der_loss(logits, {&a, &b}, 0.5)->value[0];
  EXPECT_NEAR(v, 0.5 * (0.5 + 1.0) / 2.0, 1e-12);
  EXPECT_LT(tscil::testing::grad_check([&](const std::vector<ag::Var>& p) { return der_loss(p[0], {&a, &b}, 0.5); },
                                       {logits}),
            1e-6);
}

TEST(Replay, ZeroBudgetErIsNaive) {
  Fixture f;
  auto m1 = f.fresh(), m2 = f.fresh();
  train::NaivePlugin naive;
  ReplayParams p;
  p.capacity = 0;
  p.seed = 3;
  ReplayPlugin er(method_assembly("er"), p);
  const auto a = train::run_stream(f.stream, m1, naive, f.cfg);
  const auto b = train::run_stream(f.stream, m2, er, f.cfg);
  ASSERT_EQ(a.tasks.size(), b.tasks.size());
  for (std::size_t t = 0; t < a.tasks.size(); ++t) EXPECT_EQ(a.tasks[t].step_losses, b.tasks[t].step_losses);
  EXPECT_EQ(a.matrix.to_csv(), b.matrix.to_csv());
}

TEST(Replay, SameSeedSameMatrix) {
  Fixture f;
  ReplayParams p;
  p.capacity = 20;
  p.seed = 7;
  auto run = [&] {
    auto m = f.fresh();
    ReplayPlugin er(method_assembly("er"), p);
    return train::run_stream(f.stream, m, er, f.cfg).matrix.to_csv();
  };
  EXPECT_EQ(run(), run());
}

TEST(Replay, BufferRespectsCapacityAndSubjects) {
  Fixture f;
  ReplayParams p;
  p.capacity = 12;
  p.seed = 2;
  ReplayPlugin restricted(method_assembly("er_subject_restricted"), p);
  auto m = f.fresh();
  train::run_stream(f.stream, m, restricted, f.cfg);
  EXPECT_LE(restricted.buffer().size(), 12u);
  EXPECT_EQ(restricted.allowed_subjects().size(), 2u);
  for (const auto& e : restricted.buffer().entries()) EXPECT_TRUE(restricted.allowed_subjects().count(*e.sample->subject));

  ReplayParams q = p;
  ReplayPlugin der(method_assembly("der"), q);
  auto m2 = f.fresh();
  train::run_stream(f.stream, m2, der, f.cfg);
  for (const auto& e : der.buffer().entries()) EXPECT_TRUE(e.stored_logits.has_value());
}

TEST(Replay, QuotaPoliciesBalanceClasses) {
  Fixture f;
  ReplayParams p;
  p.capacity = 12;
  for (const char* kind : {"herding", "fasticarl", "clops"}) {
    ReplayPlugin plugin(method_assembly(kind), p);
    auto m = f.fresh();
    train::run_stream(f.stream, m, plugin, f.cfg);
    std::map<int, std::size_t> per;
    for (const auto& e : plugin.buffer().entries()) ++per[e.sample->label];
    EXPECT_EQ(per.size(), 6u) << kind;
    for (const auto& [c, n] : per) EXPECT_EQ(n, 2u) << kind;
  }
}

TEST(Replay, NcmPrototypesAreBufferMeans) {
  Fixture f;
  auto bb = f.backbone;
  bb.head = model::HeadKind::ncm;
  auto m = model::Model::build(bb, {0, 1}, 1);
  memory::MemoryBuffer buf(10);
  Rng rng(1);
  std::vector<data::SamplePtr> xs;
  for (const auto& s : f.stream.tasks[0].train)
    if (s->label == 0 || s->label == 1) xs.push_back(s);
  xs.resize(10);
  buf.reservoir_update(xs, rng);
  update_ncm_prototypes(m, buf);
  const auto pred = m.predict(data::to_batch(xs));
  EXPECT_EQ(pred.size(), xs.size());
}

TEST(Replay, ErForgetsLessThanNaive) {
  Fixture f(8);
  train::NaivePlugin naive;
  ReplayParams p;
  p.capacity = 30;
  p.seed = 1;
  ReplayPlugin er(method_assembly("er"), p);
  auto m1 = f.fresh(), m2 = f.fresh();
  const auto a = eval::compute_metrics(train::run_stream(f.stream, m1, naive, f.cfg).matrix);
  const auto b = eval::compute_metrics(train::run_stream(f.stream, m2, er, f.cfg).matrix);
  EXPECT_GT(b.A_T, a.A_T);
  EXPECT_LT(*b.F_T, *a.F_T);
}

TEST(GenerativeReplay, UsesOnlyThePreviousFrozenPair) {
  Fixture f(2);
  GrParams p;
  p.vae.widths = {4, 8};
  p.vae.latent = 4;
  p.vae.epochs = 2;
  p.seed = 5;
  p.sheet_dir = std::filesystem::temp_directory_path() / "tscil_gr_sheets";
  std::filesystem::remove_all(*p.sheet_dir);
  GrPlugin gr(p, f.backbone.in_channels, f.backbone.length);
  EXPECT_EQ(gr.replay_slots(16), 0u);
  auto m = f.fresh();
  train::run_stream(f.stream, m, gr, f.cfg);
  ASSERT_FALSE(gr.replay_audit().empty());
  for (const auto& [task, frozen] : gr.replay_audit()) {
    EXPECT_GE(task, 1u);
    EXPECT_EQ(frozen + 1, task);
  }
  EXPECT_EQ(*gr.frozen_task(), f.stream.size() - 1);
  EXPECT_TRUE(std::filesystem::exists(*p.sheet_dir / "gr_samples_task1.svg"));
  std::filesystem::remove_all(*p.sheet_dir);
}
