#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "effiseg/trainer.hpp"
#include "support/synthetic.hpp"

using namespace effiseg;

namespace {

ModelConfig small_config(std::uint64_t seed = 0, Index size = 32) {
  ModelConfig cfg;
  cfg.reduce_channels = 8;
  cfg.se_ratio = 4;
  cfg.decoder_out_channels = 8;
  cfg.input_h = cfg.input_w = size;
  cfg.seed = seed;
  cfg.encoder.seed = seed;
  return cfg;
}

std::vector<Sample> synthetic_set(const std::string& source, int count, int size, std::uint64_t seed) {
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) out.push_back(synthetic::make_sample(source, i, size, size, seed));
  return out;
}

// Plain scalar Adam, written out step by step.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

struct OneParam {
  Var<double> w = Var<double>::parameter(Tensor4<double>(Shape4{}, 0.7));
  ParameterRegistry<double> reg;
  OneParam() { reg.add("w", w); }
  void set_grad(double g) { w.grad().data()[0] = g; }
  double value() const { return w.value().data()[0]; }
};

}  // namespace

TEST_CASE("adam matches a scalar oracle") {
  for (double g : {0.3, -2.5, 1e-4}) {
    OneParam p;
    AdamState<double> st;
    ScalarAdam oracle;
    double expected = 0.7;
    for (int k = 0; k < 3; ++k) {
      p.set_grad(g);
      adam_step(p.reg, st, 0.01);
      expected = oracle.step(expected, g, 0.01);
      CHECK(std::abs(p.value() - expected) < 1e-12);
    }
    CHECK(st.step == 3);
    CHECK(std::abs(st.m[0][0] - oracle.m) < 1e-15);
    CHECK(std::abs(st.v[0][0] - oracle.v) < 1e-15);
  }
}

TEST_CASE("adam edge cases") {
  SUBCASE("zero gradient leaves parameters and decays moments") {
    OneParam p;
    AdamState<double> st;
    p.set_grad(1.0);
    adam_step(p.reg, st, 0.01);
    const double after_first = p.value();
    const double m1 = st.m[0][0], v1 = st.v[0][0];
    p.set_grad(0.0);
    adam_step(p.reg, st, 0.0);
    CHECK(p.value() == after_first);
    CHECK(st.m[0][0] == doctest::Approx(0.9 * m1).epsilon(1e-15));
    CHECK(st.v[0][0] == doctest::Approx(0.999 * v1).epsilon(1e-15));
  }
  SUBCASE("zero gradient from the start keeps the parameter") {
    OneParam p;
    AdamState<double> st;
    p.set_grad(0.0);
    for (int k = 0; k < 3; ++k) adam_step(p.reg, st, 0.1);
    CHECK(p.value() == 0.7);
  }
  SUBCASE("lr = 0 freezes parameters") {
    OneParam p;
    AdamState<double> st;
    for (double g : {5.0, -3.0, 100.0}) {
      p.set_grad(g);
      adam_step(p.reg, st, 0.0);
    }
    CHECK(p.value() == 0.7);
  }
  SUBCASE("frozen parameters are skipped") {
    OneParam p;
    p.set_grad(1.0);
    p.w.set_requires_grad(false);
    AdamState<double> st;
    adam_step(p.reg, st, 0.1);
    CHECK(p.value() == 0.7);
  }
}

TEST_CASE("early stopping rule") {
  SUBCASE("patience 1 with worsening loss stops after epoch 2") {
    EarlyStopping es(1);
    CHECK(es.record(1, 0.5));
    CHECK_FALSE(es.should_stop());
    CHECK_FALSE(es.record(2, 0.6));
    CHECK(es.should_stop());
    CHECK(es.best_epoch() == 1);
  }
  SUBCASE("improvement resets the counter") {
    EarlyStopping es(2);
    es.record(1, 1.0);
    es.record(2, 1.1);
    CHECK_FALSE(es.should_stop());
    es.record(3, 0.9);
    es.record(4, 0.95);
    CHECK_FALSE(es.should_stop());
    es.record(5, 0.92);
    CHECK(es.should_stop());
    CHECK(es.best_epoch() == 3);
    CHECK(es.best_loss() == 0.9);
  }
  CHECK_THROWS_AS(EarlyStopping(0), ConfigError);
}

TEST_CASE("train config") {
  TrainConfig c;
  CHECK(c.epochs == 40);
  CHECK(c.batch_size == 4);
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.patience == 7);
  CHECK_NOTHROW(c.validate());
  const std::vector<std::function<void(TrainConfig&)>> breakers{
      [](TrainConfig& t) { t.epochs = 0; }, [](TrainConfig& t) { t.batch_size = 0; },
      [](TrainConfig& t) { t.learning_rate = 0; }, [](TrainConfig& t) { t.patience = 0; }};
  for (const auto& bad : breakers) {
    TrainConfig t;
    bad(t);
    CHECK_THROWS_AS(t.validate(), ConfigError);
  }
  TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  CHECK(back == c);
  try {
    nlohmann::json{{"epochs", 3}, {"lr", 0.1}}.get<TrainConfig>();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.lr") != std::string::npos);
  }
}

TEST_CASE("training is reproducible and keeps the best epoch") {
  const auto train_set = synthetic_set("train", 6, 40, 1);
  const auto val_set = synthetic_set("val", 3, 40, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.seed = 17;
  cfg.checkpoint_dir.clear();

  auto run = [&] {
    PolypSegNet<float> model(small_config(4));
    return train(model, train_set, val_set, cfg);
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.history.size() == 3);
  CHECK(history_csv(a.history) == history_csv(b.history));
  CHECK(a.checkpoint.empty());

  SUBCASE("best checkpoint has the lowest validation loss and is restored") {
    cfg.checkpoint_dir = synthetic::fresh_dir("test_trainer_ckpt");
    PolypSegNet<float> model(small_config(4));
    std::vector<int> batches;
    const auto r = train(model, train_set, val_set, cfg,
                         {[&](int, int batch, double) { batches.push_back(batch); }, nullptr});
    CHECK(batches == std::vector<int>{1, 2, 1, 2, 1, 2});
    CHECK(history_csv(r.history) == history_csv(a.history));
    double lowest = 1e300;
    for (const auto& e : r.history) lowest = std::min(lowest, e.val_loss);
    CHECK(r.best_val_loss == lowest);
    CHECK(r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_loss == lowest);

    std::ifstream csv(cfg.checkpoint_dir / "history.csv");
    std::stringstream text;
    text << csv.rdbuf();
    CHECK(text.str() == history_csv(r.history));

    TrainStepper<float> probe(model, cfg);
    CHECK(validate_model(probe, detail::fit_to(val_set, 32, 32), 4).first == doctest::Approx(lowest).epsilon(1e-12));
    CheckpointInfo info;
    auto reloaded = load_checkpoint<float>(r.checkpoint, &info);
    CHECK(info.epoch == r.best_epoch);
    CHECK(checksum(reloaded.registry()) == checksum(model.registry()));
  }
}

TEST_CASE("early stopping inside train") {
  const auto train_set = synthetic_set("train", 4, 32, 1);
  const auto val_set = synthetic_set("val", 2, 32, 2);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.patience = 1;
  cfg.learning_rate = 0.05;  // large enough that validation loss soon stops improving
  cfg.checkpoint_dir.clear();
  PolypSegNet<float> model(small_config(5));
  const auto r = train(model, train_set, val_set, cfg);
  CHECK(r.history.size() <= 40);
  CHECK(r.stopped_early);
  CHECK(static_cast<int>(r.history.size()) == r.best_epoch + 1);
}

TEST_CASE("non-finite values abort with the epoch and batch") {
  const auto train_set = synthetic_set("train", 4, 32, 1);
  const auto val_set = synthetic_set("val", 2, 32, 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.checkpoint_dir.clear();
  PolypSegNet<float> model(small_config(6));
  for (auto& p : model.registry().parameters) {
    if (p.name == "head.bias") p.var->value().data()[0] = std::numeric_limits<float>::quiet_NaN();
  }
  try {
    train(model, train_set, val_set, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CAPTURE(msg);
    CHECK(msg.find("epoch 1, batch 1") != std::string::npos);
  }
  CHECK_THROWS_AS(train(model, {}, val_set, cfg), DatasetError);
}

TEST_CASE("overfit smoke test") {
  // Four images, full-batch steps, reduced decoder widths at 64x64.
  std::vector<Sample> set;
  const int size = 64;
  for (int i = 0; i < 4; ++i) set.push_back(synthetic::make_sample("smoke", i, size, size, 21));
  Tensor4<float> x, y;
  make_batch(set, {0, 1, 2, 3}, x, y);

  PolypSegNet<float> model(small_config(21, size));
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  TrainStepper<float> stepper(model, cfg);
  const auto before = detail::snapshot(model.registry());

  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) losses.push_back(stepper.step(x, y));
  for (int k = 1; k < 20; ++k) {
    CAPTURE(k);
    CHECK(losses[static_cast<std::size_t>(k)] < losses[static_cast<std::size_t>(k - 1)] + 1e-6);
  }

  // Every block (encoder stage, decoder component, head) has updated weights,
  // so gradients reached it. Individual tensors may legitimately stay put when
  // a narrow SE bottleneck has no active ReLU unit.
  auto block_of = [](const std::string& name) {
    std::size_t cut = 0;
    for (int dots = 0; dots < 3 && cut != std::string::npos; ++dots) cut = name.find('.', cut ? cut + 1 : 0);
    return name.substr(0, cut);
  };
  std::map<std::string, bool> moved;
  auto reg = model.registry();
  for (std::size_t i = 0; i < reg.parameters.size(); ++i) {
    bool& m = moved[block_of(reg.parameters[i].name)];
    m = m || (reg.parameters[i].var->value().array() != before[i].array()).any();
  }
  CHECK(moved.size() > 10);
  for (const auto& [block, changed] : moved) {
    CAPTURE(block);
    CHECK(changed);
  }

  const auto [loss, dice_sum] = stepper.measure(x, y);
  MESSAGE("smoke: first loss " << losses.front() << ", last " << losses.back() << ", eval loss " << loss
                               << ", mean Dice " << dice_sum / 4);
  CHECK(dice_sum / 4 >= 0.95);
}
