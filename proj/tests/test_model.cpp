#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "effiseg/model.hpp"
#include "support/oracles.hpp"

using namespace effiseg;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "effiseg_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

ModelConfig small_config(std::uint64_t seed = 0) {
  ModelConfig cfg;
  cfg.reduce_channels = 8;
  cfg.se_ratio = 4;
  cfg.decoder_out_channels = 8;
  cfg.input_h = cfg.input_w = 32;
  cfg.seed = seed;
  cfg.encoder.seed = seed;
  return cfg;
}

template <typename Scalar>
std::uint64_t output_hash(const Tensor4<Scalar>& t) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), sizeof(Scalar) * t.size()));
}

const AuditRow& row(const ParameterAudit& a, const std::string& name) {
  for (const auto& r : a.per_component)
    if (r.name == name) return r;
  throw std::runtime_error("no audit row " + name);
}

}  // namespace

TEST_CASE("default model maps images to probability maps of the same size") {
  PolypSegNet<float> model(ModelConfig{});
  Rng rng(1);
  auto y1 = model.predict(oracle::random_tensor<float>({1, 3, 224, 224}, rng, -2, 2));
  CHECK(y1.shape() == Shape4{1, 1, 224, 224});
  auto y4 = model.predict(oracle::random_tensor<float>({4, 3, 224, 224}, rng, -2, 2));
  CHECK(y4.shape() == Shape4{4, 1, 224, 224});
  CHECK((y4.array() > 0.0f).all());
  CHECK((y4.array() < 1.0f).all());
  auto y352 = model.predict(oracle::random_tensor<float>({1, 3, 352, 352}, rng, -2, 2));
  CHECK(y352.shape() == Shape4{1, 1, 352, 352});
  CHECK((y352.array() > 0.0f).all());
  CHECK((y352.array() < 1.0f).all());
  CHECK_THROWS_AS(model.predict(Tensor4<float>({1, 3, 100, 96})), ShapeError);
}

TEST_CASE("training-mode forward also yields probabilities") {
  PolypSegNet<float> model(small_config(2));
  Rng rng(2);
  auto y = model.forward(Var<float>::constant(oracle::random_tensor<float>({2, 3, 64, 64}, rng)), Mode::Train);
  CHECK(y.shape() == Shape4{2, 1, 64, 64});
  CHECK((y.value().array() > 0.0f).all());
  CHECK((y.value().array() < 1.0f).all());
}

TEST_CASE("identical seeds give identical parameters and outputs") {
  PolypSegNet<float> a(small_config(5));
  PolypSegNet<float> b(small_config(5));
  PolypSegNet<float> c(small_config(6));
  CHECK(checksum(a.registry()) == checksum(b.registry()));
  CHECK(checksum(a.registry()) != checksum(c.registry()));
  Rng rng(3);
  const auto x = oracle::random_tensor<float>({1, 3, 64, 64}, rng);
  const auto h = output_hash(a.predict(x));
  CHECK(h == output_hash(a.predict(x)));
  CHECK(h == output_hash(b.predict(x)));
  CHECK(h != output_hash(c.predict(x)));
}

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.reduce_channels = 60;  // not divisible by 16
  CHECK_THROWS_AS(PolypSegNet<float>{cfg}, ConfigError);
  cfg = ModelConfig{};
  cfg.input_h = 200;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.encoder.truncation = "block5c";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("decoder consumes only the retained encoder scales") {
  std::set<std::string> available{"f3", "f4", "f5"};
  for (const auto& node : kDecoderTopology) {
    std::set<Index> strides;
    for (const auto& edge : node.inputs) {
      CHECK(available.count(edge.source) == 1);
      strides.insert(edge.source_stride);
    }
    // Full-scale: one contribution from each of strides 8, 16 and 32.
    CHECK(strides == std::set<Index>{8, 16, 32});
    available.insert(node.name);
  }
  PolypSegNet<float> model(small_config());
  auto reg = model.registry();
  for (const auto& p : reg.parameters) {
    if (p.name.rfind("decoder.", 0) != 0) continue;
    const auto pos = p.name.find(".reduce_");
    if (pos == std::string::npos) continue;
    const std::string src = p.name.substr(pos + 8, 2);
    CHECK((src == "f3" || src == "f4" || src == "f5" || src == "d4"));
  }
}

TEST_CASE("every retained scale influences the output") {
  PolypSegNet<double> model(small_config(4));
  Rng rng(5);
  const auto x = oracle::random_tensor<double>({1, 3, 64, 64}, rng);
  NoGradGuard guard;
  auto f = model.encoder().extract_features(x);
  const auto base = model.decode(f, Mode::Infer, 64, 64).value();
  for (int which = 0; which < 3; ++which) {
    EncoderFeatures<double> g = f;
    Var<double>& tap = which == 0 ? g.f3 : which == 1 ? g.f4 : g.f5;
    tap = Var<double>::constant(Tensor4<double>(tap.shape()));
    const auto ablated = model.decode(g, Mode::Infer, 64, 64).value();
    CAPTURE(which);
    CHECK((ablated.array() - base.array()).abs().maxCoeff() > 1e-6);
  }
}

TEST_CASE("parameter audit of the default model") {
  PolypSegNet<float> model(ModelConfig{});
  const auto a = model.audit();
  CHECK(a.paper_total == 2626337);
  CHECK(a.decoder_consistent());

  Index sum = 0;
  Index decoder_formula = 0;
  for (const auto& r : a.per_component) {
    CAPTURE(r.name);
    sum += r.introspected;
    if (r.decoder_side) {
      CHECK(r.closed_form == r.introspected);
      decoder_formula += r.closed_form;
    }
  }
  CHECK(a.total == sum);
  CHECK(a.total == model.registry().parameter_count());
  CHECK(a.decoder_total() == decoder_formula);
  CHECK(row(a, "encoder").introspected == encoder_param_count("block6b"));

  // Hand-summed decoder for c3=40, c4=112, c5=192, 64 reduce filters, ratio 16.
  const Index d4 = (40 * 64 * 9 + 128) + (112 * 64 * 9 + 128) + (192 * 64 * 9 + 128) + 184448 + 580;
  const Index d3 = (40 * 64 * 9 + 128) + (64 * 64 * 9 + 128) + (192 * 64 * 9 + 128) + 184448 + 580;
  CHECK(a.decoder_total() == d4 + d3 + 65);
  CHECK(a.total == 1702252 + d4 + d3 + 65);
  CHECK(a.total >= 2300000);
  CHECK(a.total <= 3200000);
  CHECK(a.difference() == a.total - 2626337);

  // D4 concatenates three 64-channel reductions.
  auto reg = model.registry();
  for (const auto& p : reg.parameters) {
    if (p.name == "decoder.d4.asym.k33") CHECK(p.var->shape() == Shape4{64, 192, 3, 3});
    if (p.name == "decoder.d3.asym.k33") CHECK(p.var->shape() == Shape4{64, 192, 3, 3});
  }
}

TEST_CASE("audit with the full-width stride-32 tap") {
  ModelConfig cfg;
  cfg.encoder.truncation = "block7a";
  PolypSegNet<float> model(cfg);
  const auto a = model.audit();
  CHECK(a.decoder_consistent());
  CHECK(row(a, "d4.reduce_f5").introspected == 184448);
  CHECK(row(a, "d3.reduce_f5").introspected == 184448);
  CHECK(a.total == model.registry().parameter_count());
}

TEST_CASE("checkpoint round trip") {
  auto cfg = small_config(9);
  PolypSegNet<float> model(cfg);
  // Move running statistics away from their initial values.
  Rng rng(6);
  model.forward(Var<float>::constant(oracle::random_tensor<float>({2, 3, 64, 64}, rng)), Mode::Train);
  const auto path = scratch("model.ckpt");
  save_checkpoint(model, path, 12);

  CheckpointInfo info;
  auto loaded = load_checkpoint<float>(path, &info);
  CHECK(info.epoch == 12);
  CHECK(info.config == cfg);
  CHECK(info.parameter_total == model.audit().total);
  CHECK(checksum(loaded.registry()) == checksum(model.registry()));

  const auto x = oracle::random_tensor<float>({1, 3, 64, 64}, rng);
  CHECK((loaded.predict(x).array() == model.predict(x).array()).all());

  SUBCASE("mismatched architecture is rejected") {
    auto other = cfg;
    other.reduce_channels = 16;
    CHECK_THROWS_AS(load_checkpoint<float>(path, other), ConfigError);
    auto seeded = cfg;
    seeded.seed = 77;  // seeds do not change the architecture
    CHECK_NOTHROW(load_checkpoint<float>(path, seeded));
  }
  SUBCASE("damaged or foreign files are rejected") {
    const auto weights = scratch("not_a_ckpt.weights");
    TensorArchive archive;
    archive.put("x", Tensor4<float>({1, 1, 1, 1}));
    archive.save(weights, kWeightsFormat);
    CHECK_THROWS_AS(load_checkpoint<float>(weights), IoError);

    const auto truncated = scratch("truncated.ckpt");
    std::filesystem::copy_file(path, truncated, std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(truncated, std::filesystem::file_size(path) - 100);
    CHECK_THROWS_AS(load_checkpoint<float>(truncated), IoError);

    // A well-formed archive whose manifest claims another version.
    auto tampered = TensorArchive::load(path, kCheckpointFormat);
    tampered.manifest["format"] = "effiseg-ckpt-0";
    const auto old = scratch("old.ckpt");
    tampered.save(old, kCheckpointFormat);
    CHECK_THROWS_AS(load_checkpoint<float>(old), IoError);
  }
}

TEST_CASE("end-to-end gradients match central differences") {
  auto cfg = small_config(11);
  PolypSegNet<double> model(cfg);
  auto reg = model.registry();
  Rng rng(12);

  // Perturb batch-norm affine terms and statistics so no layer sits at its identity.
  for (auto& p : reg.parameters) {
    if (p.name.find("bn.") != std::string::npos || p.name.find(".1.weight") != std::string::npos ||
        p.name.find(".1.bias") != std::string::npos) {
      auto& v = p.var->value();
      v.array() += oracle::random_tensor<double>(v.shape(), rng, -0.2, 0.2).array();
    }
  }
  for (auto& b : reg.buffers) {
    auto& v = *b.tensor;
    if (b.name.find("running_var") != std::string::npos) {
      v = oracle::random_tensor<double>(v.shape(), rng, 0.5, 1.5);
    } else {
      v = oracle::random_tensor<double>(v.shape(), rng, -0.1, 0.1);
    }
  }

  // Targets grouped by component; several parameters sampled from each.
  const std::vector<std::string> groups = {"encoder.features.0.",  "encoder.features.3.", "encoder.features.6.",
                                           "decoder.d4.reduce_f3", "decoder.d4.reduce_f5", "decoder.d3.reduce_d4",
                                           "decoder.d4.asym.",     "decoder.d3.asym.",    "decoder.d4.se.",
                                           "decoder.d3.se.",       "head."};
  std::vector<Var<double>> targets;
  for (const auto& g : groups) {
    int taken = 0;
    for (auto& p : reg.parameters) {
      if (p.name.rfind(g, 0) == 0 && taken < 2) {
        targets.push_back(*p.var);
        ++taken;
      }
    }
    CAPTURE(g);
    CHECK(taken > 0);
  }

  const auto x = Var<double>::constant(oracle::random_tensor<double>({1, 3, 32, 32}, rng));
  const auto probe = oracle::random_tensor<double>({1, 1, 32, 32}, rng);
  auto loss = [&] { return weighted_sum(model.forward(x, Mode::Infer), probe); };
  auto r = oracle::check_gradients(loss, targets, 3, rng);
  CAPTURE(r.worst_analytic);
  CAPTURE(r.worst_numeric);
  CHECK(r.checked >= 50);
  CHECK(r.max_rel_error < 1e-4);

  SUBCASE("with batch statistics") {
    // 64x64 keeps at least 8 values per channel in every batch-norm layer.
    const auto x2 = Var<double>::constant(oracle::random_tensor<double>({2, 3, 64, 64}, rng));
    const auto probe2 = oracle::random_tensor<double>({2, 1, 64, 64}, rng);
    auto train_loss = [&] { return weighted_sum(model.forward(x2, Mode::Train), probe2); };
    // Batch statistics make every activation depend on the whole batch, so
    // ReLU and max-pool switch points are dense. A 1e-6 step keeps most samples
    // clear of them; samples straddling one are detected and excluded.
    auto rt = oracle::check_gradients(train_loss, targets, 4, rng, 1e-6, 1e-4);
    CAPTURE(rt.worst_analytic);
    CAPTURE(rt.worst_numeric);
    CAPTURE(rt.kinks);
    CHECK(rt.checked >= 50);
    CHECK(rt.kinks * 10 <= rt.checked + rt.kinks);
    CHECK(rt.max_rel_error < 1e-4);
  }
}
