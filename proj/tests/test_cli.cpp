#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "effiseg/cli.hpp"
#include "support/synthetic.hpp"

using namespace effiseg;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args, const CliHooks& hooks = default_cli_hooks()) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err, hooks);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

bool contains(const std::string& text, const std::string& what) { return text.find(what) != std::string::npos; }

fs::path write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream(path) << j.dump(2);
  return path;
}

// Small model at 32x32 for the end-to-end commands.
nlohmann::json tiny_config(const fs::path& root, const fs::path& prepared, const fs::path& ckpt) {
  return {{"seed", 3},
          {"model", {{"reduce_channels", 8}, {"se_ratio", 4}, {"decoder_out_channels", 8}, {"input_size", {32, 32}}}},
          {"train", {{"epochs", 2}, {"batch_size", 4}, {"learning_rate", 1e-3}, {"checkpoint_dir", ckpt.string()}}},
          {"data", {{"root", root.string()}, {"prepared", prepared.string()}}}};
}

}  // namespace

TEST_CASE("usage and configuration errors exit with 2") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"bogus"}).code == kExitUsage);
  CHECK(cli({"evaluate"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);

  const auto dir = synthetic::fresh_dir("test_cli_config");
  const auto top = cli({"train", "--config", write_json(dir / "a.json", {{"lr", 0.1}}).string(), "--dry-run"});
  CHECK(top.code == kExitUsage);
  CHECK(contains(top.err, "'config.lr'"));
  const auto nested = cli({"audit-params", "--config", write_json(dir / "b.json", {{"model", {{"widht", 3}}}}).string()});
  CHECK(nested.code == kExitUsage);
  CHECK(contains(nested.err, "'model.widht'"));
  const auto typed = cli({"audit-params", "--config", write_json(dir / "c.json", {{"train", {{"epochs", "x"}}}}).string()});
  CHECK(typed.code == kExitUsage);
  CHECK(contains(typed.err, "train.epochs"));
  CHECK(cli({"audit-params", "--config", (dir / "missing.json").string()}).code == kExitUsage);
  CHECK(cli({"audit-params", "--truncation", "block4a"}).code == kExitUsage);
  CHECK(cli({"train", "--prepared", (dir / "nothing").string()}).code == kExitUsage);
}

TEST_CASE("default config round trip") {
  const auto r = cli({"default-config"});
  REQUIRE(r.code == kExitOk);
  RunConfig back = nlohmann::json::parse(r.out).get<RunConfig>();
  const RunConfig def;
  CHECK(back.model == def.model);
  CHECK(back.train == def.train);
  CHECK(back.data == def.data);
  CHECK(back.seed == def.seed);

  const auto dir = synthetic::fresh_dir("test_cli_seed");
  const RunConfig seeded = load_run_config(write_json(dir / "s.json", {{"seed", 77}}));
  CHECK(seeded.model.seed == 77);
  CHECK(seeded.model.encoder.seed == 77);
  CHECK(seeded.train.seed == 77);
  CHECK(seeded.split.seed == 77);
}

TEST_CASE("audit-params") {
  const auto r = cli({"audit-params"});
  CHECK(r.code == kExitOk);
  CHECK(contains(r.out, "2,441,781"));
  CHECK(contains(r.out, "2,626,337"));
  CHECK(contains(r.out, "-184,556"));
  CHECK(contains(r.out, "15,683,713"));
  CHECK(contains(r.out, "9,042,177"));
  CHECK(contains(r.out, "30,328,272"));
  CHECK_FALSE(contains(r.out, " NO"));

  CliHooks corrupted = default_cli_hooks();
  corrupted.audit = [](const ModelConfig& cfg) {
    PolypSegNet<float> model(cfg, false);
    ParameterAudit a = model.audit();
    for (auto& row : a.per_component)
      if (row.name == "d3.asym") row.closed_form += 1;
    return a;
  };
  const auto bad = cli({"audit-params"}, corrupted);
  CHECK(bad.code != kExitOk);
  CHECK(contains(bad.err, "d3.asym"));

  CHECK(group_thousands(0) == "0");
  CHECK(group_thousands(999) == "999");
  CHECK(group_thousands(1000) == "1,000");
  CHECK(group_thousands(-184556) == "-184,556");
}

TEST_CASE("train --dry-run prints the banner and exits 0") {
  const auto r = cli({"train", "--dry-run", "--batch-size", "1"});
  CHECK(r.code == kExitOk);
  CHECK(contains(r.out, "total trainable parameters: 2,441,781 (reference 2,626,337, difference -184,556)"));
  CHECK(contains(r.out, "dry run"));
}

TEST_CASE("prepare-data on corpora of the real sizes") {
  const auto root = synthetic::fresh_dir("test_cli_corpora");
  synthetic::write_corpus(root, "Kvasir", 1000);
  synthetic::write_corpus(root, "CVC-ClinicDB", 612);
  synthetic::write_corpus(root, "ETIS", 7);
  const auto work = synthetic::fresh_dir("test_cli_prepare");
  const auto cfg = write_json(work / "run.json", {{"model", {{"input_size", {32, 32}}}}});

  auto prepare = [&](const fs::path& out) {
    return cli({"prepare-data", "--config", cfg.string(), "--root", root.string(), "--seed", "5", "--out", out.string()});
  };
  const auto r = prepare(work / "a");
  CAPTURE(r.err);
  REQUIRE(r.code == kExitOk);
  CHECK(contains(r.out, "training samples after augmentation: 3870"));
  auto row = [](const char* name, int a, int b, int c) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-16s %7d %7d %7d\n", name, a, b, c);
    return std::string(buf);
  };
  CHECK(contains(r.out, row("Kvasir", 800, 100, 100)));
  CHECK(contains(r.out, row("CVC-ClinicDB", 490, 61, 61)));
  CHECK(contains(r.out, row("total", 1290, 161, 161)));
  CHECK(contains(r.out, "test-only corpus ETIS: 7 samples"));

  const auto summary = nlohmann::json::parse(slurp(work / "a" / "summary.json"));
  CHECK(summary.at("train_augmented") == 3870);
  CHECK(summary.at("seed") == 5);
  CHECK(read_sample_dir(work / "a" / "train").size() == 3870);
  CHECK(read_sample_dir(work / "a" / "test").size() == 161);

  const auto again = prepare(work / "b");
  REQUIRE(again.code == kExitOk);
  CHECK(slurp(work / "a" / "split.txt") == slurp(work / "b" / "split.txt"));
  CHECK(slurp(work / "a" / "summary.json") == slurp(work / "b" / "summary.json"));
  CHECK(slurp(work / "a" / "train" / "images" / "Kvasir__img0003_rot.png") ==
        slurp(work / "b" / "train" / "images" / "Kvasir__img0003_rot.png"));

  SUBCASE("missing masks directory") {
    const auto broken = synthetic::fresh_dir("test_cli_broken");
    synthetic::write_corpus(broken, "Kvasir", 3);
    synthetic::write_corpus(broken, "CVC-ClinicDB", 3);
    fs::remove_all(broken / "CVC-ClinicDB" / "masks");
    const auto b = cli({"prepare-data", "--root", broken.string(), "--out", (work / "c").string()});
    CHECK(b.code == kExitUsage);
    CHECK(contains(b.err, (broken / "CVC-ClinicDB" / "masks").string()));
  }
}

TEST_CASE("train, evaluate and predict end to end") {
  const auto root = synthetic::fresh_dir("test_cli_small");
  synthetic::write_corpus(root, "Kvasir", 20, 40, 48);
  synthetic::write_corpus(root, "CVC-ClinicDB", 10, 40, 48);
  const auto work = synthetic::fresh_dir("test_cli_e2e");
  const auto cfg = write_json(work / "run.json", tiny_config(root, work / "prepared", work / "ckpt"));

  REQUIRE(cli({"prepare-data", "--config", cfg.string()}).code == kExitOk);
  const auto t = cli({"train", "--config", cfg.string()});
  CAPTURE(t.err);
  REQUIRE(t.code == kExitOk);
  CHECK(contains(t.out, "reference 2,626,337"));
  CHECK(contains(t.out, "epoch   2/2"));
  for (const char* f : {"best.ckpt", "history.csv", "run.json"}) CHECK(fs::exists(work / "ckpt" / f));
  CHECK(nlohmann::json::parse(slurp(work / "ckpt" / "run.json")).at("seed") == 3);
  const std::string ckpt = (work / "ckpt" / "best.ckpt").string();

  SUBCASE("evaluate is deterministic and reports each source") {
    const auto e1 = cli({"evaluate", "--checkpoint", ckpt, "--dataset", (work / "prepared" / "test").string(), "--json",
                         (work / "m1.json").string()});
    const auto e2 = cli({"evaluate", "--checkpoint", ckpt, "--dataset", (work / "prepared" / "test").string(), "--json",
                         (work / "m2.json").string()});
    CAPTURE(e1.err);
    REQUIRE(e1.code == kExitOk);
    CHECK(slurp(work / "m1.json") == slurp(work / "m2.json"));
    const auto j = nlohmann::json::parse(slurp(work / "m1.json"));
    REQUIRE(j.at("reports").size() == 2);
    CHECK(j.at("reports")[0].at("dataset") == "CVC-ClinicDB");
    CHECK(j.at("reports")[0].at("count") == 1);
    CHECK(j.at("reports")[1].at("dataset") == "Kvasir");
    CHECK(j.at("reports")[1].at("count") == 2);
    CHECK(contains(e1.out, "Dice"));
    CHECK(contains(e1.out, "IoU"));

    const auto raw = cli({"evaluate", "--checkpoint", ckpt, "--dataset", (root / "Kvasir").string()});
    CHECK(raw.code == kExitOk);
    CHECK(contains(raw.out, "\"dataset\": \"Kvasir\""));
    CHECK(contains(raw.out, "\"count\": 20"));
  }

  SUBCASE("ground-truth passthrough scores 1") {
    CliHooks oracle = default_cli_hooks();
    oracle.load_predictor = [](const fs::path&) {
      ModelConfig mc;
      mc.input_h = mc.input_w = 32;
      return std::make_pair(Predictor([](const Preprocessed& p) { return p.mask; }), mc);
    };
    const auto r = cli({"evaluate", "--checkpoint", ckpt, "--dataset", (root / "Kvasir").string(), "--dataset",
                        (root / "CVC-ClinicDB").string(), "--json", (work / "oracle.json").string()},
                       oracle);
    REQUIRE(r.code == kExitOk);
    for (const auto& rep : nlohmann::json::parse(slurp(work / "oracle.json")).at("reports")) {
      CHECK(rep.at("mean_dice").get<double>() == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(rep.at("mean_iou").get<double>() == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(contains(r.out, "1.000"));
  }

  SUBCASE("predict writes overlays and binary masks") {
    const auto images = synthetic::fresh_dir("test_cli_predict_in") / "images";
    fs::create_directories(images);
    for (int i = 0; i < 5; ++i) fs::copy_file(root / "Kvasir" / "images" / ("img000" + std::to_string(i) + ".png"),
                                             images / ("img000" + std::to_string(i) + ".png"));
    const auto out2 = work / "pred2";
    const auto p2 = cli({"predict", "--checkpoint", ckpt, "--images", images.string(), "--out", out2.string()});
    CAPTURE(p2.err);
    REQUIRE(p2.code == kExitOk);
    for (int i = 0; i < 5; ++i) {
      const cv::Mat overlay = cv::imread((out2 / ("img000" + std::to_string(i) + "_overlay.png")).string());
      REQUIRE_FALSE(overlay.empty());
      CHECK(overlay.cols == 2 * 32 + 4);  // input | prediction
      CHECK(overlay.rows == 32);
    }
    const cv::Mat mask = cv::imread((out2 / "img0000_mask.png").string(), cv::IMREAD_UNCHANGED);
    REQUIRE(mask.type() == CV_8UC1);
    CHECK(cv::countNonZero((mask != 0) & (mask != 255)) == 0);

    const auto out3 = work / "pred3";
    const auto p3 = cli({"predict", "--checkpoint", ckpt, "--images", (root / "Kvasir" / "images").string(), "--out",
                         out3.string()});
    REQUIRE(p3.code == kExitOk);
    CHECK(cv::imread((out3 / "img0007_overlay.png").string()).cols == 3 * 32 + 2 * 4);  // with ground truth

    std::ofstream(images / "zz_broken.png") << "not an image";
    const auto partial = cli({"predict", "--checkpoint", ckpt, "--images", images.string(), "--out", out2.string()});
    CHECK(partial.code == kExitOk);
    CHECK(contains(partial.err, "zz_broken.png"));

    const auto bad_dir = synthetic::fresh_dir("test_cli_predict_bad");
    std::ofstream(bad_dir / "a.png") << "junk";
    const auto all_bad = cli({"predict", "--checkpoint", ckpt, "--images", bad_dir.string(), "--out", out2.string()});
    CHECK(all_bad.code == kExitRuntime);
  }

  SUBCASE("corrupt checkpoint is a runtime failure") {
    std::ofstream(work / "junk.ckpt") << "junk";
    const auto r = cli({"evaluate", "--checkpoint", (work / "junk.ckpt").string(), "--dataset",
                        (root / "Kvasir").string()});
    CHECK(r.code == kExitRuntime);
  }
}
