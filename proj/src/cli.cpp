#include "effiseg/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace effiseg {

namespace fs = std::filesystem;

void RunConfig::apply_seed() {
  model.seed = seed;
  model.encoder.seed = seed;
  train.seed = seed;
  split.seed = seed;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  split.validate();
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"model", c.model},
                     {"train", c.train},
                     {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
                     {"data", {{"root", c.data.root.string()}, {"prepared", c.data.prepared.string()}}}};
}

namespace {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
  }
}

}  // namespace

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown_keys(j, {"seed", "model", "train", "split", "data"}, "config");
  read_key(j, "seed", c.seed, "config");
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("split")) {
    const auto& s = j.at("split");
    reject_unknown_keys(s, {"train", "val", "test"}, "split");
    read_key(s, "train", c.split.train, "split");
    read_key(s, "val", c.split.val, "split");
    read_key(s, "test", c.split.test, "split");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown_keys(d, {"root", "prepared"}, "data");
    std::string root = c.data.root.string(), prepared = c.data.prepared.string();
    read_key(d, "root", root, "data");
    read_key(d, "prepared", prepared, "data");
    c.data.root = root;
    c.data.prepared = prepared;
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.apply_seed();
  c.validate();
  return c;
}

std::string group_thousands(long long value) {
  std::string digits = std::to_string(value < 0 ? -value : value);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return value < 0 ? "-" + out : out;
}

std::string format_audit(const ParameterAudit& audit, const std::string& truncation) {
  std::string out;
  char buf[160];
  auto line = [&](const std::string& name, const std::string& formula, const std::string& counted, const char* match) {
    std::snprintf(buf, sizeof buf, "%-22s %13s %13s  %s", name.c_str(), formula.c_str(), counted.c_str(), match);
    std::string text = buf;
    text.erase(text.find_last_not_of(' ') + 1);
    out += text + "\n";
  };
  line("component", "closed-form", "introspected", "match");
  for (const auto& r : audit.per_component) {
    const std::string name = r.name == "encoder" ? "encoder (" + truncation + ")" : r.name;
    line(name, group_thousands(r.closed_form), group_thousands(r.introspected), r.matches() ? "yes" : "NO");
  }
  out += std::string(57, '-') + "\n";
  line("decoder total", "", group_thousands(audit.decoder_total()), "");
  line("total trainable", "", group_thousands(audit.total), "");
  line("reference total", "", group_thousands(audit.paper_total), "");
  line("difference", "", (audit.difference() > 0 ? "+" : "") + group_thousands(audit.difference()), "");
  out += "baselines (context)\n";
  for (const auto& b : kBaselineCounts) line(b.method, "", group_thousands(b.parameters), "");
  return out;
}

CliHooks default_cli_hooks() {
  CliHooks h;
  h.load_predictor = [](const fs::path& checkpoint) {
    auto model = std::make_shared<PolypSegNet<float>>(load_checkpoint<float>(checkpoint));
    Predictor predict = [model](const Preprocessed& p) { return model->predict(p.image); };
    return std::make_pair(predict, model->config());
  };
  h.audit = [](const ModelConfig& cfg) {
    PolypSegNet<float> model(cfg, /*load_pretrained=*/false);
    return model.audit();
  };
  return h;
}

namespace {

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw ConfigError(what + " does not exist or is not a directory: " + p.string());
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " does not exist: " + p.string());
}

void check_weights_path(const ModelConfig& m) {
  if (m.encoder.init == EncoderConfig::Init::Pretrained) require_file(m.encoder.weights, "model.encoder.weights");
}

std::string audit_banner(const ParameterAudit& a) {
  return "total trainable parameters: " + group_thousands(a.total) + " (reference " + group_thousands(a.paper_total) +
         ", difference " + (a.difference() > 0 ? "+" : "") + group_thousands(a.difference()) + ")\n";
}

std::vector<std::string> mismatched_rows(const ParameterAudit& a) {
  std::vector<std::string> names;
  for (const auto& r : a.per_component)
    if (!r.matches()) names.push_back(r.name);
  return names;
}

// ---------------------------------------------------------------- prepare-data

struct SubsetCounts {
  std::size_t train = 0, val = 0, test = 0;
};

int cmd_prepare_data(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  require_dir(cfg.data.root, "data.root");
  std::vector<SampleRef> refs;
  for (const auto& name : kSplittableCorpora) {
    auto listed = list_dataset(cfg.data.root, name);
    refs.insert(refs.end(), listed.begin(), listed.end());
  }
  const DatasetSplit<SampleRef> s = split(refs, cfg.split);

  fs::create_directories(out_dir);
  std::ofstream(out_dir / "split.txt", std::ios::binary) << split_manifest(s, cfg.split.seed);
  for (const char* sub : {"train", "val", "test"}) fs::remove_all(out_dir / sub);

  const int h = static_cast<int>(cfg.model.input_h), w = static_cast<int>(cfg.model.input_w);
  std::map<std::string, SubsetCounts> counts;
  std::size_t augmented = 0;
  for (const auto& ref : s.train) {
    for (const auto& variant : augment_sample(load_sample(ref), cfg.split.seed)) {
      write_sample_png(resize_sample(variant, h, w), out_dir / "train");
      ++augmented;
    }
    ++counts[ref.source].train;
  }
  for (const auto& ref : s.val) {
    write_sample_png(resize_sample(load_sample(ref), h, w), out_dir / "val");
    ++counts[ref.source].val;
  }
  for (const auto& ref : s.test) {
    write_sample_png(resize_sample(load_sample(ref), h, w), out_dir / "test");
    ++counts[ref.source].test;
  }
  std::map<std::string, std::size_t> test_only;
  for (const auto& name : kTestOnlyCorpora) {
    if (fs::exists(cfg.data.root / name)) test_only[name] = list_dataset(cfg.data.root, name).size();
  }

  nlohmann::json summary;
  summary["seed"] = cfg.split.seed;
  summary["input_size"] = {h, w};
  for (const auto& [name, c] : counts) summary["corpora"][name] = {{"train", c.train}, {"val", c.val}, {"test", c.test}};
  summary["train_augmented"] = augmented;
  summary["val"] = s.val.size();
  summary["test"] = s.test.size();
  summary["test_only"] = test_only;
  std::ofstream(out_dir / "summary.json", std::ios::binary) << summary.dump(2) << "\n";

  char buf[128];
  out << "split (seed " << cfg.split.seed << ")\n";
  std::snprintf(buf, sizeof buf, "%-16s %7s %7s %7s\n", "corpus", "train", "val", "test");
  out << buf;
  for (const auto& [name, c] : counts) {
    std::snprintf(buf, sizeof buf, "%-16s %7zu %7zu %7zu\n", name.c_str(), c.train, c.val, c.test);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%-16s %7zu %7zu %7zu\n", "total", s.train.size(), s.val.size(), s.test.size());
  out << buf;
  out << "training samples after augmentation: " << augmented << "\n";
  for (const auto& [name, n] : test_only) out << "test-only corpus " << name << ": " << n << " samples\n";
  out << "wrote " << (out_dir / "split.txt").string() << " and cached " << h << "x" << w << " samples under "
      << out_dir.string() << "\n";
  return kExitOk;
}

// ----------------------------------------------------------------------- train

int cmd_train(const RunConfig& cfg, bool dry_run, const CliHooks& hooks, std::ostream& out) {
  check_weights_path(cfg.model);
  const ParameterAudit audit = hooks.audit(cfg.model);
  out << format_audit(audit, cfg.model.encoder.truncation) << audit_banner(audit);

  if (dry_run) {
    PolypSegNet<float> model(cfg.model);
    const Shape4 shape{cfg.train.batch_size, 3, cfg.model.input_h, cfg.model.input_w};
    Rng rng(derive_seed(cfg.seed, "dry-run"));
    Tensor4<float> x(shape), y(Shape4{shape.n, 1, shape.h, shape.w});
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
    for (Index i = 0; i < y.size(); ++i) y.data()[i] = rng.uniform() < 0.3 ? 1.0f : 0.0f;
    TrainStepper<float> stepper(model, cfg.train);
    const double loss = stepper.step(x, y);
    out << "dry run: one forward/backward pass on a random batch " << shape.str() << ", loss " << loss << "\n";
    return kExitOk;
  }

  require_dir(cfg.data.prepared / "train", "prepared training cache (run prepare-data)");
  require_dir(cfg.data.prepared / "val", "prepared validation cache (run prepare-data)");
  const auto train_set = read_sample_dir(cfg.data.prepared / "train");
  const auto val_set = read_sample_dir(cfg.data.prepared / "val");
  out << "training on " << train_set.size() << " samples, validating on " << val_set.size() << "\n";

  PolypSegNet<float> model(cfg.model);
  TrainHooks th;
  th.on_epoch = [&](const EpochRecord& r, bool improved) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %3d/%d  train_loss %.5f  val_loss %.5f  val_dice %.4f%s\n", r.epoch,
                  cfg.train.epochs, r.train_loss, r.val_loss, r.val_dice, improved ? "  *" : "");
    out << buf << std::flush;
  };
  const TrainResult result = train(model, train_set, val_set, cfg.train, th);

  nlohmann::json run;
  run["seed"] = cfg.seed;
  run["config"] = cfg;
  run["parameter_total"] = audit.total;
  run["epochs_run"] = result.history.size();
  run["best_epoch"] = result.best_epoch;
  run["best_val_loss"] = result.best_val_loss;
  run["stopped_early"] = result.stopped_early;
  std::ofstream(cfg.train.checkpoint_dir / "run.json", std::ios::binary) << run.dump(2) << "\n";
  out << "best epoch " << result.best_epoch << " (val_loss " << result.best_val_loss << "), checkpoint "
      << result.checkpoint.string() << "\n";
  return kExitOk;
}

// -------------------------------------------------------------------- evaluate

fs::path normalised_dir(const fs::path& p) {
  fs::path d = p.lexically_normal();
  if (d.filename().empty()) d = d.parent_path();
  return d;
}

/// Named evaluation sets from one directory: a corpus in the raw layout, or a
/// prepared cache whose files carry a "<source>__" prefix (one set per source).
std::vector<std::pair<std::string, std::vector<Sample>>> load_eval_sets(const fs::path& dir) {
  const fs::path d = normalised_dir(dir);
  require_dir(d, "dataset");
  const auto refs = list_dataset(d.parent_path(), d.filename().string());
  const bool cached = std::all_of(refs.begin(), refs.end(), [](const SampleRef& r) {
    return r.id.find("__") != std::string::npos;
  });
  std::vector<std::pair<std::string, std::vector<Sample>>> sets;
  if (!cached) {
    std::vector<Sample> samples;
    for (const auto& r : refs) samples.push_back(load_sample(r));
    sets.emplace_back(d.filename().string(), std::move(samples));
    return sets;
  }
  std::map<std::string, std::vector<Sample>> by_source;
  for (auto& s : read_sample_dir(d)) by_source[s.source].push_back(std::move(s));
  for (auto& [name, samples] : by_source) sets.emplace_back(name, std::move(samples));
  return sets;
}

int cmd_evaluate(const fs::path& checkpoint, const std::vector<std::string>& datasets, double threshold,
                 const std::string& json_path, const CliHooks& hooks, std::ostream& out) {
  require_file(checkpoint, "checkpoint");
  for (const auto& d : datasets) require_dir(d, "dataset");
  const auto [predictor, model_cfg] = hooks.load_predictor(checkpoint);
  std::vector<MetricsReport> reports;
  for (const auto& d : datasets) {
    for (auto& [name, samples] : load_eval_sets(d)) {
      std::vector<Preprocessed> prepared;
      for (const auto& s : samples) {
        prepared.push_back(preprocess(s, static_cast<int>(model_cfg.input_h), static_cast<int>(model_cfg.input_w)));
      }
      reports.push_back(evaluate(predictor, prepared, name, threshold));
    }
  }
  nlohmann::json j;
  j["checkpoint"] = checkpoint.string();
  j["seed"] = model_cfg.seed;
  j["threshold"] = threshold;
  j["reports"] = reports;
  out << format_table(reports);
  if (json_path.empty()) {
    out << j.dump(2) << "\n";
  } else {
    std::ofstream(json_path, std::ios::binary) << j.dump(2) << "\n";
    out << "metrics written to " << json_path << "\n";
  }
  return kExitOk;
}

// --------------------------------------------------------------------- predict

bool is_image(const fs::path& p) {
  static const std::set<std::string> exts = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"};
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return exts.count(ext) != 0;
}

cv::Mat find_mask(const fs::path& masks_dir, const std::string& stem, int h, int w) {
  if (masks_dir.empty() || !fs::is_directory(masks_dir)) return {};
  for (const auto& e : fs::directory_iterator(masks_dir)) {
    if (!e.is_regular_file() || !is_image(e.path()) || e.path().stem().string() != stem) continue;
    cv::Mat gray = cv::imread(e.path().string(), cv::IMREAD_GRAYSCALE);
    if (gray.empty()) return {};
    cv::Mat resized, binary;
    cv::resize(gray, resized, cv::Size(w, h), 0, 0, cv::INTER_NEAREST);
    cv::threshold(resized, binary, kMaskThreshold, 255, cv::THRESH_BINARY);
    return binary;
  }
  return {};
}

int cmd_predict(const fs::path& checkpoint, const fs::path& images_dir, fs::path masks_dir, const fs::path& out_dir,
                double threshold, const CliHooks& hooks, std::ostream& out, std::ostream& err) {
  require_file(checkpoint, "checkpoint");
  require_dir(images_dir, "images directory");
  if (masks_dir.empty()) {
    const fs::path d = normalised_dir(images_dir);
    if (d.filename() == "images" && fs::is_directory(d.parent_path() / "masks")) masks_dir = d.parent_path() / "masks";
  }
  const auto [predictor, model_cfg] = hooks.load_predictor(checkpoint);
  const int h = static_cast<int>(model_cfg.input_h), w = static_cast<int>(model_cfg.input_w);
  constexpr int kGap = 4;

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images_dir)) {
    if (e.is_regular_file() && is_image(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  fs::create_directories(out_dir);

  int written = 0, failed = 0;
  for (const auto& file : files) {
    const std::string id = file.stem().string();
    cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
      err << "warning: cannot read " << file.string() << ", skipped\n";
      ++failed;
      continue;
    }
    Sample s;
    s.id = id;
    cv::cvtColor(bgr, s.image, cv::COLOR_BGR2RGB);
    s.mask = cv::Mat::ones(bgr.size(), CV_8UC1);
    const Sample resized = resize_sample(s, h, w);
    Preprocessed p{"", id, image_to_tensor(resized.image), Tensor4<float>(Shape4{1, 1, h, w})};
    const Tensor4<float> prob = predictor(p);

    cv::Mat prob8(h, w, CV_8UC1), mask8(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const float v = prob(0, 0, y, x);
        prob8.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        mask8.at<std::uint8_t>(y, x) = v > static_cast<float>(threshold) ? 255 : 0;
      }
    }
    const cv::Mat gt = find_mask(masks_dir, id, h, w);
    std::vector<cv::Mat> panels;
    cv::Mat input_bgr, gt_bgr, pred_bgr;
    cv::cvtColor(resized.image, input_bgr, cv::COLOR_RGB2BGR);
    panels.push_back(input_bgr);
    if (!gt.empty()) {
      cv::cvtColor(gt, gt_bgr, cv::COLOR_GRAY2BGR);
      panels.push_back(gt_bgr);
    }
    cv::cvtColor(mask8, pred_bgr, cv::COLOR_GRAY2BGR);
    panels.push_back(pred_bgr);
    const int n = static_cast<int>(panels.size());
    cv::Mat canvas(h, n * w + (n - 1) * kGap, CV_8UC3, cv::Scalar(255, 255, 255));
    for (int i = 0; i < n; ++i) panels[static_cast<std::size_t>(i)].copyTo(canvas(cv::Rect(i * (w + kGap), 0, w, h)));

    const bool ok = cv::imwrite((out_dir / (id + "_prob.png")).string(), prob8) &&
                    cv::imwrite((out_dir / (id + "_mask.png")).string(), mask8) &&
                    cv::imwrite((out_dir / (id + "_overlay.png")).string(), canvas);
    if (!ok) throw IoError("cannot write predictions under " + out_dir.string());
    ++written;
  }
  out << "wrote " << written << " predictions to " << out_dir.string();
  if (failed) out << " (" << failed << " unreadable inputs skipped)";
  out << "\n";
  if (written == 0) {
    err << "error: no readable images in " << images_dir.string() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

// ---------------------------------------------------------------- audit-params

int cmd_audit(const RunConfig& cfg, const CliHooks& hooks, std::ostream& out, std::ostream& err) {
  const ParameterAudit audit = hooks.audit(cfg.model);
  out << format_audit(audit, cfg.model.encoder.truncation) << audit_banner(audit);
  const auto bad = mismatched_rows(audit);
  if (!bad.empty()) {
    err << "error: closed-form and introspected counts differ for:";
    for (const auto& b : bad) err << " " << b;
    err << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const CliHooks& hooks) {
  CLI::App app{"Polyp segmentation: data preparation, training, evaluation, prediction and parameter audit",
               "effiseg"};
  app.require_subcommand(1);

  std::string config_path, root, out_dir, prepared, checkpoint_dir, checkpoint, images, masks, json_path, truncation;
  std::vector<std::string> datasets;
  std::uint64_t seed = 0;
  int epochs = 0, batch_size = 0, patience = 0;
  double lr = 0, threshold = kDefaultThreshold;
  bool dry_run = false;

  auto* prep = app.add_subcommand("prepare-data", "split Kvasir and CVC-ClinicDB, augment and cache the training set");
  prep->add_option("--config", config_path, "JSON run config");
  prep->add_option("--root", root, "dataset root holding <corpus>/images and <corpus>/masks");
  prep->add_option("--seed", seed, "master seed");
  prep->add_option("--out", out_dir, "output directory (default: data.prepared)");

  auto* tr = app.add_subcommand("train", "train the network on a prepared cache");
  tr->add_option("--config", config_path, "JSON run config");
  tr->add_flag("--dry-run", dry_run, "build the model, run one forward/backward pass and exit");
  tr->add_option("--prepared", prepared, "prepared cache directory");
  tr->add_option("--checkpoint-dir", checkpoint_dir, "where best.ckpt, history.csv and run.json go");
  tr->add_option("--epochs", epochs, "maximum epochs")->check(CLI::PositiveNumber);
  tr->add_option("--batch-size", batch_size, "mini-batch size")->check(CLI::PositiveNumber);
  tr->add_option("--lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--patience", patience, "early-stopping patience in epochs")->check(CLI::PositiveNumber);
  tr->add_option("--seed", seed, "master seed");

  auto* ev = app.add_subcommand("evaluate", "Dice/IoU of a checkpoint on one or more datasets");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--dataset", datasets, "dataset directory (raw corpus or prepared cache); repeatable")->required();
  ev->add_option("--threshold", threshold, "binarisation threshold")->check(CLI::Range(0.0, 1.0));
  ev->add_option("--json", json_path, "write the metrics JSON here instead of stdout");

  auto* pr = app.add_subcommand("predict", "probability maps, binary masks and side-by-side overlays");
  pr->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  pr->add_option("--images", images, "directory of input images")->required();
  pr->add_option("--masks", masks, "optional directory of ground-truth masks (matched by file stem)");
  pr->add_option("--out", out_dir, "output directory")->required();
  pr->add_option("--threshold", threshold, "binarisation threshold")->check(CLI::Range(0.0, 1.0));

  auto* au = app.add_subcommand("audit-params", "closed-form versus introspected parameter counts");
  au->add_option("--config", config_path, "JSON run config");
  au->add_option("--truncation", truncation, "encoder truncation block, e.g. block6b or block7a");

  auto* dc = app.add_subcommand("default-config", "print the default run config as JSON");

  std::vector<std::string> argv_store{"effiseg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto resolve = [&](CLI::App* cmd) {
    auto given = [cmd](const char* name) {
      const CLI::Option* o = cmd->get_option_no_throw(name);
      return o != nullptr && o->count() > 0;
    };
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (given("--seed")) cfg.seed = seed;
    if (given("--root")) cfg.data.root = root;
    if (given("--prepared")) cfg.data.prepared = prepared;
    if (given("--checkpoint-dir")) cfg.train.checkpoint_dir = checkpoint_dir;
    if (given("--epochs")) cfg.train.epochs = epochs;
    if (given("--batch-size")) cfg.train.batch_size = batch_size;
    if (given("--lr")) cfg.train.learning_rate = lr;
    if (given("--patience")) cfg.train.patience = patience;
    if (given("--truncation")) cfg.model.encoder.truncation = truncation;
    cfg.apply_seed();
    cfg.validate();
    return cfg;
  };

  try {
    if (*prep) {
      const RunConfig cfg = resolve(prep);
      return cmd_prepare_data(cfg, out_dir.empty() ? cfg.data.prepared : fs::path(out_dir), out);
    }
    if (*tr) return cmd_train(resolve(tr), dry_run, hooks, out);
    if (*ev) return cmd_evaluate(checkpoint, datasets, threshold, json_path, hooks, out);
    if (*pr) return cmd_predict(checkpoint, images, masks, out_dir, threshold, hooks, out, err);
    if (*au) return cmd_audit(resolve(au), hooks, out, err);
    if (*dc) {
      out << nlohmann::json(RunConfig{}).dump(2) << "\n";
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DatasetError& e) {
    err << "dataset error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace effiseg
