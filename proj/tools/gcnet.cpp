// gcnet command-line tool: synth, train, eval, predict, gradcheck, ablation, replay.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gcnet/config_file.hpp"
#include "gcnet/dataset_io.hpp"
#include "gcnet/fsc147.hpp"
#include "gcnet/gradcheck.hpp"

#ifndef GCNET_VERSION
#define GCNET_VERSION "0.0.0"
#endif

namespace {

using namespace gcnet;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitGate = 3;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nullptr;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> artifacts;
  nlohmann::json results = nlohmann::json::object();
  std::string started = utc_now();
  std::string finished;
  std::string status = "ok";
  std::string error;

  void write(const fs::path& dir) {
    finished = utc_now();
    artifacts["manifest"] = (dir / "run_manifest.json").string();
    const nlohmann::json j = {{"command", command}, {"argv", argv},          {"config", config},
                              {"seed", seed},       {"artifacts", artifacts}, {"results", results},
                              {"tool_version", GCNET_VERSION}, {"started_at", started}, {"finished_at", finished},
                              {"status", status},   {"error", error}};
    const auto path = dir / "run_manifest.json";
    const auto tmp = fs::path(path.string() + ".tmp");
    {
      std::ofstream os(tmp);
      if (!os) throw IoError("cannot write run manifest in " + dir.string());
      os << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
  // create_directories succeeds on an existing read-only directory; probe it.
  const auto probe = dir / ".gcnet_write_probe";
  std::ofstream os(probe);
  if (!os) throw IoError("output directory is not writable: " + dir.string());
  os.close();
  fs::remove(probe, ec);
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
  cmd->add_option("--config", c.config, "YAML run configuration");
  cmd->add_option("--set", c.sets, "override, e.g. train.learning_rate=5e-4 (repeatable)");
  c.out = default_out;
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

RunConfig resolve_config(const Common& c) {
  return c.config.empty() ? parse_run_config("", "<defaults>", c.sets) : load_run_config(c.config, c.sets);
}

/// Dataset root: flag, then config, then GCNET_DATA_ROOT.
fs::path data_root(const RunConfig& rc, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!rc.data.root.empty()) return rc.data.root;
  if (rc.data.source != DataSource::generated) return default_data_root();
  return {};
}

std::vector<DatasetRecord> load_split(const RunConfig& rc, const std::string& flag, Split split) {
  const fs::path root = data_root(rc, flag);
  if (root.empty()) {
    if (rc.data.source != DataSource::generated) {
      throw IoError(std::string("no dataset path given (use --data or set ") + kDataRootEnv + ")");
    }
    const auto& spec = rc.data.synthetic;
    if (split == Split::train) return generate_synthetic(spec, rc.data.train_count, 0, split);
    return generate_synthetic(spec, rc.data.val_count, rc.data.train_count, split);
  }
  if (!fs::exists(root)) throw IoError("dataset path not found: " + root.string());
  if (fs::exists(root / kDatasetManifest)) return load_dataset_dir(root, split);
  if (fs::exists(root / kFscAnnotationFile) || rc.data.source == DataSource::fsc147) return load_fsc147(root, split);
  throw IoError("no " + std::string(kDatasetManifest) + " or FSC147 annotation under " + root.string());
}

/// Run config for a checkpoint: an explicit --config/--set wins, then the
/// config stored with the checkpoint, then defaults. The architecture always
/// comes from the checkpoint itself.
RunConfig checkpoint_run_config(const Checkpoint& ck, const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) rc = load_run_config(c.config, c.sets);
  else if (!ck.metadata.empty()) rc = parse_run_config(ck.metadata.dump(), "<checkpoint metadata>", c.sets);
  else rc = parse_run_config("", "<defaults>", c.sets);
  rc.model = ck.config;
  return rc;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  Common common;
  std::int64_t count = 64;
  std::int64_t val_count = 0;
  std::int64_t first = 0;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a, RunManifest& m) {
  RunConfig rc = resolve_config(a.common);
  if (a.seed) rc.data.synthetic.seed = *a.seed;
  rc.data.train_count = a.count;
  rc.data.val_count = a.val_count;
  m.config = to_config_json(rc);
  m.seed = rc.data.synthetic.seed;
  const fs::path out = a.common.out;
  ensure_dir(out);
  auto recs = generate_synthetic(rc.data.synthetic, a.count, a.first, Split::train);
  auto val = generate_synthetic(rc.data.synthetic, a.val_count, a.first + a.count, Split::val);
  recs.insert(recs.end(), std::make_move_iterator(val.begin()), std::make_move_iterator(val.end()));
  m.artifacts["dataset"] = write_dataset(out, recs, rc.data.synthetic).string();
  m.results = {{"train_records", a.count}, {"val_records", a.val_count}};
  std::cout << "wrote " << recs.size() << " images to " << out.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  std::string data;
  std::string ablation;
};

int cmd_train(const TrainArgs& a, RunManifest& m) {
  RunConfig rc = resolve_config(a.common);
  if (!a.ablation.empty()) {
    rc.ablation = ablation_row_from_string(a.ablation);
    rc.model = ablation_variant(rc.model, *rc.ablation);
  }
  m.config = to_config_json(rc);
  m.seed = rc.train.seed;
  const auto train_set = load_split(rc, a.data, Split::train);
  const auto val_set = load_split(rc, a.data, rc.data.val_split);
  if (train_set.empty()) throw DataError("training split is empty");

  const fs::path out = a.common.out;
  ensure_dir(out);
  {
    std::ofstream os(out / "config.yaml");
    os << to_yaml(rc);
  }
  rc.train.checkpoint_path = out / "best.ckpt";
  rc.train.checkpoint_metadata = to_config_json(rc);

  GcnetParams<float> params(rc.model);
  std::cerr << "training " << (rc.ablation ? to_string(*rc.ablation) : "model") << " with "
            << parameter_count(params, rc.model) << " parameters on " << train_set.size() << " records ("
            << val_set.size() << " validation)\n";
  auto result = train(params, rc.model, train_set, val_set, rc.train, [](const EvalReport& r) {
    std::cerr << "step " << r.step << ' ' << to_string(r.split) << " mae " << format_metric(r.mae) << " mse "
              << format_metric(r.mse) << '\n';
  });

  auto final_ck = make_checkpoint(params, rc.model, result.steps_run, result.optimizer);
  final_ck.metadata = rc.train.checkpoint_metadata;
  save_checkpoint(out / "final.ckpt", final_ck);
  write_loss_csv(out / "loss.csv", result.loss_curve);
  write_metrics_csv(out / "metrics.csv", result.history);

  m.artifacts = {{"best_checkpoint", (out / "best.ckpt").string()},
                 {"final_checkpoint", (out / "final.ckpt").string()},
                 {"loss_csv", (out / "loss.csv").string()},
                 {"metrics_csv", (out / "metrics.csv").string()},
                 {"config", (out / "config.yaml").string()}};
  m.results = {{"steps", result.steps_run}, {"stopped_early", result.stopped_early},
               {"final_loss", result.loss_curve.empty() ? 0.0 : result.loss_curve.back()},
               {"best_step", result.best_step}};
  if (std::isfinite(result.best_val_mae)) m.results["best_val_mae"] = result.best_val_mae;
  std::cout << "trained " << result.steps_run << " steps; checkpoints in " << out.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string data;
  std::string split = "val";
};

int cmd_eval(const EvalArgs& a, RunManifest& m) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  RunConfig rc = checkpoint_run_config(ck, a.common);
  m.config = to_config_json(rc);
  m.seed = rc.model.seed;
  const Split split = split_from_string(a.split);
  const auto records = load_split(rc, a.data, split);
  if (records.empty()) throw DataError("split '" + a.split + "' has no records");
  GcnetParams<float> params = params_from_checkpoint(ck);
  const EvalReport rep = evaluate(params, rc.model, records, split, ck.step, rc.train.resize);

  const fs::path out = a.common.out;
  ensure_dir(out);
  write_metrics_csv(out / "metrics.csv", {rep});
  {
    std::ofstream os(out / "predictions.csv");
    os << "id,count,prediction,abs_error\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
      os << records[i].id << ',' << records[i].count << ',' << format_metric(rep.predictions[i]) << ','
         << format_metric(rep.abs_errors[i]) << '\n';
    }
  }
  m.artifacts = {{"metrics_csv", (out / "metrics.csv").string()},
                 {"predictions_csv", (out / "predictions.csv").string()}};
  m.results = {{"split", a.split}, {"records", records.size()}, {"mae", rep.mae}, {"mse", rep.mse}};
  std::cout << "split " << a.split << " records " << records.size() << " mae " << format_metric(rep.mae) << " mse "
            << format_metric(rep.mse) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  Common common;
  std::string checkpoint;
  std::string image;
  std::string heatmap;
};

int cmd_predict(const PredictArgs& a, RunManifest& m) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  RunConfig rc = checkpoint_run_config(ck, a.common);
  m.config = to_config_json(rc);
  m.seed = rc.model.seed;
  const Image img = load_image(a.image);
  GcnetParams<float> params = params_from_checkpoint(ck);
  NoGradGuard no_grad;
  const Image input = resize_policy(img, ResizeMode::train_main, rc.train.resize);
  auto r = forward(ImageTensor<float>::from(input.reshaped({1, 3, input.dim(1), input.dim(2)})), params, rc.model,
                   Phase::eval);
  const double count = std::max(0.0, static_cast<double>(r.count.data.value()[0]));
  m.results = {{"image", a.image}, {"count", count}};

  if (!a.heatmap.empty()) {
    if (!r.similarity) throw ConfigError("this model variant builds no similarity map, so --heatmap is unavailable");
    const auto& s = r.similarity->data.value();
    const Tensor<float> map = s.reshaped({s.dim(1), s.dim(2)});
    const auto info = save_heatmap(a.heatmap, map, img.dim(1), img.dim(2));
    m.artifacts["heatmap"] = a.heatmap;
    m.artifacts["heatmap_sidecar"] = a.heatmap + ".json";
    m.results["heatmap"] = {{"min", info.min}, {"max", info.max}, {"height", info.height}, {"width", info.width}};
  }
  const fs::path out = a.common.out;
  ensure_dir(out);
  std::cout << format_metric(count) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  Common common;
  std::string module = "all";
  double threshold = 1e-4;
  std::uint64_t seed = 0;
  Index image_size = 64;
};

int cmd_gradcheck(const GradcheckArgs& a, RunManifest& m) {
  RunConfig rc = resolve_config(a.common);
  m.config = to_config_json(rc);
  m.seed = a.seed;
  std::vector<std::string> modules;
  if (a.module == "all") modules = gradcheck_modules();
  else modules.push_back(a.module);

  bool ok = true;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& mod : modules) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = gradcheck_module(mod, rc.model, a.seed, a.image_size);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = res.max_rel_error < a.threshold;
    ok = ok && pass;
    std::cout << std::left << std::setw(13) << mod << " max_rel_error " << std::scientific << std::setprecision(3)
              << res.max_rel_error << std::defaultfloat << "  checked " << res.checked << "  worst " << res.worst
              << "  " << (pass ? "PASS" : "FAIL") << "  (" << std::fixed << std::setprecision(1) << secs << " s)"
              << std::defaultfloat << '\n';
    rows.push_back({{"module", mod}, {"max_rel_error", res.max_rel_error}, {"worst", res.worst},
                    {"checked", res.checked}, {"pass", pass}, {"seconds", secs}});
  }
  m.results = {{"threshold", a.threshold}, {"modules", rows}, {"pass", ok}};
  const fs::path out = a.common.out;
  ensure_dir(out);
  if (!ok) {
    m.status = "failed";
    m.error = "relative error above threshold";
  }
  return ok ? kExitOk : kExitGate;
}

// ---------------------------------------------------------------- ablation

struct AblationArgs {
  Common common;
  std::string data;
  std::vector<std::string> rows = {"B0", "B1", "B2", "B3", "B4"};
};

int cmd_ablation(const AblationArgs& a, RunManifest& m) {
  RunConfig rc = resolve_config(a.common);
  m.config = to_config_json(rc);
  m.seed = rc.train.seed;
  std::vector<AblationRow> rows;
  for (const auto& r : a.rows) rows.push_back(ablation_row_from_string(r));
  const auto train_set = load_split(rc, a.data, Split::train);
  const auto val_set = load_split(rc, a.data, rc.data.val_split);
  const fs::path out = a.common.out;
  ensure_dir(out);
  const auto results = run_ablation(train_set, val_set, rows, rc.model, rc.train);
  write_ablation_csv(out / "ablation.csv", results);
  m.artifacts["ablation_csv"] = (out / "ablation.csv").string();
  bool all_ok = true;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : results) {
    all_ok = all_ok && r.ok();
    std::cout << to_string(r.row) << "  M=" << r.recalibration << " D=" << r.condenser << " C=" << r.location_counter
              << "  params " << r.parameters;
    if (r.train) std::cout << "  train mae " << format_metric(r.train->mae) << " mse " << format_metric(r.train->mse);
    if (r.val) std::cout << "  val mae " << format_metric(r.val->mae) << " mse " << format_metric(r.val->mse);
    if (!r.ok()) std::cout << "  error: " << r.error;
    std::cout << '\n';
    table.push_back({{"row", to_string(r.row)}, {"parameters", r.parameters}, {"ok", r.ok()}, {"error", r.error}});
  }
  m.results = {{"rows", table}};
  if (!all_ok) {
    m.status = "failed";
    m.error = "one or more ablation rows failed";
  }
  return all_ok ? kExitOk : kExitFailure;
}

int run(int argc, char** argv);

// ---------------------------------------------------------------- replay

int cmd_replay(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot read manifest: " + manifest_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed manifest " + manifest_path + ": " + e.what());
  }
  auto args = j.at("argv").get<std::vector<std::string>>();
  if (args.size() < 2 || args[1] == "replay") throw DataError("manifest does not record a replayable command");
  std::vector<char*> ptrs;
  for (auto& s : args) ptrs.push_back(s.data());
  return run(static_cast<int>(ptrs.size()), ptrs.data());
}

int run(int argc, char** argv) {
  CLI::App app{"Exemplar-free class-agnostic counting: training and evaluation tool"};
  app.set_version_flag("--version", GCNET_VERSION);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic repeated-object dataset");
  add_common(c_synth, synth.common, "data/synthetic");
  c_synth->add_option("--count", synth.count, "training records")->capture_default_str();
  c_synth->add_option("--val-count", synth.val_count, "validation records after the training ones")->capture_default_str();
  c_synth->add_option("--first", synth.first, "index of the first record")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "generator seed");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model");
  add_common(c_train, tr.common, "runs/train");
  c_train->add_option("--data", tr.data, std::string("dataset directory or FSC147 root (default: config, then ") +
                                             kDataRootEnv + ")");
  c_train->add_option("--ablation", tr.ablation, "ablation row B0..B4");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(c_eval, ev.common, "runs/eval");
  c_eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  c_eval->add_option("--data", ev.data, "dataset directory or FSC147 root");
  c_eval->add_option("--split", ev.split, "train, val or test")->capture_default_str();

  PredictArgs pr;
  auto* c_pred = app.add_subcommand("predict", "count objects in one image");
  add_common(c_pred, pr.common, "runs/predict");
  c_pred->add_option("--checkpoint", pr.checkpoint, "checkpoint file")->required();
  c_pred->add_option("--image", pr.image, "image file")->required();
  c_pred->add_option("--heatmap", pr.heatmap, "write the similarity map as a PNG");

  GradcheckArgs gc;
  auto* c_grad = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  add_common(c_grad, gc.common, "runs/gradcheck");
  c_grad->add_option("--module", gc.module, "all, linear, backbone, exemplar_sim, dass, counter or model")
      ->capture_default_str();
  c_grad->add_option("--threshold", gc.threshold, "maximum relative error")->capture_default_str();
  c_grad->add_option("--seed", gc.seed, "input seed")->capture_default_str();
  c_grad->add_option("--image-size", gc.image_size, "side of the square test image")->capture_default_str();

  AblationArgs ab;
  auto* c_abl = app.add_subcommand("ablation", "train the B0..B4 variants with one budget");
  add_common(c_abl, ab.common, "runs/ablation");
  c_abl->add_option("--data", ab.data, "dataset directory or FSC147 root");
  c_abl->add_option("--rows", ab.rows, "rows to run")->delimiter(',')->capture_default_str();

  std::string replay_path;
  auto* c_replay = app.add_subcommand("replay", "re-run the command recorded in a run manifest");
  c_replay->add_option("manifest", replay_path, "run_manifest.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (c_replay->parsed()) return cmd_replay(replay_path);

  RunManifest m;
  m.argv.assign(argv, argv + argc);
  std::string out;
  int code = kExitOk;
  try {
    if (c_synth->parsed()) { m.command = "synth"; out = synth.common.out; code = cmd_synth(synth, m); }
    if (c_train->parsed()) { m.command = "train"; out = tr.common.out; code = cmd_train(tr, m); }
    if (c_eval->parsed()) { m.command = "eval"; out = ev.common.out; code = cmd_eval(ev, m); }
    if (c_pred->parsed()) { m.command = "predict"; out = pr.common.out; code = cmd_predict(pr, m); }
    if (c_grad->parsed()) { m.command = "gradcheck"; out = gc.common.out; code = cmd_gradcheck(gc, m); }
    if (c_abl->parsed()) { m.command = "ablation"; out = ab.common.out; code = cmd_ablation(ab, m); }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    m.status = "error";
    m.error = e.what();
    code = kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    m.status = "error";
    m.error = e.what();
    code = kExitFailure;
  }
  // Failed runs still leave a manifest when the output directory is usable.
  std::error_code ec;
  if (!out.empty() && fs::is_directory(out, ec)) {
    try {
      m.write(out);
    } catch (const std::exception& e) {
      std::cerr << "warning: " << e.what() << '\n';
    }
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
