// Copyright 2026 The vgsfod Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "vgsfod/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vgsfod/alignment.hpp"
#include "vgsfod/errors.hpp"
#include "vgsfod/feature_store.hpp"
#include "vgsfod/mining.hpp"
#include "vgsfod/prototypes.hpp"
#include "vgsfod/synth_world.hpp"
#include "vgsfod/trainer.hpp"

namespace vgsfod::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  int workers = 1;
  std::string config_path;
  bool quiet = false;
  json config = json::object();
  CLI::App* app = nullptr;
};

void note(const Globals& g, const std::string& msg) {
  if (!g.quiet) std::cerr << "vgsfod: " << msg << '\n';
}

const json* section(const Globals& g, const char* name) {
  if (!g.config.contains(name)) return nullptr;
  const json& s = g.config.at(name);
  if (!s.is_object()) throw ValidationError("config section must be an object", {name});
  return &s;
}

// Flag > config file > built-in default.
template <typename T>
T pick(const CLI::App* sub, const char* flag, const T& flag_value, const json* sec,
       const char* key, const T& fallback) {
  if (sub->count(flag) > 0) return flag_value;
  if (sec && sec->contains(key)) {
    try {
      return sec->at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError("config value has the wrong type", {key});
    }
  }
  return fallback;
}

void load_config(Globals& g) {
  static const std::set<std::string> known = {"seed", "workers", "world", "trainer", "extract", "mine"};
  if (!g.config_path.empty()) {
    g.config = read_json(g.config_path);
    if (!g.config.is_object()) throw ValidationError("config file must hold a JSON object");
    std::vector<std::string> unknown;
    for (const auto& [k, v] : g.config.items())
      if (!known.count(k)) unknown.push_back(k);
    // world and trainer sections validate themselves when parsed.
    static const std::map<std::string, std::set<std::string>> flat = {
        {"extract", {"k", "bins", "bg_iou"}},
        {"mine", {"tau_low", "sim", "dynamic", "fixed_high"}}};
    for (const auto& [name, keys] : flat) {
      if (!g.config.contains(name) || !g.config[name].is_object()) continue;
      for (const auto& [k, v] : g.config[name].items())
        if (!keys.count(k)) unknown.push_back(name + "." + k);
    }
    if (!unknown.empty()) throw ValidationError("unknown config keys", unknown);
  }
  const json* root = &g.config;
  g.seed = pick<std::uint64_t>(g.app, "--seed", g.seed, root, "seed", 1);
  g.workers = pick<int>(g.app, "--workers", g.workers, root, "workers", 1);
  if (g.workers < 1) throw ValidationError("workers must be >= 1");
}

bool seed_given(const Globals& g) { return g.app->count("--seed") > 0 || g.config.contains("seed"); }

WorldConfig resolve_world(const Globals& g, const std::string& world_path) {
  WorldConfig w;
  if (!world_path.empty()) {
    w = world_config_from_json(read_json(world_path));
    if (g.app->count("--seed")) w.seed = g.seed;
  } else {
    if (const json* s = section(g, "world")) w = world_config_from_json(*s);
    if (seed_given(g)) w.seed = g.seed;
  }
  return w;
}

TrainerConfig resolve_trainer(const Globals& g) {
  TrainerConfig t;
  if (const json* s = section(g, "trainer")) t = trainer_config_from_json(*s);
  if (seed_given(g)) t.seed = g.seed;
  t.workers = g.workers;
  return t;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string world, out;
  double labeled = 0.05;
  int num_images = 0;
};

void cmd_generate(const Globals& g, const CLI::App* sub, const GenerateArgs& a) {
  WorldConfig w = resolve_world(g, a.world);
  if (sub->count("--labeled")) w.labeled_fraction = a.labeled;
  if (sub->count("--num-images")) w.num_images = a.num_images;
  w.validate();
  TrainerConfig t = resolve_trainer(g);
  t.validate();

  note(g, "generating world (" + std::to_string(w.num_images) + " + " +
              std::to_string(w.num_eval_images) + " images, seed " + std::to_string(w.seed) + ")");
  const World world = generate_world(w, WorldRole::kTarget, g.workers);
  const fs::path out = a.out;
  write_world(world, out);

  note(g, "pre-fitting the source detector");
  const StudentModel source = source_model(w, t);
  DetectionsById preds;
  for (const auto& im : world.images)
    preds[im.id] = predict(source.det, im.input, im.proposals, t.bins, true);
  write_detections(out / "predictions.json", preds);
  write_json(out / "source_model.json", checkpoint_to_json(source, source.det));
  note(g, "wrote " + (out / "index.json").string());
}

struct ExtractArgs {
  std::string index, out;
  int k = kDefaultComponents;
  int bins = kDefaultRoiBins;
  double bg_iou = kDefaultBackgroundIou;
};

void cmd_extract(const Globals& g, const CLI::App* sub, const ExtractArgs& a) {
  const json* s = section(g, "extract");
  ExtractOptions o;
  o.k = pick(sub, "--k", a.k, s, "k", kDefaultComponents);
  o.bins = pick(sub, "--bins", a.bins, s, "bins", kDefaultRoiBins);
  o.bg_iou = pick(sub, "--bg-iou", a.bg_iou, s, "bg_iou", kDefaultBackgroundIou);
  o.seed = g.seed;
  if (o.k < 1 || o.bins < 1 || !(o.bg_iou > 0 && o.bg_iou <= 1))
    throw ValidationError("invalid extraction options", {"k", "bins", "bg_iou"});
  const DatasetIndex idx = load_dataset(a.index);
  const PrototypeSet p = extract_prototypes(idx, o);
  ensure_parent(a.out);
  write_prototypes(a.out, p);
  note(g, "wrote prototypes for " + std::to_string(p.num_classes) + " classes to " + a.out);
}

struct MineArgs {
  std::string index, protos, predictions, out, report;
  double tau_low = kDefaultTauLow;
  double sim = kDefaultSimThreshold;
  bool dynamic = false;
  double fixed_high = 0.7;
  int batch = 4;
};

void cmd_mine(const Globals& g, const CLI::App* sub, const MineArgs& a) {
  const json* s = section(g, "mine");
  MiningConfig mc;
  mc.tau_low = pick(sub, "--tau-low", a.tau_low, s, "tau_low", kDefaultTauLow);
  mc.sim_threshold = pick(sub, "--sim", a.sim, s, "sim", kDefaultSimThreshold);
  bool dynamic = pick(sub, "--dynamic", a.dynamic, s, "dynamic", true);
  if (sub->count("--fixed-high")) dynamic = false;
  mc.mode = dynamic ? ThresholdMode::kDynamic : ThresholdMode::kFixed;
  mc.tau_high_fixed = pick(sub, "--fixed-high", a.fixed_high, s, "fixed_high", 0.7);
  mc.validate();
  if (a.batch < 1) throw ValidationError("batch must be >= 1");

  const DatasetIndex idx = load_dataset(a.index);
  const PrototypeSet protos = read_prototypes(a.protos);
  const fs::path pred_path = a.predictions.empty() ? idx.root / "predictions.json" : fs::path(a.predictions);
  const DetectionsById all = read_detections(pred_path);
  DetectionsById preds, gt;
  for (const auto& id : idx.ids(Split::kUnlabeled)) {
    auto it = all.find(id);
    preds[id] = it == all.end() ? std::vector<Detection>{} : it->second;
    gt[id] = idx.gt(id);
  }
  auto loader = [&idx](const std::string& id) { return load_vfm_map(idx, id); };
  const auto res = mine_dataset(preds, loader, protos, mc, init_threshold_state(mc),
                                static_cast<std::size_t>(a.batch));
  ensure_parent(a.out);
  json mined = mined_to_json(res.per_image);
  write_json(a.out, json{{"schema_version", kSchemaVersion},
                         {"tau_high_final", res.final_state.tau_high},
                         {"tau_trace", res.tau_trace},
                         {"images", mined}});
  if (!a.report.empty()) {
    ensure_parent(a.report);
    json r = mining_report(res.per_image, gt).to_json();
    r["schema_version"] = kSchemaVersion;
    write_json(a.report, r);
  }
  note(g, "mined " + std::to_string(res.per_image.size()) + " images");
}

struct AlignArgs {
  std::string index, protos, checkpoint, out;
};

void cmd_align_eval(const Globals& g, const AlignArgs& a) {
  TrainerConfig t = resolve_trainer(g);
  t.validate();
  const DatasetIndex idx = load_dataset(a.index);
  const PrototypeSet protos = read_prototypes(a.protos);
  const StudentModel m = checkpoint_from_json(read_json(a.checkpoint));
  if (m.det.num_classes() != idx.num_classes || protos.num_classes != idx.num_classes)
    throw ValidationError("checkpoint, prototypes and index disagree on the class count");

  // Every image with a detector input, forwarded on the identity view.
  const int C = idx.num_classes;
  const int K = protos.components;
  std::vector<std::vector<Eigen::RowVectorXd>> q(static_cast<std::size_t>(C));
  double sim_sum = 0;
  std::size_t images = 0, queries = 0;
  for (const auto& rec : idx.images) {
    if (rec.input_file.empty()) continue;
    const FeatureMap input = load_input_map(idx, rec.image_id);
    const FeatureMap vfm = load_vfm_map(idx, rec.image_id);
    const auto f = forward(m.det, input, idx.proposals_of(rec.image_id), t.bins);
    sim_sum += image_alignment_loss(f.levels, vfm, m.convs).loss;
    ++images;
    for (Eigen::Index r = 0; r < f.logits.rows(); ++r) {
      Eigen::Index arg = 0;
      f.logits.row(r).maxCoeff(&arg);
      if (arg == C) continue;
      f.logits.row(r).head(C).maxCoeff(&arg);
      q[static_cast<std::size_t>(arg)].push_back(f.queries.row(r));
      ++queries;
    }
  }
  if (images == 0) throw ValidationError("index has no detector input maps");
  Rng rng(t.seed, RngStream::kSinkhorn, 0);
  std::vector<ClassPrototypeBatch> batches(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    auto& rows = q[static_cast<std::size_t>(c)];
    auto& b = batches[static_cast<std::size_t>(c)];
    if (rows.empty()) {
      b.prototypes = Matrix::Zero(K, m.det.query_dim());
      b.present.assign(static_cast<std::size_t>(K), false);
      b.mass = Vector::Zero(K);
      continue;
    }
    Matrix Q(static_cast<Eigen::Index>(rows.size()), m.det.query_dim());
    for (std::size_t i = 0; i < rows.size(); ++i) Q.row(static_cast<Eigen::Index>(i)) = rows[i];
    const auto A = sinkhorn_assign(sinkhorn_random_init(Q.rows(), K, rng), t.sinkhorn);
    b = aggregate_prototypes(Q, A.a);
  }
  const auto cr = contrastive_loss(batches, protos, m.mlp, t.contrastive);
  ensure_parent(a.out);
  write_json(a.out, json{{"schema_version", kSchemaVersion},
                         {"contrastive_loss", cr.loss},
                         {"contrastive_terms", cr.terms},
                         {"image_alignment_loss", sim_sum / static_cast<double>(images)},
                         {"images", images},
                         {"foreground_queries", queries}});
  note(g, "alignment metrics over " + std::to_string(images) + " images");
}

struct SimulateArgs {
  std::string world, mode, out, checkpoint, summary;
  double labeled = 0.05;
  int steps = 2000;
  double lr = 0.05;
  int eval_every = 50;
};

void cmd_simulate(const Globals& g, const CLI::App* sub, const SimulateArgs& a) {
  WorldConfig w = resolve_world(g, a.world);
  if (sub->count("--labeled")) w.labeled_fraction = a.labeled;
  TrainerConfig t = resolve_trainer(g);
  if (sub->count("--mode")) t.mode = train_mode_from_string(a.mode);
  if (sub->count("--steps")) t.steps = a.steps;
  if (sub->count("--lr")) t.lr = a.lr;
  if (sub->count("--eval-every")) t.eval_every = a.eval_every;
  if (!a.out.empty()) t.dump_dir = fs::path(a.out).parent_path() / "diagnostics";
  w.validate();
  t.validate();

  note(g, std::string("simulating ") + to_string(t.mode) + " for " + std::to_string(t.steps) + " steps");
  const auto res = simulate(w, t, [&g](const RunRecord& r) {
    if (r.eval) note(g, "step " + std::to_string(r.step) + " mAP " + std::to_string(r.eval->map));
  });
  ensure_parent(a.out);
  write_jsonl(a.out, res.log.to_jsonl());
  if (!a.checkpoint.empty()) {
    ensure_parent(a.checkpoint);
    write_json(a.checkpoint, checkpoint_to_json(res.student, res.teacher));
  }
  if (!a.summary.empty()) {
    ensure_parent(a.summary);
    json s{{"schema_version", kSchemaVersion},
           {"mode", to_string(t.mode)},
           {"world", world_config_to_json(w)},
           {"trainer", trainer_config_to_json(t)},
           {"initial_eval", res.initial_eval.to_json()},
           {"final_eval", res.final_eval.to_json()}};
    if (res.log.eval_trace().size() >= 2) s["stability"] = res.stability.to_json();
    write_json(a.summary, s);
  }
}

struct ReportArgs {
  std::string runlog, out;
};

std::string csv_number(const json& v) {
  if (v.is_null()) return "";
  std::ostringstream os;
  os.precision(17);
  if (v.is_number_integer() || v.is_number_unsigned()) os << v.get<long long>();
  else os << v.get<double>();
  return os.str();
}

void cmd_report(const Globals& g, const ReportArgs& a) {
  const auto rows = read_jsonl(a.runlog);
  std::ostringstream csv;
  static const char* cols[] = {"step", "loss_sup", "loss_unsup", "loss_con", "loss_sim", "total",
                               "tau_high", "pl_precision", "pl_recall", "pl_count"};
  for (const char* c : cols) csv << c << ',';
  csv << "eval_map,eval_accuracy,checkpoint_hash\n";
  for (const auto& r : rows) {
    for (const char* c : cols) {
      if (!r.contains(c)) throw ValidationError("run log record lacks a field", {c});
      csv << csv_number(r.at(c)) << ',';
    }
    if (r.contains("eval"))
      csv << csv_number(r["eval"]["map"]) << ',' << csv_number(r["eval"]["accuracy"]) << ',';
    else
      csv << ",,";
    csv << r.value("checkpoint_hash", "") << '\n';
  }
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    ensure_parent(a.out);
    std::ofstream f(a.out, std::ios::trunc | std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + a.out);
    f << csv.str();
    if (!f) throw IoError("write failed: " + a.out);
  }
  note(g, "reported " + std::to_string(rows.size()) + " records");
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Semi-supervised source-free detection numerics on synthetic feature worlds", "vgsfod"};
  Globals g;
  g.app = &app;
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", g.seed, "Global random seed");
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--config", g.config_path, "JSON config file (flags take precedence)");
  app.add_flag("--quiet", g.quiet, "Suppress progress messages");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic world dataset");
  gen->add_option("--world", ga.world, "World config JSON");
  gen->add_option("--out", ga.out, "Output directory")->required();
  gen->add_option("--labeled", ga.labeled, "Labeled fraction")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--num-images", ga.num_images, "Train images")->check(CLI::PositiveNumber);

  ExtractArgs ea;
  auto* ext = app.add_subcommand("extract-prototypes", "Cluster reference prototypes");
  ext->add_option("--index", ea.index, "index.json")->required();
  ext->add_option("--k", ea.k, "Components per class")->check(CLI::PositiveNumber);
  ext->add_option("--bins", ea.bins, "ROI-align bins")->check(CLI::PositiveNumber);
  ext->add_option("--bg-iou", ea.bg_iou, "Background candidate IoU ceiling")->check(CLI::Range(0.0, 1.0));
  ext->add_option("--out", ea.out, "prototypes.json")->required();

  MineArgs ma;
  auto* mine_cmd = app.add_subcommand("mine", "Filter predictions into pseudo-labels");
  mine_cmd->add_option("--index", ma.index, "index.json")->required();
  mine_cmd->add_option("--protos", ma.protos, "prototypes.json")->required();
  mine_cmd->add_option("--predictions", ma.predictions, "Predictions (default: predictions.json next to the index)");
  mine_cmd->add_option("--tau-low", ma.tau_low, "Lower confidence threshold")->check(CLI::Range(0.0, 1.0));
  mine_cmd->add_option("--sim", ma.sim, "Prototype similarity threshold");
  mine_cmd->add_flag("--dynamic", ma.dynamic, "Dynamic upper threshold (default)");
  mine_cmd->add_option("--fixed-high", ma.fixed_high, "Fixed upper threshold")->check(CLI::Range(0.0, 1.0));
  mine_cmd->add_option("--batch", ma.batch, "Images per threshold update")->check(CLI::PositiveNumber);
  mine_cmd->add_option("--out", ma.out, "mined.json")->required();
  mine_cmd->add_option("--report", ma.report, "report.json");

  AlignArgs aa;
  auto* align = app.add_subcommand("align-eval", "Report alignment losses without updating");
  align->add_option("--index", aa.index, "index.json")->required();
  align->add_option("--protos", aa.protos, "prototypes.json")->required();
  align->add_option("--checkpoint", aa.checkpoint, "Checkpoint JSON")->required();
  align->add_option("--out", aa.out, "align_metrics.json")->required();

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Run the mean-teacher loop on a synthetic world");
  sim->add_option("--world", sa.world, "World config JSON");
  sim->add_option("--mode", sa.mode, "Training mode")
      ->check(CLI::IsMember({"source_free", "mt_semi", "vpm", "full_vg"}));
  sim->add_option("--labeled", sa.labeled, "Labeled fraction")->check(CLI::Range(0.0, 1.0));
  sim->add_option("--steps", sa.steps, "Optimization steps")->check(CLI::NonNegativeNumber);
  sim->add_option("--lr", sa.lr, "SGD learning rate")->check(CLI::NonNegativeNumber);
  sim->add_option("--eval-every", sa.eval_every, "Steps between evaluations")->check(CLI::PositiveNumber);
  sim->add_option("--out", sa.out, "runlog.jsonl")->required();
  sim->add_option("--checkpoint", sa.checkpoint, "Final checkpoint JSON");
  sim->add_option("--summary", sa.summary, "Summary JSON");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Convert a run log to CSV");
  rep->add_option("--runlog", ra.runlog, "runlog.jsonl")->required();
  rep->add_option("--out", ra.out, "CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "vgsfod: " << e.what() << '\n';
    return e.get_exit_code() == 0 ? kExitOk : kExitValidation;
  }

  try {
    load_config(g);
    if (gen->parsed()) cmd_generate(g, gen, ga);
    else if (ext->parsed()) cmd_extract(g, ext, ea);
    else if (mine_cmd->parsed()) cmd_mine(g, mine_cmd, ma);
    else if (align->parsed()) cmd_align_eval(g, aa);
    else if (sim->parsed()) cmd_simulate(g, sim, sa);
    else if (rep->parsed()) cmd_report(g, ra);
    return kExitOk;
  } catch (const IoError& e) {
    std::cerr << "vgsfod: I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "vgsfod: format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "vgsfod: I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "vgsfod: error: " << e.what() << '\n';
    return kExitValidation;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace vgsfod::cli
