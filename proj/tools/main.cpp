// solarchip command line: synthetic archive generation, contrastive
// pretraining, and the downstream evaluation protocols.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "solarchip/archive.hpp"
#include "solarchip/checkpoint.hpp"
#include "solarchip/eval.hpp"
#include "solarchip/reporting.hpp"
#include "solarchip/trainer.hpp"

namespace fs = std::filesystem;
using namespace solarchip;

namespace {

// SOLARCHIP_OUT_ROOT prefixes relative output paths when set.
std::string resolve_out(const std::string& out) {
  if (out.empty() || fs::path(out).is_absolute()) return out;
  const char* root = std::getenv("SOLARCHIP_OUT_ROOT");
  if (!root || !*root) return out;
  return (fs::path(root) / out).string();
}

void check_collision(const std::string& dir, bool force) {
  if (!force && fs::exists(RunManifest::path_in(dir)))
    throw std::runtime_error("output directory already holds a run (" + dir +
                             "); pass --force to overwrite");
}

KvConfig load_config(const std::string& path) {
  return path.empty() ? KvConfig() : KvConfig::from_file(path);
}

std::int64_t split_boundary(const std::vector<SolarSample>& samples, double train_frac) {
  const auto idx = static_cast<std::size_t>(train_frac * static_cast<double>(samples.size()));
  if (idx == 0 || idx >= samples.size()) return samples.back().timestamp + 1;
  return samples[idx].timestamp;
}

struct EvalData {
  LoadedArchive archive;
  std::vector<SolarSample> train, test;
};

EvalData load_split(const std::string& archive_dir, double train_frac) {
  EvalData d;
  d.archive = load_archive(archive_dir);
  auto [train, test] =
      split_by_time(d.archive.samples, split_boundary(d.archive.samples, train_frac));
  d.train = std::move(train);
  d.test = std::move(test);
  return d;
}

BackboneConfig backbone_from(const KvConfig& cfg, const ArchiveMeta& meta) {
  BackboneConfig b;
  b.kind = backbone_from_name(cfg.get("backbone", "transformer"));
  b.side = meta.side;
  b.patch = static_cast<int>(cfg.get_int("patch", meta.patch_size));
  b.d_model = static_cast<int>(cfg.get_int("d_model", 32));
  b.d_ctr = static_cast<int>(cfg.get_int("d_ctr", 16));
  b.depth = static_cast<int>(cfg.get_int("depth", 2));
  b.heads = static_cast<int>(cfg.get_int("heads", 4));
  b.validate();
  return b;
}

int cmd_gen_data(const KvConfig& cfg, const std::string& out, bool force) {
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 7));
  const int count = static_cast<int>(cfg.get_int("count", 256));
  const int side = static_cast<int>(cfg.get_int("side", 64));
  const int patch = static_cast<int>(cfg.get_int("patch_size", 8));
  if (count < 1) {
    std::cerr << "gen-data: --count must be >= 1\n";
    return 1;
  }
  check_collision(out, force);

  RunManifest manifest(out, "gen-data", hash_hex(cfg.canonical()), seed);
  manifest.begin();
  GeneratedArchive arc = generate_archive(seed, count, side);
  save_archive(arc, patch, out);  // rewrites manifest.txt with the archive keys
  RunManifest final_manifest(out, "gen-data", hash_hex(cfg.canonical()), seed);
  final_manifest.set("side", std::to_string(side));
  final_manifest.set("count", std::to_string(count));
  final_manifest.set("patch_size", std::to_string(patch));
  final_manifest.set("domain", "raw");
  final_manifest.set("thresholds", arc.thresholds.to_string());
  final_manifest.set("format", "solarchip-archive-v1");
  final_manifest.finalize({"labels.csv", "grids"});
  std::cout << "gen-data: wrote " << count << " samples (side " << side << ") to " << out << "\n";
  return 0;
}

int cmd_pretrain(const KvConfig& cfg, const std::string& archive_dir, const std::string& out,
                 bool force) {
  check_collision(out, force);
  EvalData data = load_split(archive_dir, cfg.get_double("train_frac", 0.75));

  TrainConfig tcfg;
  tcfg.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 7));
  tcfg.steps = static_cast<int>(cfg.get_int("steps", 500));
  tcfg.batch = static_cast<int>(cfg.get_int("batch", 16));
  tcfg.lr = cfg.get_double("lr", 1e-3);
  tcfg.weights.lambda1 = cfg.get_double("lambda1", 1.0);
  tcfg.weights.lambda2 = cfg.get_double("lambda2", 1.0);
  tcfg.weights.lambda3 = cfg.get_double("lambda3", 1.0);
  tcfg.weights.use_rec = cfg.get_bool("use_rec", true);
  tcfg.modality_sample = static_cast<int>(cfg.get_int("modality_sample", 3));
  tcfg.checkpoint_every = static_cast<int>(cfg.get_int("checkpoint_every", 0));
  tcfg.clip_norm = cfg.get_double("clip_norm", 5.0);
  tcfg.augment = cfg.get_bool("augment", true);
  tcfg.validate();
  BackboneConfig bcfg = backbone_from(cfg, data.archive.meta);

  RunManifest manifest(out, "pretrain", hash_hex(cfg.canonical()), tcfg.seed);
  manifest.set("archive", archive_dir);
  manifest.set("backbone", backbone_name(bcfg.kind));
  manifest.begin();

  FitResult result = fit(bcfg, tcfg, data.train, out);
  write_loss_csv(result.history, out + "/loss.csv");
  save_train_state(result.state, out + "/checkpoint.bin");
  manifest.finalize({"loss.csv", "checkpoint.bin"});

  if (!result.history.empty()) {
    const auto& last = result.history.back();
    std::cout << "pretrain: step " << last.step << " rec " << last.rec << " cls " << last.cls
              << " pat " << last.pat << " int " << last.intra << " total " << last.total << "\n";
  }
  std::cout << "pretrain: wrote " << out << "/checkpoint.bin\n";
  return 0;
}

std::vector<SolarSample> balanced_set(const std::vector<SolarSample>& raw, std::uint64_t seed) {
  std::map<std::int64_t, FlareClass> labels;
  std::map<std::int64_t, const SolarSample*> by_t;
  for (const auto& s : raw) {
    labels[s.timestamp] = s.label.value_or(FlareClass::None);
    by_t[s.timestamp] = &s;
  }
  std::vector<SolarSample> out;
  for (auto t : balance_nonflare(labels, seed)) out.push_back(signed_log(*by_t.at(t)));
  return out;
}

int cmd_eval(const KvConfig& cfg, const std::string& kind, const std::string& archive_dir,
             const std::string& checkpoint, const std::string& out, bool frozen, bool force,
             bool dump_images) {
  check_collision(out, force);
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 7));
  EvalData data = load_split(archive_dir, cfg.get_double("train_frac", 0.75));

  RunManifest manifest(out, "eval-" + kind, hash_hex(cfg.canonical()), seed);
  manifest.set("archive", archive_dir);

  MultiModalModel model;
  if (kind != "ablate") {
    if (checkpoint.empty() || !fs::exists(checkpoint))
      throw std::runtime_error("eval " + kind + ": checkpoint not found: " +
                               (checkpoint.empty() ? "(none given)" : checkpoint));
    model = load_checkpoint(checkpoint).model;
    manifest.set("checkpoint", checkpoint);
    manifest.set("checkpoint_manifest",
                 RunManifest::hash_of(fs::path(checkpoint).parent_path().string()));
  }
  manifest.begin();

  std::vector<std::string> outputs;
  if (kind == "probe") {
    ProbeConfig pc;
    pc.frozen = frozen;
    pc.epochs = static_cast<int>(cfg.get_int("probe_epochs", 300));
    pc.lr = cfg.get_double("probe_lr", 0.05);
    pc.seed = seed;
    auto train_set = balanced_set(data.train, seed);
    auto test_set = balanced_set(data.test, seed + 1);
    ProbeHead head = train_probe(model, train_set, pc);
    auto preds = probe_predict(model, head, test_set);
    std::vector<FlareClass> truth;
    for (const auto& s : test_set) truth.push_back(s.label.value_or(FlareClass::None));
    auto acc = classification_accuracy(preds, truth);
    write_probe_csv(skill_scores(contingency(preds, truth, FlareClass::M)),
                    skill_scores(contingency(preds, truth, FlareClass::C)), acc.all,
                    out + "/probe_scores.csv");
    outputs.push_back("probe_scores.csv");
    std::cout << "eval probe: ALL acc " << acc.all << " on " << test_set.size() << " samples\n";
  } else if (kind == "fewshot") {
    FewShotConfig fs_cfg;
    fs_cfg.probe.frozen = frozen;
    fs_cfg.probe.epochs = static_cast<int>(cfg.get_int("probe_epochs", 300));
    fs_cfg.probe.lr = cfg.get_double("probe_lr", 0.05);
    fs_cfg.balance_seed = seed;
    const int n_seeds = static_cast<int>(cfg.get_int("fewshot_seeds", 5));
    fs_cfg.seeds.clear();
    for (int i = 0; i < n_seeds; ++i)
      fs_cfg.seeds.push_back(seed + static_cast<std::uint64_t>(i));
    auto cells = few_shot(model, data.train, data.test, fs_cfg);
    write_fewshot_csv(cells, out + "/fewshot.csv");
    outputs.push_back("fewshot.csv");
    std::cout << "eval fewshot: " << cells.size() << " cells\n";
  } else if (kind == "ablate") {
    AblationConfig ab;
    ab.conv = backbone_from(cfg, data.archive.meta);
    ab.conv.kind = BackboneKind::Conv;
    ab.transformer = backbone_from(cfg, data.archive.meta);
    ab.transformer.kind = BackboneKind::Transformer;
    ab.train.steps = static_cast<int>(cfg.get_int("ablate_steps", 120));
    ab.train.batch = static_cast<int>(cfg.get_int("ablate_batch", 8));
    ab.train.modality_sample = static_cast<int>(cfg.get_int("modality_sample", 3));
    ab.train.lr = cfg.get_double("lr", 1e-3);
    ab.probe.epochs = static_cast<int>(cfg.get_int("probe_epochs", 300));
    ab.balance_seed = seed;
    const int n_seeds = static_cast<int>(cfg.get_int("ablate_seeds", 5));
    ab.seeds.clear();
    for (int i = 0; i < n_seeds; ++i) ab.seeds.push_back(seed + static_cast<std::uint64_t>(i));
    auto rows = ablation_grid(data.train, data.test, ab);
    write_ablation_csv(rows, out + "/ablation.csv");
    outputs.push_back("ablation.csv");
    std::cout << "eval ablate: " << rows.size() << " rows\n";
  } else if (kind == "translate") {
    std::vector<SolarSample> train_sl, test_sl;
    for (const auto& s : data.train) train_sl.push_back(signed_log(s));
    for (const auto& s : data.test) test_sl.push_back(signed_log(s));
    auto rows = run_translation_probe(model, train_sl, test_sl);
    write_translation_csv(rows, out + "/translation.csv");
    outputs.push_back("translation.csv");
    if (dump_images && !test_sl.empty()) {
      for (int band = 1; band <= 10; ++band) {
        TranslationProbe probe = train_translation_probe(model, train_sl, 0, band);
        ImageGrid pred = translate(model, probe, test_sl[0]);
        const std::string base = std::string("band_") + ModalityId::name(band);
        write_pgm(pred, out + "/" + base + "_translated.pgm");
        write_pgm(test_sl[0].images[static_cast<std::size_t>(band)],
                  out + "/" + base + "_truth.pgm");
        outputs.push_back(base + "_translated.pgm");
        outputs.push_back(base + "_truth.pgm");
      }
    }
    std::cout << "eval translate: " << rows.size() << " rows\n";
  } else {
    std::cerr << "eval: unknown kind " << kind << "\n";
    return 1;
  }
  manifest.finalize(outputs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"solarchip: multi-granularity contrastive pretraining on a synthetic "
               "multi-instrument solar archive"};
  app.require_subcommand(1);

  std::string config_path, out, archive_dir, checkpoint, kind;
  bool force = false, finetune = false, dump_images = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value config file");
    sub->add_option("--out", out, "output directory")->required();
    sub->add_flag("--force", force, "overwrite an existing run directory");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic archive");
  add_common(gen);
  std::string g_seed, g_count, g_side;
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--count", g_count, "number of hourly samples");
  gen->add_option("--side", g_side, "image side length");

  CLI::App* pre = app.add_subcommand("pretrain", "run contrastive pretraining");
  add_common(pre);
  pre->add_option("--archive", archive_dir, "archive directory")->required();
  std::string p_seed, p_steps, p_l1, p_l2, p_l3, p_backbone, p_batch;
  pre->add_option("--seed", p_seed, "training seed");
  pre->add_option("--steps", p_steps, "gradient steps");
  pre->add_option("--batch", p_batch, "batch size");
  pre->add_option("--lambda1", p_l1, "class-level loss weight");
  pre->add_option("--lambda2", p_l2, "patch-level loss weight");
  pre->add_option("--lambda3", p_l3, "intra-sample loss weight");
  pre->add_option("--backbone", p_backbone, "conv or transformer");

  CLI::App* ev = app.add_subcommand("eval", "run a downstream evaluation");
  add_common(ev);
  ev->add_option("--kind", kind, "probe | fewshot | ablate | translate")->required();
  ev->add_option("--archive", archive_dir, "archive directory")->required();
  ev->add_option("--checkpoint", checkpoint, "pretraining checkpoint (.bin)");
  std::string e_seed;
  ev->add_option("--seed", e_seed, "evaluation seed");
  ev->add_flag("--finetune", finetune, "fine-tune the encoder in probes");
  ev->add_flag("--dump-images", dump_images, "write translated/truth grayscale panels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // help/version exit 0; any parse error is usage
  }

  try {
    KvConfig cfg = load_config(config_path);
    out = resolve_out(out);
    if (gen->parsed()) {
      if (!g_seed.empty()) cfg.set("seed", g_seed);
      if (!g_count.empty()) cfg.set("count", g_count);
      if (!g_side.empty()) cfg.set("side", g_side);
      return cmd_gen_data(cfg, out, force);
    }
    if (pre->parsed()) {
      if (!p_seed.empty()) cfg.set("seed", p_seed);
      if (!p_steps.empty()) cfg.set("steps", p_steps);
      if (!p_batch.empty()) cfg.set("batch", p_batch);
      if (!p_l1.empty()) cfg.set("lambda1", p_l1);
      if (!p_l2.empty()) cfg.set("lambda2", p_l2);
      if (!p_l3.empty()) cfg.set("lambda3", p_l3);
      if (!p_backbone.empty()) cfg.set("backbone", p_backbone);
      return cmd_pretrain(cfg, archive_dir, out, force);
    }
    if (ev->parsed()) {
      if (!e_seed.empty()) cfg.set("seed", e_seed);
      return cmd_eval(cfg, kind, archive_dir, checkpoint, out, !finetune, force, dump_images);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
