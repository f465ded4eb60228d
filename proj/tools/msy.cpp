// Command-line driver: data generation and preprocessing, training,
// evaluation, ensembling, statistics and the cross-validation experiments.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "msy/checkpoint.hpp"
#include "msy/experiment.hpp"

using namespace msy;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw ConfigError("cannot read " + p.string());
  nlohmann::json j;
  f >> j;
  return j;
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p);
  f << j.dump(2) << "\n";
  if (!f) throw ConfigError("cannot write " + p.string());
}

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<const PyramidImage*> select(const std::vector<PyramidImage>& all, const std::string& ids) {
  std::vector<const PyramidImage*> out;
  if (ids.empty()) {
    for (const auto& s : all) out.push_back(&s);
    return out;
  }
  for (const auto& id : split(ids)) {
    auto it = std::find_if(all.begin(), all.end(), [&](const PyramidImage& s) { return s.id == id; });
    if (it == all.end()) throw ConfigError("no slide '" + id + "' in the dataset");
    out.push_back(&*it);
  }
  return out;
}

EvalOptions eval_options(int patch, int batch, const std::vector<double>& weights, const std::vector<int>& interest) {
  EvalOptions o;
  o.patch_size = patch;
  o.batch_size = batch;
  if (!weights.empty()) o.class_weights = weights;
  if (!interest.empty()) o.classes_of_interest = interest;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale context segmentation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic context-dependent dataset");
  std::string synth_out, synth_params;
  int synth_slides = 8, synth_size = 1024, synth_classes = 4;
  std::uint64_t synth_seed = 100;
  synth->add_option("--out", synth_out, "Dataset directory")->required();
  synth->add_option("--slides", synth_slides, "Number of slides");
  synth->add_option("--size", synth_size, "Base width and height");
  synth->add_option("--classes", synth_classes, "Class count (3 or 4)");
  synth->add_option("--seed", synth_seed, "Seed of the first slide");
  synth->add_option("--params", synth_params, "JSON file with generator parameters");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "Tissue masks and Reinhard normalization");
  std::string prep_data, prep_out, prep_ref;
  prep->add_option("--data", prep_data, "Raw dataset directory")->required();
  prep->add_option("--out", prep_out, "Output dataset directory")->required();
  prep->add_option("--reference", prep_ref, "Reference slide id (default: first)");

  // train
  auto* tr = app.add_subcommand("train", "Train one architecture on one fold");
  std::string tr_config, tr_arch, tr_data, tr_out;
  int tr_fold = 0;
  tr->add_option("--config", tr_config, "Experiment config")->required();
  tr->add_option("--arch", tr_arch, "Architecture preset")->required();
  tr->add_option("--data", tr_data, "Dataset directory (overrides the config)");
  tr->add_option("--fold", tr_fold, "Fold index");
  tr->add_option("--out", tr_out, "Run directory (overrides the config)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or ensemble on validation sub-images");
  std::string ev_ckpt, ev_ens, ev_vset, ev_data, ev_slides, ev_out;
  int ev_patch = 512, ev_batch = 8;
  std::vector<double> ev_weights;
  std::vector<int> ev_interest;
  auto* ev_group = ev->add_option_group("model");
  ev_group->add_option("--checkpoint", ev_ckpt, "Model checkpoint");
  ev_group->add_option("--ensemble", ev_ens, "Ensemble spec (JSON)");
  ev_group->require_option(1);
  ev->add_option("--validation-set", ev_vset, "Validation sub-image list")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--slides", ev_slides, "Comma-separated slide ids (default: all)");
  ev->add_option("--patch-size", ev_patch, "Detail patch size");
  ev->add_option("--batch-size", ev_batch, "Tiles per forward pass");
  ev->add_option("--class-weights", ev_weights, "Class weights")->delimiter(',');
  ev->add_option("--classes-of-interest", ev_interest, "Scored classes")->delimiter(',');
  ev->add_option("--out", ev_out, "Report (JSON)");

  // ensemble
  auto* en = app.add_subcommand("ensemble", "Combine per-scale models and evaluate them");
  std::string en_members, en_combiner = "average", en_regions, en_data, en_slides, en_fit, en_out;
  int en_patch = 512, en_batch = 8;
  en->add_option("--members", en_members, "scale=checkpoint,... e.g. 1=a.ckpt,4=b.ckpt,16=c.ckpt")->required();
  en->add_option("--combiner", en_combiner, "average, majority or logistic");
  en->add_option("--region-list", en_regions, "Validation sub-image list")->required();
  en->add_option("--data", en_data, "Dataset directory")->required();
  en->add_option("--slides", en_slides, "Evaluated slide ids (default: all)");
  en->add_option("--fit-slides", en_fit, "Train-split slide ids for the logistic fit");
  en->add_option("--patch-size", en_patch, "Detail patch size");
  en->add_option("--batch-size", en_batch, "Tiles per forward pass");
  en->add_option("--out", en_out, "Output directory (ensemble spec and report)")->required();

  // stats
  auto* st = app.add_subcommand("stats", "Corrected resampled t-test on per-fold scores");
  std::vector<std::string> st_reports;
  double st_ntrain = 40, st_nval = 10, st_alpha = 0.05;
  bool st_two_sided = false, st_repeats = false;
  std::vector<double> st_power;
  st->add_option("--fold-reports", st_reports, "Model and baseline CSV (fold,weighted_jaccard)")->expected(2);
  st->add_option("--n-train", st_ntrain, "Training samples per fold");
  st->add_option("--n-val", st_nval, "Validation samples per fold");
  st->add_flag("--one-sided,!--two-sided", st_two_sided, "One-sided alternative (default)");
  st->add_flag("--average-repeats", st_repeats, "Average rows that repeat a fold before testing");
  st->add_option("--alpha", st_alpha, "Significance level");
  st->add_option("--power", st_power, "Effect sizes for a power estimate")->delimiter(',');

  // memprobe
  auto* mp = app.add_subcommand("memprobe", "Peak memory per batch size and its linear fit");
  std::string mp_arch = "unet", mp_out;
  std::vector<int> mp_sizes{2, 4, 6, 8, 10, 12, 14};
  int mp_patch = 512, mp_classes = 4;
  double mp_width = 1.0;
  mp->add_option("--arch", mp_arch, "Architecture preset");
  mp->add_option("--batch-sizes", mp_sizes, "Batch sizes")->delimiter(',');
  mp->add_option("--patch-size", mp_patch, "Patch size");
  mp->add_option("--width", mp_width, "Channel width multiplier");
  mp->add_option("--classes", mp_classes, "Class count");
  mp->add_option("--out", mp_out, "Series (JSON)");

  // run-cv
  auto* cv = app.add_subcommand("run-cv", "Cross-validation experiment");
  std::string cv_config, cv_out;
  cv->add_option("--config", cv_config, "Experiment config")->required();
  cv->add_option("--out", cv_out, "Output directory (overrides the config)");

  // run-finetune-cv
  auto* ft = app.add_subcommand("run-finetune-cv", "Fold-matched fine-tuning of a previous run");
  std::string ft_config, ft_source, ft_out;
  ft->add_option("--config", ft_config, "Experiment config of the target dataset")->required();
  ft->add_option("--source-run", ft_source, "Run directory with per-fold checkpoints")->required();
  ft->add_option("--out", ft_out, "Output directory (overrides the config)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      SynthParams p;
      if (!synth_params.empty()) p = read_json(synth_params).get<SynthParams>();
      p.base_size = synth_size;
      p.class_count = synth_classes;
      p.validate();
      fs::create_directories(synth_out);
      std::vector<std::string> ids;
      for (int i = 0; i < synth_slides; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "syn%02d", i);
        save_pyramid(synth_slide(p, synth_seed + static_cast<std::uint64_t>(i), id), fs::path(synth_out) / id);
        ids.push_back(id);
        std::cout << "wrote " << id << std::endl;
      }
      write_dataset_index(synth_out, ids, {{"synthetic", p}, {"seed", synth_seed}});
    } else if (*prep) {
      const Dataset ds = open_dataset(prep_data);
      if (ds.slide_ids.empty()) throw ConfigError("dataset has no slides");
      const std::string ref_id = prep_ref.empty() ? ds.slide_ids.front() : prep_ref;
      const PyramidImage ref = load_pyramid(ds.slide_dir(ref_id));
      const PyramidColorStats ref_stats = color_stats(ref, tissue_masks(ref));
      fs::create_directories(prep_out);
      for (const auto& id : ds.slide_ids) {
        const PyramidImage img = load_pyramid(ds.slide_dir(id));
        save_pyramid(reinhard_normalize(img, ref_stats, tissue_masks(img)), fs::path(prep_out) / id);
        std::cout << "normalized " << id << std::endl;
      }
      nlohmann::json stats = nlohmann::json::object();
      for (const auto& [scale, s] : ref_stats) stats[std::to_string(scale)] = s;
      write_dataset_index(prep_out, ds.slide_ids,
                          {{"source", prep_data}, {"reference", ref_id}, {"reference_stats", stats}, {"normalized", true}});
    } else if (*tr) {
      ExperimentConfig cfg = load_experiment(tr_config);
      if (!tr_data.empty()) {
        cfg.dataset = {};
        cfg.dataset.path = tr_data;
      }
      if (!tr_out.empty()) cfg.out_dir = tr_out;
      cfg.architectures = {tr_arch};
      cfg.baseline = tr_arch;
      cfg.ensembles.clear();
      const FoldReport r = run_fold(cfg, tr_arch, tr_fold, &std::cout);
      std::cout << nlohmann::json(r).dump(2) << std::endl;
    } else if (*ev) {
      const auto slides = open_dataset(ev_data).load_all();
      const ValidationSet vset = load_validation_set(ev_vset);
      EvalOptions eo = eval_options(ev_patch, ev_batch, ev_weights, ev_interest);
      FoldReport r;
      if (!ev_ckpt.empty()) {
        auto ck = load_checkpoint(ev_ckpt);
        r = evaluate_model(*ck.model, select(slides, ev_slides), vset, eo);
      } else {
        Ensemble e = Ensemble::load(read_json(ev_ens).get<EnsembleSpec>(), eo);
        r = evaluate_labeler(e.labeler(), select(slides, ev_slides), vset, eo);
        r.arch = "ensemble";
      }
      const auto j = nlohmann::json(r);
      if (!ev_out.empty()) write_json(ev_out, j);
      std::cout << j.dump(2) << std::endl;
    } else if (*en) {
      const auto slides = open_dataset(en_data).load_all();
      const ValidationSet vset = load_validation_set(en_regions);
      EnsembleSpec spec;
      spec.combiner = parse_combiner(en_combiner);
      for (const auto& m : split(en_members)) {
        const auto eq = m.find('=');
        if (eq == std::string::npos) throw ConfigError("member '" + m + "' is not scale=checkpoint");
        spec.members[std::stoi(m.substr(0, eq))] = m.substr(eq + 1);
      }
      EvalOptions eo = eval_options(en_patch, en_batch, {}, {});
      Ensemble e = Ensemble::load(spec, eo);
      if (spec.combiner == Combiner::Logistic) {
        if (en_fit.empty()) throw ConfigError("the logistic combiner needs --fit-slides");
        e.fit(select(slides, en_fit), vset);
        spec.logistic = e.logistic();
      }
      FoldReport r = evaluate_labeler(e.labeler(), select(slides, en_slides), vset, eo);
      r.arch = "ensemble-" + en_combiner;
      fs::create_directories(en_out);
      write_json(fs::path(en_out) / "ensemble.json", spec);
      write_json(fs::path(en_out) / "report.json", r);
      std::cout << nlohmann::json(r).dump(2) << std::endl;
    } else if (*st) {
      const bool one_sided = !st_two_sided;
      std::cout << "correction factor " << correction_factor(5, st_ntrain, st_nval) << " (n=5)\n";
      if (st_reports.size() == 2) {
        const auto a = read_fold_scores_csv(st_reports[0], st_repeats);
        const auto b = read_fold_scores_csv(st_reports[1], st_repeats);
        try {
          const TTest t = corrected_t_test(CvComparison::from_scores(a, b, st_ntrain, st_nval, one_sided));
          std::cout << "mean difference " << t.mean << "  t " << t.t << "  df " << t.df << "  p " << t.p
                    << (one_sided ? " (one-sided)" : " (two-sided)") << "  " << (t.p <= st_alpha ? "reject" : "keep")
                    << " at alpha " << st_alpha << "\n";
        } catch (const TieError& e) {
          std::cout << "tie: " << e.what() << "\n";
        }
      }
      for (double d : st_power)
        std::cout << "power at delta " << d << ": " << power_estimate(d, 0.045, 5, st_ntrain, st_nval, st_alpha) << "\n";
    } else if (*mp) {
      TensorMemoryMeter meter;
      const MemProbeSeries s = memprobe(preset(mp_arch, mp_classes, mp_width), mp_sizes, mp_patch, meter);
      nlohmann::json pts = nlohmann::json::array();
      for (const auto& p : s.points) pts.push_back({{"batch_size", p.batch_size}, {"memory_gb", p.memory_gb}});
      const nlohmann::json j = {{"arch", s.arch}, {"points", pts},   {"slope_gb_per_patch", s.slope},
                                {"intercept_gb", s.intercept}, {"r2", s.r2}, {"slope_se", s.slope_se}};
      if (!mp_out.empty()) write_json(mp_out, j);
      std::cout << j.dump(2) << std::endl;
    } else if (*cv) {
      ExperimentConfig cfg = load_experiment(cv_config);
      if (!cv_out.empty()) cfg.out_dir = cv_out;
      const CvResult r = run_cv(cfg, &std::cout);
      std::cout << r.summary.text();
    } else if (*ft) {
      ExperimentConfig cfg = load_experiment(ft_config);
      if (!ft_out.empty()) cfg.out_dir = ft_out;
      const CvResult r = run_finetune_cv(cfg, ft_source, &std::cout);
      std::cout << r.summary.text();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
