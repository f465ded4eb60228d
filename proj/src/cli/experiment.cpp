#include "msy/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "msy/checkpoint.hpp"

namespace msy {

namespace fs = std::filesystem;

void ExperimentConfig::validate() const {
  if (dataset.path.empty() == !dataset.synthetic.has_value())
    throw ConfigError("dataset needs exactly one of 'path' and 'synthetic'");
  if (dataset.synthetic) {
    dataset.synthetic->validate();
    if (dataset.synthetic_slides < 2) throw ConfigError("need at least 2 synthetic slides");
  }
  if (folds < 2 && fold_slides.empty()) throw ConfigError("need at least 2 folds");
  if (architectures.empty()) throw ConfigError("no architectures");
  std::set<std::string> names(architectures.begin(), architectures.end());
  if (names.size() != architectures.size()) throw ConfigError("duplicate architecture names");
  if (!baseline.empty() && !names.count(baseline)) throw ConfigError("baseline '" + baseline + "' is not in the run");
  if (!(width > 0)) throw ConfigError("width must be > 0");
  if (eval.sub_image_size < 16 || eval.sub_image_size % 16 != 0)
    throw ConfigError("sub_image_size must be a positive multiple of 16");
  if (eval.per_slide < 1) throw ConfigError("per_slide must be >= 1");
  for (const auto& e : ensembles) {
    if (e.name.empty() || names.count(e.name)) throw ConfigError("ensemble needs a unique name");
    if (e.members.empty()) throw ConfigError("ensemble '" + e.name + "' has no members");
    for (const auto& [scale, arch] : e.members) {
      if (!names.count(arch)) throw ConfigError("ensemble member '" + arch + "' is not trained in this run");
      if (preset(arch, 4, width).detail_scale != scale)
        throw ConfigError("ensemble member '" + arch + "' is not a scale-" + std::to_string(scale) + " model");
    }
  }
  if (finetune_frozen_epochs < 0) throw ConfigError("finetune_frozen_epochs must be >= 0");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json ds = nlohmann::json::object();
  if (!c.dataset.path.empty()) ds["path"] = c.dataset.path;
  if (c.dataset.synthetic) {
    ds["synthetic"] = *c.dataset.synthetic;
    ds["slides"] = c.dataset.synthetic_slides;
    ds["seed"] = c.dataset.synthetic_seed;
  }
  nlohmann::json ens = nlohmann::json::array();
  for (const auto& e : c.ensembles) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [s, a] : e.members) m[std::to_string(s)] = a;
    ens.push_back({{"name", e.name}, {"members", m}, {"combiner", to_string(e.combiner)}});
  }
  j = {{"name", c.name},
       {"seed", c.seed},
       {"dataset", ds},
       {"folds", c.folds},
       {"fold_slides", c.fold_slides},
       {"architectures", c.architectures},
       {"width", c.width},
       {"baseline", c.baseline},
       {"alpha", c.alpha},
       {"train", c.train},
       {"eval",
        {{"sub_image_size", c.eval.sub_image_size},
         {"per_slide", c.eval.per_slide},
         {"seed", c.eval.seed},
         {"threshold", c.eval.threshold}}},
       {"ensembles", ens},
       {"finetune_frozen_epochs", c.finetune_frozen_epochs},
       {"out_dir", c.out_dir.string()}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.name = j.value("name", d.name);
  c.seed = j.value("seed", d.seed);
  c.dataset = {};
  if (j.contains("dataset")) {
    const auto& ds = j.at("dataset");
    c.dataset.path = ds.value("path", std::string());
    if (ds.contains("synthetic")) c.dataset.synthetic = ds.at("synthetic").get<SynthParams>();
    c.dataset.synthetic_slides = ds.value("slides", d.dataset.synthetic_slides);
    c.dataset.synthetic_seed = ds.value("seed", d.dataset.synthetic_seed);
  }
  c.folds = j.value("folds", d.folds);
  c.fold_slides = j.value("fold_slides", d.fold_slides);
  c.architectures = j.value("architectures", d.architectures);
  c.width = j.value("width", d.width);
  c.baseline = j.value("baseline", d.baseline);
  c.alpha = j.value("alpha", d.alpha);
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.eval = d.eval;
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.sub_image_size = e.value("sub_image_size", d.eval.sub_image_size);
    c.eval.per_slide = e.value("per_slide", d.eval.per_slide);
    c.eval.seed = e.value("seed", d.eval.seed);
    c.eval.threshold = e.value("threshold", d.eval.threshold);
  }
  c.ensembles.clear();
  for (const auto& e : j.value("ensembles", nlohmann::json::array())) {
    EnsembleConfig ec;
    ec.name = e.at("name").get<std::string>();
    for (const auto& [k, v] : e.at("members").items()) ec.members[std::stoi(k)] = v.get<std::string>();
    ec.combiner = parse_combiner(e.value("combiner", "average"));
    c.ensembles.push_back(ec);
  }
  c.finetune_frozen_epochs = j.value("finetune_frozen_epochs", d.finetune_frozen_epochs);
  c.out_dir = j.value("out_dir", d.out_dir.string());
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read experiment config " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  if (!c.dataset.path.empty() && fs::path(c.dataset.path).is_relative())
    c.dataset.path = (path.parent_path() / c.dataset.path).string();
  c.validate();
  return c;
}

std::vector<PyramidImage> load_slides(const DatasetConfig& d) {
  if (!d.path.empty()) return open_dataset(d.path).load_all();
  if (!d.synthetic) throw ConfigError("dataset has neither path nor synthetic parameters");
  std::vector<PyramidImage> out;
  for (int i = 0; i < d.synthetic_slides; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "syn%02d", i);
    out.push_back(synth_slide(*d.synthetic, d.synthetic_seed + static_cast<std::uint64_t>(i), id));
  }
  return out;
}

namespace {

std::vector<bool> classes_in(const PyramidImage& s) {
  std::vector<bool> has(s.class_count, false);
  const auto& lab = s.level(1).labels;
  if (!lab) throw ConfigError("slide '" + s.id + "' has no labels");
  for (auto v : lab->data)
    if (v < s.class_count) has[v] = true;
  return has;
}

bool fold_complete(const std::vector<std::string>& ids, const std::map<std::string, std::vector<bool>>& has, int K) {
  for (int c = 0; c < K; ++c) {
    bool any = false;
    for (const auto& id : ids) any = any || has.at(id)[c];
    if (!any) return false;
  }
  return true;
}

}  // namespace

std::vector<std::vector<std::string>> make_folds(const std::vector<PyramidImage>& slides, int k, std::uint64_t seed,
                                                 int max_attempts) {
  if (k < 2 || k > static_cast<int>(slides.size()))
    throw ConfigError("cannot split " + std::to_string(slides.size()) + " slides into " + std::to_string(k) + " folds");
  std::map<std::string, std::vector<bool>> has;
  for (const auto& s : slides) has[s.id] = classes_in(s);
  const int K = slides.front().class_count;
  std::vector<std::string> ids;
  for (const auto& s : slides) ids.push_back(s.id);
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    std::vector<std::string> order = ids;
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(attempt));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::string>> folds(k);
    for (std::size_t i = 0; i < order.size(); ++i) folds[i % k].push_back(order[i]);
    bool ok = true;
    for (const auto& f : folds) ok = ok && fold_complete(f, has, K);
    if (ok) return folds;
  }
  throw PlanningError("no split into " + std::to_string(k) + " folds has every class in every validation fold");
}

const SummaryRow& CvSummary::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw std::out_of_range("no summary row '" + name + "'");
}

std::string CvSummary::text() const {
  std::ostringstream o;
  std::size_t nf = 0, wname = 5;
  for (const auto& r : rows) {
    nf = std::max(nf, r.scores.size());
    wname = std::max(wname, r.name.size());
  }
  o << std::left << std::setw(static_cast<int>(wname) + 2) << "model" << std::right << std::setw(9) << "params";
  for (std::size_t f = 0; f < nf; ++f) o << std::setw(8) << ("f" + std::to_string(f));
  o << std::setw(8) << "mean" << std::setw(18) << "95% CI" << std::setw(8) << "t" << std::setw(9) << "p"
    << "  BH\n";
  o << std::fixed;
  for (const auto& r : rows) {
    o << std::left << std::setw(static_cast<int>(wname) + 2) << r.name << std::right << std::setw(9);
    if (r.params_m)
      o << std::setprecision(3) << *r.params_m;
    else
      o << "-";
    o << std::setprecision(3);
    for (double s : r.scores) o << std::setw(8) << s;
    for (std::size_t f = r.scores.size(); f < nf; ++f) o << std::setw(8) << "-";
    std::ostringstream ci;
    ci << std::fixed << std::setprecision(3) << "[" << r.ci.lo() << ", " << r.ci.hi() << "]";
    o << std::setw(8) << r.ci.mean << std::setw(18) << ci.str();
    if (r.name == baseline) {
      o << std::setw(8) << "-" << std::setw(9) << "-" << "  baseline";
    } else if (r.tie) {
      o << std::setw(8) << "tie" << std::setw(9) << "-" << "  -";
    } else if (r.test) {
      o << std::setw(8) << std::setprecision(2) << r.test->t << std::setw(9) << std::setprecision(4) << r.test->p
        << (r.rejected ? "  *" : "  -");
    }
    o << "\n";
  }
  o << std::defaultfloat << "corrected one-sided t-test vs " << baseline << " (n_train " << n_train << ", n_val "
    << n_val << "), BH at alpha " << alpha << "\n";
  return o.str();
}

std::string CvSummary::csv() const {
  std::ostringstream o;
  o << "model,params_m,fold,weighted_jaccard,mean,ci_lo,ci_hi,t,p,rejected\n";
  o << std::setprecision(10);
  for (const auto& r : rows) {
    for (std::size_t f = 0; f < r.scores.size(); ++f) {
      o << r.name << "," << (r.params_m ? std::to_string(*r.params_m) : "") << "," << f << "," << r.scores[f] << ","
        << r.ci.mean << "," << r.ci.lo() << "," << r.ci.hi() << ",";
      if (r.test) o << r.test->t << "," << r.test->p;
      else o << ",";
      o << "," << (r.rejected ? 1 : 0) << "\n";
    }
  }
  return o.str();
}

void to_json(nlohmann::json& j, const CvSummary& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows) {
    nlohmann::json row = {{"name", r.name},
                          {"scores", r.scores},
                          {"mean", r.ci.mean},
                          {"ci", {r.ci.lo(), r.ci.hi()}},
                          {"tie", r.tie},
                          {"rejected", r.rejected}};
    if (r.params_m) row["params_m"] = *r.params_m;
    if (r.test) row["test"] = {{"t", r.test->t}, {"p", r.test->p}, {"df", r.test->df}, {"mean_diff", r.test->mean}};
    rows.push_back(row);
  }
  j = {{"baseline", s.baseline}, {"n_train", s.n_train}, {"n_val", s.n_val}, {"alpha", s.alpha}, {"rows", rows}};
}

CvSummary summarize(const std::map<std::string, std::vector<FoldReport>>& reports, const std::string& baseline,
                    double n_train, double n_val, double alpha, const std::map<std::string, double>& params_m) {
  CvSummary s;
  s.baseline = baseline;
  s.n_train = n_train;
  s.n_val = n_val;
  s.alpha = alpha;
  auto scores_of = [](std::vector<FoldReport> rs) {
    std::sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) { return a.fold < b.fold; });
    std::vector<double> v;
    for (const auto& r : rs) v.push_back(r.weighted_jaccard);
    return v;
  };
  std::optional<std::vector<double>> base;
  if (reports.count(baseline)) base = scores_of(reports.at(baseline));
  std::vector<double> pvals;
  std::vector<std::size_t> tested;
  for (const auto& [name, rs] : reports) {
    SummaryRow r;
    r.name = name;
    r.scores = scores_of(rs);
    r.ci = t_interval(r.scores);
    if (params_m.count(name)) r.params_m = params_m.at(name);
    if (base && name != baseline) {
      try {
        r.test = corrected_t_test(CvComparison::from_scores(r.scores, *base, n_train, n_val, true));
        pvals.push_back(r.test->p);
        tested.push_back(s.rows.size());
      } catch (const TieError&) {
        r.tie = true;
      }
    } else if (name == baseline) {
      r.tie = true;
    }
    s.rows.push_back(r);
  }
  const auto rej = bh_stepup(pvals, alpha);
  for (std::size_t i = 0; i < tested.size(); ++i) s.rows[tested[i]].rejected = rej[i];
  // Baseline first, the rest in name order.
  std::stable_partition(s.rows.begin(), s.rows.end(), [&](const SummaryRow& r) { return r.name == baseline; });
  return s;
}

void write_fold_scores_csv(const fs::path& path, const std::vector<FoldReport>& reports) {
  std::ofstream f(path);
  // Round-trip precision, so summaries can be recomputed from these files.
  f << "fold,weighted_jaccard,bach,loss\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : reports) {
    f << r.fold << "," << r.weighted_jaccard << ",";
    if (r.bach) f << *r.bach;
    f << ",";
    if (r.loss) f << *r.loss;
    f << "\n";
  }
  if (!f) throw ConfigError("cannot write " + path.string());
}

std::vector<double> read_fold_scores_csv(const fs::path& path, bool average_repeats) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  std::vector<std::pair<int, double>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b;
    std::getline(ls, a, ',');
    std::getline(ls, b, ',');
    try {
      rows.emplace_back(std::stoi(a), std::stod(b));
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ": malformed row '" + line + "'");
    }
  }
  if (average_repeats) return msy::average_repeats(std::move(rows));
  std::sort(rows.begin(), rows.end());
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && rows[i].first == rows[i - 1].first)
      throw ConfigError(path.string() + ": fold " + std::to_string(rows[i].first) + " listed twice");
    out.push_back(rows[i].second);
  }
  return out;
}

namespace {

struct RunContext {
  const ExperimentConfig& cfg;
  std::vector<PyramidImage> slides;
  std::vector<std::vector<std::string>> folds;
  ValidationSet vset;
  std::string vset_file;
  std::string data_hash;
  std::ostream* log;

  std::vector<const PyramidImage*> pick(const std::vector<std::string>& ids) const {
    std::vector<const PyramidImage*> out;
    for (const auto& id : ids)
      for (const auto& s : slides)
        if (s.id == id) out.push_back(&s);
    return out;
  }
  std::vector<std::string> train_ids(int fold) const {
    std::vector<std::string> out;
    const auto& val = folds[fold];
    for (const auto& s : slides)
      if (std::find(val.begin(), val.end(), s.id) == val.end()) out.push_back(s.id);
    return out;
  }
};

std::uint64_t fold_seed(std::uint64_t seed, int fold) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fold), 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::optional<FoldReport> cached_report(const fs::path& dir, const std::string& hash) {
  const fs::path p = dir / "report.json";
  if (!fs::exists(p)) return std::nullopt;
  std::ifstream f(p);
  nlohmann::json j;
  try {
    f >> j;
  } catch (...) {
    return std::nullopt;
  }
  if (j.value("run_hash", std::string()) != hash) return std::nullopt;
  return j.at("report").get<FoldReport>();
}

void write_report(const fs::path& dir, const std::string& hash, const FoldReport& r, double seconds,
                  const nlohmann::json& extra = {}) {
  fs::create_directories(dir);
  nlohmann::json j = {{"run_hash", hash}, {"seconds", seconds}, {"report", r}};
  if (!extra.is_null()) j["extra"] = extra;
  const fs::path tmp = dir / "report.json.tmp";
  {
    std::ofstream f(tmp);
    f << j.dump(2) << "\n";
    if (!f) throw ConfigError("cannot write " + tmp.string());
  }
  fs::rename(tmp, dir / "report.json");
}

fs::path checkpoint_of(const fs::path& dir) {
  if (fs::exists(dir / "best.ckpt")) return dir / "best.ckpt";
  if (fs::exists(dir / "last.ckpt")) return dir / "last.ckpt";
  return {};
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunContext prepare(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  RunContext ctx{cfg, load_slides(cfg.dataset), {}, {}, {}, {}, log};
  if (ctx.slides.empty()) throw ConfigError("dataset has no slides");
  const int K = ctx.slides.front().class_count;
  for (const auto& s : ctx.slides)
    if (s.class_count != K) throw ConfigError("slides disagree on the class count");
  cfg.train.validate(K);

  fs::create_directories(cfg.out_dir);
  if (!cfg.fold_slides.empty()) {
    ctx.folds = cfg.fold_slides;
    std::multiset<std::string> seen;
    for (const auto& f : ctx.folds) seen.insert(f.begin(), f.end());
    std::multiset<std::string> all;
    for (const auto& s : ctx.slides) all.insert(s.id);
    if (seen != all) throw ConfigError("fold_slides must partition the dataset's slides");
  } else {
    ctx.folds = make_folds(ctx.slides, cfg.folds, cfg.seed);
  }
  {
    std::ofstream f(cfg.out_dir / "folds.json");
    f << nlohmann::json(ctx.folds).dump(2) << "\n";
  }

  // The validation sub-images are drawn once and then kept fixed.
  const fs::path vfile = cfg.out_dir / "validation.txt";
  ctx.vset = make_validation_set(ctx.slides, cfg.eval.per_slide, cfg.eval.sub_image_size, cfg.eval.seed);
  save_validation_set(ctx.vset, vfile);
  ctx.vset_file = vfile.string();
  nlohmann::json dcfg = nlohmann::json(cfg)["dataset"];
  nlohmann::json vj = nlohmann::json::array();
  for (const auto& s : ctx.vset.items) vj.push_back({s.slide_id, s.x, s.y});
  ctx.data_hash = hash_json({{"dataset", dcfg}, {"validation", vj}, {"size", ctx.vset.size}, {"folds", ctx.folds}});
  return ctx;
}

FoldReport train_fold(const RunContext& ctx, const std::string& arch, int fold, double* seconds_out,
                      std::string* hash_out) {
  const auto& cfg = ctx.cfg;
  const int K = ctx.slides.front().class_count;
  const ArchitectureSpec spec = preset(arch, K, cfg.width);
  TrainConfig tc = cfg.train;
  tc.seed = fold_seed(cfg.seed, fold);
  const auto tr = ctx.train_ids(fold);
  const std::string hash = hash_json({{"spec", spec}, {"train", tc}, {"threshold", cfg.eval.threshold},
                                      {"data", ctx.data_hash}, {"fold", fold}});
  if (hash_out) *hash_out = hash;
  const fs::path dir = cfg.out_dir / arch / ("fold_" + std::to_string(fold));
  if (auto r = cached_report(dir, hash)) {
    if (ctx.log) *ctx.log << arch << " fold " << fold << ": reusing " << (dir / "report.json").string() << std::endl;
    return *r;
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto model = build<float>(spec, tc.seed);
  TrainData data;
  data.train = ctx.pick(tr);
  data.val = ctx.pick(ctx.folds[fold]);
  data.validation = &ctx.vset;
  data.validation_file = ctx.vset_file;
  train(*model, data, tc, dir, [&](const EpochRecord& r) {
    if (!ctx.log) return;
    *ctx.log << arch << " fold " << fold << " epoch " << r.epoch << " loss " << r.train_loss;
    if (r.val_loss) *ctx.log << " val_loss " << *r.val_loss << " val_wj " << *r.val_weighted_jaccard;
    *ctx.log << " (" << std::fixed << std::setprecision(0) << elapsed(t0) << std::defaultfloat << std::setprecision(6)
             << " s)" << std::endl;
  });
  EvalOptions eo = tc.eval_options();
  eo.threshold = cfg.eval.threshold;
  FoldReport rep = evaluate_model(*model, data.val, ctx.vset, eo);
  rep.arch = arch;
  rep.fold = fold;
  rep.n_train = static_cast<int>(data.train.size());
  rep.n_val = static_cast<int>(data.val.size());
  const double secs = elapsed(t0);
  if (seconds_out) *seconds_out = secs;
  write_report(dir, hash, rep, secs);
  if (ctx.log) *ctx.log << arch << " fold " << fold << ": weighted Jaccard " << rep.weighted_jaccard << std::endl;
  return rep;
}

CvResult finish(const RunContext& ctx, std::map<std::string, std::vector<FoldReport>> reports, double seconds) {
  const auto& cfg = ctx.cfg;
  const int K = ctx.slides.front().class_count;
  double nt = 0, nv = 0;
  for (std::size_t f = 0; f < ctx.folds.size(); ++f) {
    nv += ctx.folds[f].size();
    nt += ctx.slides.size() - ctx.folds[f].size();
  }
  nt /= ctx.folds.size();
  nv /= ctx.folds.size();
  std::map<std::string, double> params;
  for (const auto& a : cfg.architectures)
    params[a] = static_cast<double>(build<float>(preset(a, K, cfg.width))->parameter_count()) / 1e6;
  CvResult res;
  res.summary = summarize(reports, cfg.baseline, nt, nv, cfg.alpha, params);
  res.reports = std::move(reports);
  res.folds = ctx.folds;
  res.seconds = seconds;
  for (const auto& [name, rs] : res.reports) write_fold_scores_csv(cfg.out_dir / (name + ".csv"), rs);
  std::ofstream(cfg.out_dir / "summary.txt") << res.summary.text();
  std::ofstream(cfg.out_dir / "summary.csv") << res.summary.csv();
  std::ofstream(cfg.out_dir / "summary.json") << nlohmann::json(res.summary).dump(2) << "\n";
  return res;
}

}  // namespace

CvResult run_cv(const ExperimentConfig& cfg, std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  RunContext ctx = prepare(cfg, log);
  std::ofstream(cfg.out_dir / "experiment.json") << nlohmann::json(cfg).dump(2) << "\n";
  std::map<std::string, std::vector<FoldReport>> reports;
  std::map<std::string, std::vector<std::string>> hashes;
  for (const auto& arch : cfg.architectures) {
    for (int f = 0; f < static_cast<int>(ctx.folds.size()); ++f) {
      std::string h;
      reports[arch].push_back(train_fold(ctx, arch, f, nullptr, &h));
      hashes[arch].push_back(h);
    }
  }
  EvalOptions eo = cfg.train.eval_options();
  eo.threshold = cfg.eval.threshold;
  for (const auto& ec : cfg.ensembles) {
    for (int f = 0; f < static_cast<int>(ctx.folds.size()); ++f) {
      nlohmann::json mh = nlohmann::json::object();
      for (const auto& [s, a] : ec.members) mh[std::to_string(s)] = hashes.at(a)[f];
      const std::string hash = hash_json({{"members", mh}, {"combiner", to_string(ec.combiner)}, {"eval", eo.threshold}});
      const fs::path dir = cfg.out_dir / ec.name / ("fold_" + std::to_string(f));
      if (auto r = cached_report(dir, hash)) {
        reports[ec.name].push_back(*r);
        continue;
      }
      const auto te = std::chrono::steady_clock::now();
      EnsembleSpec es;
      es.combiner = ec.combiner;
      for (const auto& [s, a] : ec.members) {
        const fs::path ck = checkpoint_of(cfg.out_dir / a / ("fold_" + std::to_string(f)));
        if (ck.empty()) throw ConfigError("fold " + std::to_string(f) + ": no checkpoint for ensemble member " + a);
        es.members[s] = ck.string();
      }
      Ensemble ens = Ensemble::load(es, eo);
      if (ec.combiner == Combiner::Logistic) ens.fit(ctx.pick(ctx.train_ids(f)), ctx.vset, 100000, fold_seed(cfg.seed, f));
      FoldReport rep = evaluate_labeler(ens.labeler(), ctx.pick(ctx.folds[f]), ctx.vset, eo);
      rep.arch = ec.name;
      rep.fold = f;
      rep.n_val = static_cast<int>(ctx.folds[f].size());
      rep.n_train = static_cast<int>(ctx.slides.size()) - rep.n_val;
      nlohmann::json extra = {{"spec", es}};
      write_report(dir, hash, rep, elapsed(te), extra);
      if (log) *log << ec.name << " fold " << f << ": weighted Jaccard " << rep.weighted_jaccard << std::endl;
      reports[ec.name].push_back(rep);
    }
  }
  return finish(ctx, std::move(reports), elapsed(t0));
}

FoldReport run_fold(const ExperimentConfig& cfg, const std::string& arch, int fold, std::ostream* log) {
  RunContext ctx = prepare(cfg, log);
  if (fold < 0 || fold >= static_cast<int>(ctx.folds.size()))
    throw ConfigError("fold " + std::to_string(fold) + " out of range (" + std::to_string(ctx.folds.size()) + " folds)");
  return train_fold(ctx, arch, fold, nullptr, nullptr);
}

CvResult run_finetune_cv(const ExperimentConfig& cfg, const fs::path& source_run, std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  RunContext ctx = prepare(cfg, log);
  std::ofstream(cfg.out_dir / "experiment.json") << nlohmann::json(cfg).dump(2) << "\n";
  const int K = ctx.slides.front().class_count;
  std::map<std::string, std::vector<FoldReport>> reports;
  for (const auto& arch : cfg.architectures) {
    for (int f = 0; f < static_cast<int>(ctx.folds.size()); ++f) {
      const fs::path src = checkpoint_of(source_run / arch / ("fold_" + std::to_string(f)));
      if (src.empty()) {
        throw ConfigError("fold " + std::to_string(f) + ": source run " + source_run.string() + " has no checkpoint for " +
                          arch);
      }
      TrainConfig tc = cfg.train;
      tc.seed = fold_seed(cfg.seed, f);
      const std::string hash = hash_json({{"source", fs::absolute(src).string()},
                                          {"source_hash", read_checkpoint_header(src).value("meta", nlohmann::json())},
                                          {"train", tc},
                                          {"frozen", cfg.finetune_frozen_epochs},
                                          {"data", ctx.data_hash},
                                          {"fold", f}});
      const fs::path dir = cfg.out_dir / arch / ("fold_" + std::to_string(f));
      if (auto r = cached_report(dir, hash)) {
        reports[arch].push_back(*r);
        continue;
      }
      const auto tf = std::chrono::steady_clock::now();
      auto ck = load_checkpoint(src);
      TrainData data;
      data.train = ctx.pick(ctx.train_ids(f));
      data.val = ctx.pick(ctx.folds[f]);
      data.validation = &ctx.vset;
      data.validation_file = ctx.vset_file;
      finetune(*ck.model, K, data, tc, cfg.finetune_frozen_epochs, dir, [&](const EpochRecord& r) {
        if (log) *log << arch << " fold " << f << " epoch " << r.epoch << (r.frozen ? " (frozen)" : "") << " loss "
                      << r.train_loss << std::endl;
      });
      EvalOptions eo = tc.eval_options();
      eo.threshold = cfg.eval.threshold;
      FoldReport rep = evaluate_model(*ck.model, data.val, ctx.vset, eo);
      rep.arch = arch;
      rep.fold = f;
      rep.n_train = static_cast<int>(data.train.size());
      rep.n_val = static_cast<int>(data.val.size());
      nlohmann::json extra = {{"source_run", source_run.string()},
                              {"source_checkpoint", src.string()},
                              {"source_fold", f},
                              {"target_fold", f},
                              {"frozen_epochs", cfg.finetune_frozen_epochs},
                              {"class_count", K}};
      write_report(dir, hash, rep, elapsed(tf), extra);
      std::ofstream(dir / "finetune.json") << extra.dump(2) << "\n";
      reports[arch].push_back(rep);
    }
  }
  return finish(ctx, std::move(reports), elapsed(t0));
}

}  // namespace msy
