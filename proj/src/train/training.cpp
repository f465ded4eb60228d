#include "msy/training.hpp"

#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "msy/backend/ops.hpp"
#include "msy/backend/optim.hpp"
#include "msy/checkpoint.hpp"

namespace msy {

void TrainConfig::validate(int class_count) const {
  if (static_cast<int>(class_weights.size()) != class_count) {
    throw ConfigError("class_weights has " + std::to_string(class_weights.size()) + " entries for " +
                      std::to_string(class_count) + " classes");
  }
  bool any = false;
  for (double w : class_weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("class weights must be finite and >= 0");
    any = any || w > 0;
  }
  if (!any) throw ConfigError("at least one class weight must be > 0");
  for (int c : classes_of_interest)
    if (c < 0 || c >= class_count) throw ConfigError("class of interest out of range");
  if (!(lr > 0) || !(gamma > 0 && gamma <= 1) || decay_every < 1) throw ConfigError("bad learning-rate schedule");
  if (epochs_min < 1 || epochs_max < epochs_min) throw ConfigError("need 1 <= epochs_min <= epochs_max");
  if (batch_size < 1 || patches_per_epoch < 1) throw ConfigError("batch_size and patches_per_epoch must be >= 1");
  if (patch_size < 32 || patch_size % 32 != 0) throw ConfigError("patch_size must be a positive multiple of 32");
  if (patience < 1 || validation_every < 1 || queue_capacity < 1) throw ConfigError("bad validation cadence");
  if (freeze_epochs < 0) throw ConfigError("freeze_epochs must be >= 0");
}

double TrainConfig::lr_at(int epoch) const {
  return lr * std::pow(gamma, static_cast<double>((epoch - 1) / decay_every));
}

bool TrainConfig::is_validation_epoch(int epoch) const {
  for (int e : validation_epochs)
    if (e == epoch) return true;
  const int last = validation_epochs.empty() ? 0 : *std::max_element(validation_epochs.begin(), validation_epochs.end());
  return epoch > last && (epoch - last) % validation_every == 0;
}

EvalOptions TrainConfig::eval_options() const {
  EvalOptions o;
  o.patch_size = patch_size;
  o.batch_size = batch_size;
  o.class_weights = class_weights;
  o.classes_of_interest = classes_of_interest;
  return o;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"gamma", c.gamma},
       {"decay_every", c.decay_every},
       {"epochs_min", c.epochs_min},
       {"epochs_max", c.epochs_max},
       {"patches_per_epoch", c.patches_per_epoch},
       {"batch_size", c.batch_size},
       {"patch_size", c.patch_size},
       {"class_weights", c.class_weights},
       {"classes_of_interest", c.classes_of_interest},
       {"seed", c.seed},
       {"validation_epochs", c.validation_epochs},
       {"validation_every", c.validation_every},
       {"patience", c.patience},
       {"augment", c.augment},
       {"queue_capacity", c.queue_capacity},
       {"presence_min_pixels", c.presence_min_pixels},
       {"freeze_epochs", c.freeze_epochs},
       {"save_checkpoints", c.save_checkpoints}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.gamma = j.value("gamma", d.gamma);
  c.decay_every = j.value("decay_every", d.decay_every);
  c.epochs_min = j.value("epochs_min", d.epochs_min);
  c.epochs_max = j.value("epochs_max", d.epochs_max);
  c.patches_per_epoch = j.value("patches_per_epoch", d.patches_per_epoch);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.class_weights = j.value("class_weights", d.class_weights);
  c.classes_of_interest = j.value("classes_of_interest", d.classes_of_interest);
  c.seed = j.value("seed", d.seed);
  c.validation_epochs = j.value("validation_epochs", d.validation_epochs);
  c.validation_every = j.value("validation_every", d.validation_every);
  c.patience = j.value("patience", d.patience);
  c.augment = j.value("augment", d.augment);
  c.queue_capacity = j.value("queue_capacity", d.queue_capacity);
  c.presence_min_pixels = j.value("presence_min_pixels", d.presence_min_pixels);
  c.freeze_epochs = j.value("freeze_epochs", d.freeze_epochs);
  c.save_checkpoints = j.value("save_checkpoints", d.save_checkpoints);
}

Tensor<float> images_to_tensor(const std::vector<const RgbImage*>& images, bool normalized) {
  if (images.empty()) throw ContractError("images_to_tensor: empty batch");
  const int h = images.front()->h, w = images.front()->w;
  Tensor<float> t(Shape{static_cast<int>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const RgbImage& im = *images[n];
    if (im.h != h || im.w != w || im.c != 3) throw ContractError("images_to_tensor: mixed image shapes");
    for (int c = 0; c < 3; ++c) {
      float* dst = t.plane(static_cast<int>(n), c);
      for (int i = 0; i < h * w; ++i) {
        const float v = im.data[static_cast<std::size_t>(i) * 3 + c];
        dst[i] = normalized ? v : v / 127.5f - 1.f;
      }
    }
  }
  return t;
}

Batch make_batch(const std::vector<MultiScalePatch>& patches, const std::vector<int>& scales, int class_count) {
  if (patches.empty()) throw ContractError("make_batch: empty batch");
  Batch b;
  const int N = static_cast<int>(patches.size());
  for (int s : scales) {
    std::vector<const RgbImage*> ims;
    std::vector<Footprint> fps;
    for (const auto& p : patches) {
      ims.push_back(&p.images.at(s));
      fps.push_back(p.footprints.at(s));
    }
    b.input.images[s] = images_to_tensor(ims, patches.front().normalized);
    b.input.footprints[s] = std::move(fps);
  }
  const int P = patches.front().label.h;
  b.target = Tensor<float>(Shape{N, class_count, P, P});
  b.presence = Tensor<float>(Shape{N, class_count, 1, 1});
  for (int n = 0; n < N; ++n) {
    const auto& lab = patches[n].label;
    for (int i = 0; i < P * P; ++i) {
      const int c = lab.data[i];
      if (c >= class_count) throw ContractError("label " + std::to_string(c) + " >= class count");
      b.target.plane(n, c)[i] = 1.f;
    }
    for (int c = 0; c < class_count && c < static_cast<int>(patches[n].presence.size()); ++c)
      b.presence.at(n, c, 0, 0) = patches[n].presence[c] ? 1.f : 0.f;
  }
  return b;
}

template <typename T>
LossTerms<T> composite_loss(const ModelOutputs<T>& out, const Tensor<T>& target, const Tensor<T>& presence,
                            std::span<const double> weights, bool use_class_loss, double eps) {
  LossTerms<T> t;
  t.seg = ops::weighted_bce(out.seg, target, weights, eps);
  t.total = t.seg;
  if (use_class_loss && out.clss) {
    t.clss = ops::bce(*out.clss, presence, eps);
    t.total = ops::add(t.seg, *t.clss);
  }
  return t;
}

template LossTerms<float> composite_loss(const ModelOutputs<float>&, const Tensor<float>&, const Tensor<float>&,
                                         std::span<const double>, bool, double);
template LossTerms<double> composite_loss(const ModelOutputs<double>&, const Tensor<double>&, const Tensor<double>&,
                                          std::span<const double>, bool, double);

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"lr", r.lr},
       {"train_loss", r.train_loss},
       {"plan_seed", r.plan_seed},
       {"val_loss", r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json()},
       {"val_weighted_jaccard", r.val_weighted_jaccard ? nlohmann::json(*r.val_weighted_jaccard) : nlohmann::json()},
       {"frozen", r.frozen}};
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = {{"config_hash", m.config_hash},
       {"config", m.config},
       {"spec", m.spec},
       {"validation_set", m.validation_set},
       {"train_slides", m.train_slides},
       {"val_slides", m.val_slides},
       {"trajectory", m.trajectory},
       {"best_checkpoint", m.best_checkpoint},
       {"last_checkpoint", m.last_checkpoint},
       {"best_epoch", m.best_epoch},
       {"best_val_loss", m.best_val_loss},
       {"status", m.status}};
}

std::string hash_json(const nlohmann::json& j) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void for_each_batch(const std::vector<const PyramidImage*>& slides, const EpochPlan& plan,
                    const std::vector<int>& scales, int label_scale, const TrainConfig& cfg, int class_count,
                    const std::function<void(Batch&)>& consume) {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Batch> queue;
  bool done = false, stop = false;
  std::exception_ptr producer_error;

  std::thread producer([&] {
    try {
      const auto& d = plan.directives;
      for (std::size_t start = 0; start < d.size(); start += cfg.batch_size) {
        const std::size_t stop_i = std::min(d.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<MultiScalePatch> patches;
        std::vector<int> ids;
        for (std::size_t i = start; i < stop_i; ++i) {
          const PyramidImage& s = *slides.at(d[i].slide);
          MultiScalePatch p =
              extract_patch(s, d[i].cx, d[i].cy, scales, cfg.patch_size, label_scale, cfg.presence_min_pixels);
          if (cfg.augment) p = augment(p, plan.seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
          patches.push_back(std::move(p));
          ids.push_back(static_cast<int>(i));
        }
        Batch b = make_batch(patches, scales, class_count);
        b.ids = std::move(ids);
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return stop || static_cast<int>(queue.size()) < cfg.queue_capacity; });
        if (stop) return;
        queue.push_back(std::move(b));
        cv.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mu);
      producer_error = std::current_exception();
    }
    std::lock_guard lock(mu);
    done = true;
    cv.notify_all();
  });

  auto halt = [&] {
    {
      std::lock_guard lock(mu);
      stop = true;
    }
    cv.notify_all();
    producer.join();
  };

  try {
    for (;;) {
      Batch b;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return !queue.empty() || done; });
        if (queue.empty()) break;
        b = std::move(queue.front());
        queue.pop_front();
        cv.notify_all();
      }
      consume(b);
    }
  } catch (...) {
    halt();
    throw;
  }
  halt();
  if (producer_error) std::rethrow_exception(producer_error);
}

namespace {

struct Snapshot {
  std::vector<Tensor<float>> params, buffers;

  static Snapshot take(const Model<float>& m) {
    Snapshot s;
    for (const auto& p : m.store().params()) s.params.push_back(p.var.value());
    for (const auto& b : m.store().buffers()) s.buffers.push_back(*b.second);
    return s;
  }
  void restore(Model<float>& m) const {
    auto& ps = m.store().params();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].var.value() = params[i];
    const auto& bs = m.store().buffers();
    for (std::size_t i = 0; i < bs.size(); ++i) *bs[i].second = buffers[i];
  }
};

std::string batch_ids(const Batch& b, const EpochPlan& plan, const std::vector<const PyramidImage*>& slides) {
  std::string out;
  for (int i : b.ids) {
    const Directive& d = plan.directives[i];
    out += " #" + std::to_string(i) + "(" + slides[d.slide]->id + "@" + std::to_string(d.cx) + "," +
           std::to_string(d.cy) + " class " + std::to_string(d.target_class) + ")";
  }
  return out;
}

void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  if (dir.empty()) return;
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream f(tmp);
    f << nlohmann::json(m).dump(2) << "\n";
    if (!f) throw TrainingError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

}  // namespace

RunManifest train(Model<float>& model, const TrainData& data, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const EpochHook& hook) {
  const ArchitectureSpec& spec = model.spec();
  cfg.validate(spec.class_count);
  if (data.train.empty()) throw TrainingError("no training slides");
  for (const auto* s : data.train)
    if (s->class_count != spec.class_count)
      throw TrainingError("slide '" + s->id + "' has " + std::to_string(s->class_count) + " classes, model " +
                          std::to_string(spec.class_count));

  RunManifest m;
  m.config = cfg;
  m.spec = spec;
  m.validation_set = data.validation_file;
  for (const auto* s : data.train) m.train_slides.push_back(s->id);
  for (const auto* s : data.val) m.val_slides.push_back(s->id);
  m.config_hash = hash_json({{"config", m.config},
                             {"spec", m.spec},
                             {"validation_set", m.validation_set},
                             {"train", m.train_slides},
                             {"val", m.val_slides}});

  std::ofstream traj;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    traj.open(out_dir / "trajectory.jsonl", std::ios::trunc);
    if (!traj) throw TrainingError("cannot write trajectory in " + out_dir.string());
  }

  const std::vector<int> scales = spec.required_scales();
  const int label_scale = spec.detail_scale;
  std::vector<SlideClassIndex> indices;
  for (const auto* s : data.train) indices.push_back(index_classes(*s, label_scale));

  const bool can_validate = data.validation != nullptr && !data.val.empty();
  const bool class_loss = spec.classification_loss && spec.has_class_output();
  Adam<float> opt(cfg.lr);
  std::optional<Snapshot> best;
  double best_loss = std::numeric_limits<double>::infinity();
  int stale = 0;
  bool frozen = false;
  m.status = "running";

  try {
    for (int epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.lr = cfg.lr_at(epoch);
      rec.frozen = epoch <= cfg.freeze_epochs;
      if (rec.frozen != frozen || epoch == 1) {
        model.freeze_body(rec.frozen);
        frozen = rec.frozen;
      }
      opt.set_lr(rec.lr);
      const EpochPlan plan = plan_epoch(indices, epoch_seed(cfg.seed, epoch), cfg.patches_per_epoch, label_scale);
      rec.plan_seed = plan.seed;

      model.set_training(true);
      double loss_sum = 0.0;
      int batches = 0;
      for_each_batch(data.train, plan, scales, label_scale, cfg, spec.class_count, [&](Batch& b) {
        model.store().zero_grad();
        const ModelOutputs<float> out = model.forward(b.input);
        LossTerms<float> t = composite_loss(out, b.target, b.presence, cfg.class_weights, class_loss);
        const double v = t.total.value()[0];
        if (!std::isfinite(v)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch" +
                              batch_ids(b, plan, data.train));
        }
        t.total.backward();
        opt.step(model.store().params());
        loss_sum += v;
        ++batches;
      });
      rec.train_loss = loss_sum / std::max(1, batches);

      bool converged = false;
      if (can_validate && cfg.is_validation_epoch(epoch)) {
        const FoldReport rep = evaluate_model(model, data.val, *data.validation, cfg.eval_options());
        rec.val_loss = rep.loss;
        rec.val_weighted_jaccard = rep.weighted_jaccard;
        if (rep.loss && *rep.loss < best_loss) {
          best_loss = *rep.loss;
          m.best_epoch = epoch;
          m.best_val_loss = best_loss;
          best = Snapshot::take(model);
          stale = 0;
          if (!out_dir.empty() && cfg.save_checkpoints) {
            save_checkpoint(out_dir / "best.ckpt", model,
                            {{"epoch", epoch}, {"val_loss", best_loss}, {"config_hash", m.config_hash}});
            m.best_checkpoint = (out_dir / "best.ckpt").string();
          }
        } else if (++stale >= cfg.patience && epoch >= cfg.epochs_min) {
          converged = true;
        }
      }

      m.trajectory.push_back(rec);
      if (traj.is_open()) traj << nlohmann::json(rec).dump() << std::endl;
      if (hook) hook(rec);
      write_manifest(out_dir, m);
      if (converged) {
        m.status = "converged";
        break;
      }
    }
    if (m.status == "running") m.status = "completed";
    model.freeze_body(false);
    if (!out_dir.empty() && cfg.save_checkpoints) {
      save_checkpoint(out_dir / "last.ckpt", model,
                      {{"epoch", m.trajectory.back().epoch}, {"config_hash", m.config_hash}});
      m.last_checkpoint = (out_dir / "last.ckpt").string();
    }
    if (best) best->restore(model);
    model.set_training(false);
    write_manifest(out_dir, m);
  } catch (const std::exception& e) {
    m.status = std::string("failed: ") + e.what();
    try {
      write_manifest(out_dir, m);
    } catch (...) {
    }
    throw;
  }
  return m;
}

RunManifest finetune(Model<float>& model, int new_class_count, const TrainData& data, TrainConfig cfg,
                     int frozen_epochs, const std::filesystem::path& out_dir, const EpochHook& hook) {
  if (frozen_epochs < 0) throw ConfigError("frozen_epochs must be >= 0");
  model.replace_output_layers(new_class_count, cfg.seed ^ 0x5eedULL);
  cfg.freeze_epochs = frozen_epochs;
  cfg.epochs_min = std::max(cfg.epochs_min, std::min(frozen_epochs + 1, cfg.epochs_max));
  return train(model, data, cfg, out_dir, hook);
}

}  // namespace msy
