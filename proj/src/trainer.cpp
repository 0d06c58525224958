#include "mpbm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mpbm/checkpoint.hpp"

namespace mpbm {

void AugmentStore::append(MixupSample s, int outer_iter, int query_id) {
  if (!entries_.empty()) {
    const MixupSample& first = entries_.front().sample;
    if (!s.z_mix.same_shape(first.z_mix) || !s.y_mix.same_shape(first.y_mix))
      throw std::runtime_error("AugmentStore::append: sample shape mismatch");
  }
  entries_.push_back({std::move(s), outer_iter, query_id});
}

LabeledBatch AugmentStore::sample(size_t n, Rng& rng) const {
  if (entries_.empty()) throw std::runtime_error("AugmentStore::sample: store is empty");
  size_t d = entries_.front().sample.z_mix.cols();
  size_t k = entries_.front().sample.y_mix.cols();
  Tensor z({n, d}), y({n, k});
  for (size_t i = 0; i < n; ++i) {
    const Entry& e = entries_[rng.index(entries_.size())];
    for (size_t c = 0; c < d; ++c) z[i * d + c] = e.sample.z_mix[c];
    for (size_t c = 0; c < k; ++c) y[i * k + c] = e.sample.y_mix[c];
  }
  return {std::move(z), std::move(y)};
}

namespace {

ModelSpec spec_from(const RunConfig& cfg, const DomainSet& data) {
  ModelSpec s;
  s.arch = cfg.arch;
  s.input_shape = data.input_shape;
  s.feature_dim = cfg.feature_dim;
  s.hidden = cfg.hidden;
  s.num_classes = data.num_classes;
  return s;
}

FeatureExtractor make_extractor(const ModelSpec& spec, Rng init) {
  return FeatureExtractor(spec, init);
}
Classifier make_classifier(size_t d, size_t k, Rng init) { return Classifier(d, k, init); }
Discriminator make_discriminator(size_t d, Rng init) { return Discriminator(d, init); }
MixupGenerator make_generator(size_t d, Rng init) { return MixupGenerator(d, init); }

// one row of a batch, keeping the trailing shape
Tensor slice_row(const Tensor& x, size_t i) {
  std::vector<size_t> shape = x.shape();
  shape[0] = 1;
  size_t stride = x.size() / x.extent(0);
  Tensor out(shape);
  for (size_t k = 0; k < stride; ++k) out[k] = x[i * stride + k];
  return out;
}

// Losses that overflow surface as non-finite-tensor errors from deep inside
// the tape; rebrand them as divergence so callers can checkpoint and stop.
template <typename Fn>
auto guarded(const char* phase, Fn&& fn) {
  try {
    return fn();
  } catch (const TrainingAbort&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw TrainingAbort(std::string(phase) + " diverged: " + e.what());
  }
}

}  // namespace

Trainer::Trainer(const RunConfig& cfg, const DomainSet& data)
    : cfg_(cfg),
      data_(data),
      spec_(spec_from(cfg, data)),
      root_(cfg.seed),
      rng_pretrain_(root_.child(4)),
      rng_finetune_(root_.child(5)),
      rng_queries_(root_.child(6)),
      rng_sgld_(root_.child(7)),
      rng_bases_(root_.child(8)),
      rng_real_(root_.child(9)),
      rng_store_(root_.child(10)),
      rng_corr_(root_.child(11)),
      f_(make_extractor(spec_, root_.child(1))),
      h_(make_classifier(spec_.feature_dim, spec_.num_classes, root_.child(2))),
      disc_(make_discriminator(spec_.feature_dim, root_.child(3))),
      gen_(make_generator(spec_.feature_dim, root_.child(12))),
      opt_model_(cfg.lr),
      opt_gen_(cfg.gen_lr),
      opt_disc_(cfg.disc_lr) {
  if (data_.source.size() == 0) throw std::runtime_error("Trainer: source dataset is empty");
  if (data_.source.num_classes() != spec_.num_classes)
    throw std::runtime_error("Trainer: dataset/model class count mismatch");
}

size_t Trainer::steps_per_pass() const {
  return (data_.source.size() + cfg_.batch_size - 1) / cfg_.batch_size;
}

double Trainer::lr_scale() const {
  if (cfg_.epochs <= 1) return 1.0;
  int64_t threshold =
      static_cast<int64_t>(cfg_.epochs / 2) * static_cast<int64_t>(steps_per_pass());
  return (threshold > 0 && model_steps_done_ >= threshold) ? cfg_.lr_decay_factor : 1.0;
}

std::vector<size_t> Trainer::draw_indices(size_t n, size_t upto, Rng& rng) const {
  std::vector<size_t> rows(n);
  for (size_t i = 0; i < n; ++i) rows[i] = rng.index(upto);
  return rows;
}

std::pair<double, double> Trainer::model_step(const std::vector<size_t>& rows,
                                              const AugmentStore* store) {
  LabeledBatch batch = data_.source.gather(rows);
  const bool use_store = store != nullptr && cfg_.lambda_mix > 0.0 && !store->empty();
  return guarded("model update", [&]() -> std::pair<double, double> {
    Tape t;
    BoundParams bf = f_.bind(t, true);
    BoundParams bh = h_.bind(t, true);
    Var z = f_.forward(t, bf, t.constant(batch.inputs));
    Var logits = h_.forward(t, bh, z);
    Var l_sup = t.cross_entropy(logits, t.constant(batch.labels));
    Var total = l_sup;
    double mix_val = 0.0;
    if (use_store) {
      LabeledBatch mb = store->sample(cfg_.batch_size, rng_store_);
      Var mix_logits = h_.forward(t, bh, t.constant(mb.inputs));
      Var l_mix = t.cross_entropy(mix_logits, t.constant(mb.labels));
      mix_val = l_mix.value()[0];
      total = t.add(total, t.scale(l_mix, cfg_.lambda_mix));
    }
    double sup_val = l_sup.value()[0];
    t.backward(total);
    std::vector<Tensor> gf = collect_grads(bf);
    std::vector<Tensor> gh = collect_grads(bh);
    // abort before the optimizer writes non-finite parameters, so the
    // checkpoint saved on abort is still loadable
    for (const std::vector<Tensor>* gs : {&gf, &gh})
      for (const Tensor& g : *gs)
        for (size_t k = 0; k < g.size(); ++k)
          if (!std::isfinite(g[k]))
            throw TrainingAbort("model update diverged at step " +
                                std::to_string(model_steps_done_) + ": non-finite gradient");
    double s = lr_scale();
    opt_model_.step(f_.params(), gf, s);
    opt_model_.step(h_.params(), gh, s);
    ++model_steps_done_;
    return {sup_val, mix_val};
  });
}

void Trainer::pretrain() {
  if (pretrained_) return;
  pretrained_ = true;
  if (!cfg_.pretrain_checkpoint.empty()) {
    load_model(cfg_.pretrain_checkpoint);
    metrics_.pretrain_loss = 0.0;
    metrics_.pretrain_accuracy = evaluate(data_.source);
    return;
  }
  size_t n = data_.source.size();
  double last = 0.0;
  for (int e = 0; e < cfg_.epochs; ++e) {
    std::vector<size_t> perm = rng_pretrain_.permutation(n);
    double sum = 0.0;
    size_t steps = 0;
    for (size_t at = 0; at < n; at += cfg_.batch_size) {
      size_t hi = std::min(n, at + cfg_.batch_size);
      std::vector<size_t> rows(perm.begin() + at, perm.begin() + hi);
      sum += model_step(rows, nullptr).first;
      ++steps;
    }
    last = sum / static_cast<double>(steps);
    if (on_epoch) on_epoch(e + 1, last);
  }
  metrics_.pretrain_loss = last;
  metrics_.pretrain_accuracy = evaluate(data_.source);
}

std::pair<double, double> Trainer::finetune(const AugmentStore& store) {
  size_t n = data_.source.size();
  size_t steps = cfg_.finetune_iters > 0 ? static_cast<size_t>(cfg_.finetune_iters)
                                         : steps_per_pass();
  double sup_sum = 0.0, mix_sum = 0.0;
  for (size_t s = 0; s < steps; ++s) {
    if (finetune_queue_.empty()) {
      std::vector<size_t> perm = rng_finetune_.permutation(n);
      for (size_t at = 0; at < n; at += cfg_.batch_size)
        finetune_queue_.emplace_back(perm.begin() + at,
                                     perm.begin() + std::min(n, at + cfg_.batch_size));
    }
    std::vector<size_t> rows = std::move(finetune_queue_.front());
    finetune_queue_.pop_front();
    auto [ls, lm] = model_step(rows, &store);
    sup_sum += ls;
    mix_sum += lm;
  }
  return {sup_sum / static_cast<double>(steps), mix_sum / static_cast<double>(steps)};
}

double Trainer::evaluate(const Dataset& d) const {
  size_t n = d.size();
  if (n == 0) return 0.0;
  size_t correct = 0;
  const size_t chunk = 256;
  for (size_t at = 0; at < n; at += chunk) {
    size_t hi = std::min(n, at + chunk);
    std::vector<size_t> rows(hi - at);
    std::iota(rows.begin(), rows.end(), at);
    Tensor logits = h_.logits(f_.features(d.gather(rows).inputs));
    for (size_t i = 0; i < logits.rows(); ++i) {
      size_t best = 0;
      for (size_t k = 1; k < logits.cols(); ++k)
        if (logits.at(i, k) > logits.at(i, best)) best = k;
      if (static_cast<int>(best) == d.classes[at + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

Tensor Trainer::extract_all(const Dataset& d) const {
  size_t n = d.size();
  Tensor out({n, spec_.feature_dim});
  const size_t chunk = 256;
  for (size_t at = 0; at < n; at += chunk) {
    size_t hi = std::min(n, at + chunk);
    std::vector<size_t> rows(hi - at);
    std::iota(rows.begin(), rows.end(), at);
    Tensor feats = f_.features(d.gather(rows).inputs);
    for (size_t i = 0; i < feats.rows(); ++i)
      for (size_t k = 0; k < spec_.feature_dim; ++k) out.at(at + i, k) = feats.at(i, k);
  }
  return out;
}

CorrelationMatrix Trainer::correlation() {
  Tensor feats = extract_all(data_.source);
  return normalize_rows(pearson_matrix(feats, 10000, &rng_corr_));
}

Var Trainer::generator_loss(Tape& t, Var z_mix, Var y_mix) const {
  BoundParams bh = h_.bind(t, false);
  Var logits = h_.forward(t, bh, z_mix);
  return t.cross_entropy(logits, y_mix);
}

Var Trainer::adversarial_loss(Tape& t, const Discriminator& d, const BoundParams& dbp, Var real,
                              Var mix) {
  Var s_real = d.forward(t, dbp, real);
  Var s_mix = d.forward(t, dbp, mix);
  Var ones = t.constant(Tensor::full(s_mix.value().shape(), 1.0));
  return t.add(t.mean(t.log(s_real)), t.mean(t.log(t.sub(ones, s_mix))));
}

Tensor Trainer::make_queries(int outer_iter, const LabeledBatch& seeds) {
  if (cfg_.variant == "no_sgld") return seeds.inputs;
  SgldConfig sc;
  sc.steps = cfg_.t_sgld;
  sc.eta = cfg_.sgld_eta;
  size_t m = seeds.inputs.extent(0);
  std::vector<Rng> chains;
  chains.reserve(m);
  for (size_t i = 0; i < m; ++i)
    chains.push_back(rng_sgld_.child(static_cast<uint64_t>(outer_iter - 1) * m + i));
  return guarded("query synthesis", [&] {
    return sgld_query_batch(seeds.inputs, seeds.labels, f_, h_, sc, chains, nullptr);
  });
}

std::vector<double> Trainer::train_generator(const Tensor& queries,
                                             const std::vector<LabeledBatch>& bases,
                                             const CorrelationMatrix& c, int iters) {
  const size_t m = queries.extent(0);
  if (bases.size() != m)
    throw std::runtime_error("train_generator: queries/bases count mismatch");

  // query and base features under the frozen extractor, computed once
  Tensor zq_all = f_.features(queries);
  std::vector<Tensor> zb(m);
  for (size_t i = 0; i < m; ++i) zb[i] = f_.features(bases[i].inputs);

  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(std::max(iters, 0)));
  double mixgen_sum = 0.0, adv_sum = 0.0;
  int rounds = 0;

  for (int j = 0; j < iters; ++j) {
    std::vector<size_t> real_rows = draw_indices(cfg_.batch_size, data_.source.size(), rng_real_);
    Tensor real_feats = f_.features(data_.source.gather(real_rows).inputs);

    // discriminator ascent on the adversarial objective, generator frozen
    guarded("discriminator update", [&] {
      Tape t;
      BoundParams dbp = disc_.bind(t, true);
      MixupGenerator::Bound gb = gen_.bind(t, false);
      Var cvar = t.constant(c.c);
      std::vector<Var> zrows;
      zrows.reserve(m);
      for (size_t i = 0; i < m; ++i) {
        MixupGenerator::Mix mix =
            synthesize(t, t.constant(slice_row(zq_all, i)), t.constant(zb[i]),
                       t.constant(bases[i].labels), cvar, gb, cfg_.label_softmax);
        zrows.push_back(mix.z_mix);
      }
      Var z_mix = t.concat_rows(zrows);
      Var l_adv = adversarial_loss(t, disc_, dbp, t.constant(real_feats), z_mix);
      if (!std::isfinite(l_adv.value()[0]))
        throw TrainingAbort("discriminator objective non-finite at generator round " +
                            std::to_string(j));
      t.backward(t.scale(l_adv, -1.0));
      opt_disc_.step(disc_.params(), collect_grads(dbp));
    });

    // generator descent on L_mix_gen + lambda_adv * L_adv, discriminator frozen
    double mixgen_val = 0.0, adv_val = 0.0, total_val = 0.0;
    guarded("generator update", [&] {
      Tape t;
      MixupGenerator::Bound gb = gen_.bind(t, true);
      BoundParams dbp = disc_.bind(t, false);
      Var cvar = t.constant(c.c);
      std::vector<Var> zrows, yrows;
      zrows.reserve(m);
      yrows.reserve(m);
      for (size_t i = 0; i < m; ++i) {
        MixupGenerator::Mix mix =
            synthesize(t, t.constant(slice_row(zq_all, i)), t.constant(zb[i]),
                       t.constant(bases[i].labels), cvar, gb, cfg_.label_softmax);
        zrows.push_back(mix.z_mix);
        yrows.push_back(mix.y_mix);
      }
      Var z_mix = t.concat_rows(zrows);
      Var y_mix = t.concat_rows(yrows);
      Var l_adv = adversarial_loss(t, disc_, dbp, t.constant(real_feats), z_mix);
      adv_val = l_adv.value()[0];
      Var total;
      if (cfg_.variant == "no_mix_gen") {
        total = t.scale(l_adv, cfg_.lambda_adv);
      } else {
        Var l_mix_gen = generator_loss(t, z_mix, y_mix);
        mixgen_val = l_mix_gen.value()[0];
        total = cfg_.lambda_adv > 0.0 ? t.add(l_mix_gen, t.scale(l_adv, cfg_.lambda_adv))
                                      : l_mix_gen;
      }
      total_val = total.value()[0];
      if (!std::isfinite(total_val))
        throw TrainingAbort("generator objective non-finite at round " + std::to_string(j));
      t.backward(total);
      std::vector<Tensor> grads = {gb.wq.grad(), gb.wk.grad(), gb.wv.grad()};
      opt_gen_.step(gen_.params(), grads);
    });
    trace.push_back(total_val);
    mixgen_sum += mixgen_val;
    adv_sum += adv_val;
    ++rounds;
  }
  last_l_mix_gen_ = rounds > 0 ? mixgen_sum / rounds : 0.0;
  last_l_adv_ = rounds > 0 ? adv_sum / rounds : 0.0;
  return trace;
}

const RunMetrics& Trainer::run() {
  open_outputs();
  const bool augmented = cfg_.variant != "erm";
  const int iters = cfg_.outer_iters >= 0 ? cfg_.outer_iters : cfg_.epochs;
  try {
    if (!pretrained_) pretrain();
    if (!cfg_.out_dir.empty()) save_model(cfg_.out_dir + "/pretrain.ckpt", model_steps_done_);
    for (int it = 1; it <= iters; ++it) {
      IterRecord rec;
      rec.iter = it;
      if (augmented) {
        CorrelationMatrix c = correlation();
        LabeledBatch seeds =
            data_.source.gather(draw_indices(cfg_.queries_per_outer, data_.source.size(),
                                             rng_queries_));
        Tensor queries = make_queries(it, seeds);
        std::vector<LabeledBatch> bases;
        bases.reserve(cfg_.queries_per_outer);
        for (size_t i = 0; i < cfg_.queries_per_outer; ++i)
          bases.push_back(
              data_.source.gather(draw_indices(cfg_.n_b, data_.source.size(), rng_bases_)));
        train_generator(queries, bases, c, cfg_.generator_iters);
        rec.l_mix_gen = last_l_mix_gen_;
        rec.l_adv = last_l_adv_;
        for (size_t i = 0; i < cfg_.queries_per_outer; ++i)
          store_.append(generate(slice_row(queries, i), bases[i], f_, c, gen_,
                                 cfg_.label_softmax),
                        it, static_cast<int>(i));
      }
      auto [l_sup, l_mix] = finetune(store_);
      rec.l_sup = l_sup;
      rec.l_mix_tr = l_mix;
      rec.store_size = store_.size();
      bool do_eval = it == iters || (cfg_.eval_every > 0 && it % cfg_.eval_every == 0);
      if (do_eval) {
        rec.eval.emplace_back(data_.source.name, evaluate(data_.source));
        for (const Dataset& tgt : data_.targets) rec.eval.emplace_back(tgt.name, evaluate(tgt));
      }
      metrics_.iters.push_back(rec);
      write_metrics_line(rec);
      if (on_iter) on_iter(rec);
      if (!cfg_.out_dir.empty() && cfg_.checkpoint_every > 0 && it % cfg_.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof(name), "model_iter_%04d.ckpt", it);
        save_model(cfg_.out_dir + "/" + name, model_steps_done_);
      }
    }
  } catch (const TrainingAbort&) {
    if (!cfg_.out_dir.empty()) save_model(cfg_.out_dir + "/model_abort.ckpt", model_steps_done_);
    throw;
  }
  if (!cfg_.out_dir.empty()) {
    save_model(cfg_.out_dir + "/model_final.ckpt", model_steps_done_);
    CheckpointMeta gm;
    gm.kind = "generator";
    gm.spec = spec_;
    gm.seed = cfg_.seed;
    gm.step = static_cast<int64_t>(iters);
    save_checkpoint(cfg_.out_dir + "/generator_final.ckpt", gm, gen_.params());
    CheckpointMeta dm = gm;
    dm.kind = "discriminator";
    save_checkpoint(cfg_.out_dir + "/discriminator_final.ckpt", dm, disc_.params());
  }
  return metrics_;
}

void Trainer::save_model(const std::string& path, int64_t step) const {
  ParamSet merged;
  for (const NamedTensor& p : f_.params().items) merged.items.push_back({"f/" + p.name, p.value});
  for (const NamedTensor& p : h_.params().items) merged.items.push_back({"h/" + p.name, p.value});
  CheckpointMeta meta;
  meta.kind = "model";
  meta.spec = spec_;
  meta.seed = cfg_.seed;
  meta.step = step;
  save_checkpoint(path, meta, merged);
}

void Trainer::load_model(const std::string& path) {
  auto [meta, params] = load_checkpoint(path);
  if (meta.kind != "model")
    throw std::runtime_error("load_model: '" + path + "' holds a " + meta.kind + " checkpoint");
  if (!(meta.spec == spec_))
    throw std::runtime_error("load_model: architecture mismatch\n  checkpoint: " +
                             meta.spec.describe() + "\n  configured:  " + spec_.describe());
  auto restore = [&](const char* prefix, ParamSet& dst) {
    for (NamedTensor& p : dst.items) {
      const Tensor* src = params.find(std::string(prefix) + p.name);
      if (src == nullptr)
        throw std::runtime_error("load_model: missing tensor '" + std::string(prefix) + p.name +
                                 "' in '" + path + "'");
      if (!src->same_shape(p.value))
        throw std::runtime_error("load_model: shape mismatch for '" + std::string(prefix) +
                                 p.name + "'");
      p.value = *src;
    }
  };
  restore("f/", f_.params());
  restore("h/", h_.params());
  model_steps_done_ = meta.step;
}

void Trainer::open_outputs() {
  if (cfg_.out_dir.empty()) return;
  std::filesystem::create_directories(cfg_.out_dir);
  metrics_path_ = cfg_.out_dir + "/metrics.jsonl";
  std::ofstream out(metrics_path_, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + metrics_path_ + "' for writing");
}

void Trainer::write_metrics_line(const IterRecord& rec) {
  if (metrics_path_.empty()) return;
  nlohmann::ordered_json j;
  j["iter"] = rec.iter;
  j["L_sup"] = rec.l_sup;
  j["L_mix_gen"] = rec.l_mix_gen;
  j["L_adv"] = rec.l_adv;
  j["L_mix_tr"] = rec.l_mix_tr;
  j["store_size"] = rec.store_size;
  if (!rec.eval.empty()) {
    nlohmann::ordered_json e;
    for (const auto& [name, acc] : rec.eval) e[name] = acc;
    j["eval"] = e;
  }
  std::ofstream out(metrics_path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to '" + metrics_path_ + "'");
  out << j.dump() << "\n";
}

}  // namespace mpbm
