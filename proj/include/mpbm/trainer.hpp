#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mpbm/config.hpp"
#include "mpbm/correlation.hpp"
#include "mpbm/data.hpp"
#include "mpbm/mixgen.hpp"
#include "mpbm/models.hpp"
#include "mpbm/query.hpp"

namespace mpbm {

// raised when optimization diverges (non-finite loss)
struct TrainingAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Append-only collection of synthesized samples with provenance.
class AugmentStore {
 public:
  struct Entry {
    MixupSample sample;
    int outer_iter;
    int query_id;
  };

  void append(MixupSample s, int outer_iter, int query_id);
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Entry& operator[](size_t i) const { return entries_[i]; }

  // mini-batch of stored (z, y) rows, sampled with replacement
  LabeledBatch sample(size_t n, Rng& rng) const;

 private:
  std::vector<Entry> entries_;
};

struct IterRecord {
  int iter = 0;
  double l_sup = 0.0;
  double l_mix_gen = 0.0;
  double l_adv = 0.0;
  double l_mix_tr = 0.0;
  size_t store_size = 0;
  // (domain, accuracy): "source" first, then targets in manifest order;
  // empty when evaluation was skipped this iteration
  std::vector<std::pair<std::string, double>> eval;
};

struct RunMetrics {
  double pretrain_loss = 0.0;
  double pretrain_accuracy = 0.0;
  std::vector<IterRecord> iters;
};

// Orchestrates the progressive augmentation loop: supervised pretraining,
// correlation refresh, adversarial query generation, generator/discriminator
// rounds, store growth, and combined fine-tuning.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const DomainSet& data);

  // supervised cross-entropy phase (or checkpoint load when configured)
  void pretrain();

  // the full outer loop; calls pretrain() first if it has not run yet
  const RunMetrics& run();

  // --- pieces reused by tests and tools ---

  // mean CE of the stop-gradient classifier on a synthesized batch
  Var generator_loss(Tape& t, Var z_mix, Var y_mix) const;

  // E[log D(real)] + E[log(1 - D(mix))] under the given discriminator binding
  static Var adversarial_loss(Tape& t, const Discriminator& d, const BoundParams& dbp, Var real,
                              Var mix);

  // `iters` alternating discriminator/generator updates on fixed queries and
  // base batches; returns the generator objective value after each round
  std::vector<double> train_generator(const Tensor& queries,
                                      const std::vector<LabeledBatch>& bases,
                                      const CorrelationMatrix& c, int iters);

  // fine-tuning steps of L_sup + lambda_mix * L_mix on shuffled batches;
  // returns (mean supervised loss, mean mixup loss)
  std::pair<double, double> finetune(const AugmentStore& store);

  double evaluate(const Dataset& d) const;
  Tensor extract_all(const Dataset& d) const;
  CorrelationMatrix correlation();

  void save_model(const std::string& path, int64_t step) const;
  void load_model(const std::string& path);

  FeatureExtractor& extractor() { return f_; }
  Classifier& classifier() { return h_; }
  Discriminator& discriminator() { return disc_; }
  MixupGenerator& generator() { return gen_; }
  const FeatureExtractor& extractor() const { return f_; }
  const Classifier& classifier() const { return h_; }
  const Discriminator& discriminator() const { return disc_; }
  const MixupGenerator& generator() const { return gen_; }
  const AugmentStore& store() const { return store_; }
  const RunMetrics& metrics() const { return metrics_; }
  const ModelSpec& model_spec() const { return spec_; }
  const RunConfig& config() const { return cfg_; }

  // optional progress hooks
  std::function<void(int epoch, double loss)> on_epoch;
  std::function<void(const IterRecord&)> on_iter;

 private:
  // one optimizer step on (batch, optional store mini-batch); returns losses
  std::pair<double, double> model_step(const std::vector<size_t>& rows, const AugmentStore* store);
  std::vector<size_t> draw_indices(size_t n, size_t upto, Rng& rng) const;
  Tensor make_queries(int outer_iter, const LabeledBatch& seeds);
  void write_metrics_line(const IterRecord& rec);
  void open_outputs();
  double lr_scale() const;
  size_t steps_per_pass() const;

  RunConfig cfg_;
  const DomainSet& data_;
  ModelSpec spec_;

  Rng root_;
  Rng rng_pretrain_, rng_finetune_, rng_queries_, rng_sgld_, rng_bases_, rng_real_, rng_store_,
      rng_corr_;

  FeatureExtractor f_;
  Classifier h_;
  Discriminator disc_;
  MixupGenerator gen_;

  AdaptiveSgd opt_model_, opt_gen_, opt_disc_;
  int64_t model_steps_done_ = 0;
  bool pretrained_ = false;

  AugmentStore store_;
  RunMetrics metrics_;
  std::deque<std::vector<size_t>> finetune_queue_;
  double last_l_mix_gen_ = 0.0;
  double last_l_adv_ = 0.0;

  std::string metrics_path_;
};

}  // namespace mpbm
