#include "ehnet/experiment.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ehnet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ModelShape ExperimentConfig::shape() const {
  ModelShape s;
  s.image_channels = 3;
  s.hidden_channels = model.hidden_channels;
  s.feat_channels = model.feat_channels;
  s.embed_dim = model.embed_dim;
  s.aspp_channels = model.aspp_channels;
  s.eaus_w_scale = model.eaus_w_scale;
  return s;
}

PipelineOptions ExperimentConfig::pipeline_options() const {
  PipelineOptions o;
  o.strategy = strategy;
  o.setting = embeddings;
  o.schedule = schedule;
  o.iterations = model.iterations;
  return o;
}

namespace {

// Reads the keys of one JSON object and rejects anything it was not asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename F>
  void field(const char* key, F&& read) {
    known_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    read(*it, path_.empty() ? std::string(key) : path_ + "." + key);
  }

  void count(const char* key, std::size_t& out, std::size_t min = 1) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigError(p + " must be a non-negative integer");
      }
      const auto x = v.get<std::uint64_t>();
      if (x < min) throw ConfigError(p + " must be at least " + std::to_string(min));
      out = static_cast<std::size_t>(x);
    });
  }

  void real(const char* key, double& out, double lo, double hi, bool open_lo = true) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_number()) throw ConfigError(p + " must be a number");
      const double x = v.get<double>();
      if (!std::isfinite(x) || (open_lo ? x <= lo : x < lo) || x > hi) {
        throw ConfigError(p + " out of range");
      }
      out = x;
    });
  }

  void flag(const char* key, bool& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_boolean()) throw ConfigError(p + " must be true or false");
      out = v.get<bool>();
    });
  }

  template <typename E, typename Parse>
  void choice(const char* key, E& out, Parse parse) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_string()) throw ConfigError(p + " must be a string");
      try {
        out = parse(v.get<std::string>());
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw ConfigError(p + ": " + e.what());
      }
    });
  }

  void counts(const char* key, std::vector<std::size_t>& out, std::size_t min_len) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_array() || v.size() < min_len) {
        throw ConfigError(p + " must be an array of at least " + std::to_string(min_len) + " positive integers");
      }
      out.clear();
      for (const auto& e : v) {
        if (!e.is_number_unsigned() || e.get<std::uint64_t>() == 0) {
          throw ConfigError(p + " entries must be positive integers");
        }
        out.push_back(e.get<std::size_t>());
      }
    });
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      (void)v;
      if (!known_.count(k)) throw ConfigError("unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

void validate(const ExperimentConfig& c) {
  try {
    const Taxonomy tax = gen_taxonomy(c.seed, c.taxonomy);
    build_schedule(tax, c.protocol, c.seed);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (c.protocol.base_classes < 2) throw ConfigError("protocol.base_classes must be at least 2");
  if (c.model.clusters > c.protocol.base_classes) {
    throw ConfigError("model.clusters exceeds the number of base classes");
  }
  if (c.training.samples_per_class < 2) throw ConfigError("training.samples_per_class must be at least 2");
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader top(j, "");
  top.field("schema_version", [&](const json& v, const std::string&) {
    if (!v.is_number_integer() || v.get<long long>() != kConfigSchemaVersion) {
      throw ConfigError("unsupported schema_version (expected " + std::to_string(kConfigSchemaVersion) + ")");
    }
  });
  if (!j.contains("schema_version")) throw ConfigError("missing schema_version");
  top.field("seed", [&](const json& v, const std::string&) {
    if (!v.is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
    c.seed = v.get<std::uint64_t>();
  });
  top.field("taxonomy", [&](const json& v, const std::string& p) {
    ObjectReader r(v, p);
    r.count("groups", c.taxonomy.groups);
    r.count("classes_per_group", c.taxonomy.classes_per_group);
    r.count("image_size", c.taxonomy.image_size, 16);
    r.finish();
  });
  top.field("protocol", [&](const json& v, const std::string& p) {
    ObjectReader r(v, p);
    r.count("base_classes", c.protocol.base_classes);
    r.counts("new_per_session", c.protocol.new_per_session, 0);
    r.count("shots", c.protocol.shots);
    r.count("base_support_per_class", c.protocol.base_support_per_class);
    r.count("queries_per_class", c.protocol.queries_per_class);
    r.finish();
  });
  top.field("model", [&](const json& v, const std::string& p) {
    ObjectReader r(v, p);
    r.count("embed_dim", c.model.embed_dim);
    r.count("hidden_channels", c.model.hidden_channels);
    r.count("feat_channels", c.model.feat_channels);
    r.count("aspp_channels", c.model.aspp_channels);
    r.real("eaus_w_scale", c.model.eaus_w_scale, 0.0, 10.0, false);
    r.count("clusters", c.model.clusters);
    r.count("kmeans_restarts", c.model.kmeans_restarts);
    r.count("iterations", c.model.iterations, 0);
    r.real("tau", c.model.tau, 0.0, 1.0);
    r.finish();
  });
  top.field("training", [&](const json& v, const std::string& p) {
    ObjectReader r(v, p);
    r.count("pretrain_epochs", c.training.pretrain_epochs, 0);
    r.count("epochs", c.training.epochs, 0);
    r.count("episodes_per_epoch", c.training.episodes_per_epoch);
    r.choice("optimizer", c.training.optimizer, parse_optimizer_kind);
    r.real("lr", c.training.lr, 0.0, 10.0);
    r.real("lr_decay", c.training.lr_decay, 0.0, 1.0);
    r.count("decay_every", c.training.decay_every);
    r.count("samples_per_class", c.training.samples_per_class);
    r.counts("episode_sessions", c.training.episode_sessions, 1);
    r.count("negatives", c.training.negatives, 0);
    r.flag("freeze_heads", c.training.freeze_heads);
    r.finish();
  });
  top.field("strategy", [&](const json& v, const std::string& p) {
    ObjectReader r(v, p);
    r.choice("kind", c.strategy.kind, parse_strategy_kind);
    r.choice("scope", c.strategy.scope, parse_update_scope);
    r.finish();
  });
  top.choice("embeddings", c.embeddings, parse_embedding_setting);
  top.choice("schedule", c.schedule, parse_update_schedule);
  top.count("repeat", c.repeat);
  top.flag("record_timing", c.record_timing);
  top.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

namespace {

json config_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["taxonomy"] = {{"groups", c.taxonomy.groups},
                   {"classes_per_group", c.taxonomy.classes_per_group},
                   {"image_size", c.taxonomy.image_size}};
  j["protocol"] = {{"base_classes", c.protocol.base_classes},
                   {"new_per_session", c.protocol.new_per_session},
                   {"shots", c.protocol.shots},
                   {"base_support_per_class", c.protocol.base_support_per_class},
                   {"queries_per_class", c.protocol.queries_per_class}};
  j["model"] = {{"embed_dim", c.model.embed_dim},
                {"hidden_channels", c.model.hidden_channels},
                {"feat_channels", c.model.feat_channels},
                {"aspp_channels", c.model.aspp_channels},
                {"eaus_w_scale", c.model.eaus_w_scale},
                {"clusters", c.model.clusters},
                {"kmeans_restarts", c.model.kmeans_restarts},
                {"iterations", c.model.iterations},
                {"tau", c.model.tau}};
  j["training"] = {{"pretrain_epochs", c.training.pretrain_epochs},
                   {"epochs", c.training.epochs},
                   {"episodes_per_epoch", c.training.episodes_per_epoch},
                   {"optimizer", to_string(c.training.optimizer)},
                   {"lr", c.training.lr},
                   {"lr_decay", c.training.lr_decay},
                   {"decay_every", c.training.decay_every},
                   {"samples_per_class", c.training.samples_per_class},
                   {"episode_sessions", c.training.episode_sessions},
                   {"negatives", c.training.negatives},
                   {"freeze_heads", c.training.freeze_heads}};
  j["strategy"] = {{"kind", to_string(c.strategy.kind)}, {"scope", to_string(c.strategy.scope)}};
  j["embeddings"] = to_string(c.embeddings);
  j["schedule"] = to_string(c.schedule);
  j["repeat"] = c.repeat;
  j["record_timing"] = c.record_timing;
  return j;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

void apply_seed_override(ExperimentConfig& cfg) {
  const char* v = std::getenv(kSeedEnvVar);
  if (!v || !*v) return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || v[0] == '-') {
    throw ConfigError(std::string(kSeedEnvVar) + " must be a non-negative integer, got '" + v + "'");
  }
  cfg.seed = s;
}

std::string pretrain_key(const ExperimentConfig& cfg) {
  json j = config_json(cfg);
  for (const char* k : {"repeat", "record_timing", "strategy", "embeddings", "schedule"}) j.erase(k);
  j["model"].erase("tau");
  j["model"].erase("eaus_w_scale");
  j["protocol"].erase("queries_per_class");
  j["protocol"].erase("shots");
  j["training"].erase("epochs");
  j["training"].erase("freeze_heads");
  return j.dump();
}

std::string training_key(const ExperimentConfig& cfg) {
  json j = config_json(cfg);
  j.erase("repeat");
  j.erase("record_timing");
  j["model"].erase("tau");
  j["protocol"].erase("queries_per_class");
  j["protocol"].erase("shots");
  return j.dump();
}

// ---------------------------------------------------------------------------
// Memory construction shared by training and evaluation
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kTagTrainSample = 0x74726e;
constexpr std::uint64_t kTagHyper = 0x687970;
constexpr std::uint64_t kTagEpisode = 0x657069;

Embedding mean_embedding(std::span<const Embedding> es) {
  Embedding m{std::vector<double>(es.front().dim(), 0.0)};
  for (const auto& e : es)
    for (std::size_t k = 0; k < m.dim(); ++k) m.values[k] += e.values[k];
  for (auto& v : m.values) v /= static_cast<double>(es.size());
  return m;
}

/// Hyper-class of `ec_raw` among `population`, leaving out index `skip`.
Embedding hyper_raw_for(const Embedding& ec_raw, std::span<const Embedding> population,
                        std::optional<std::size_t> skip, std::size_t k, std::size_t restarts,
                        std::uint64_t seed) {
  std::vector<Embedding> pop;
  for (std::size_t i = 0; i < population.size(); ++i)
    if (!skip || i != *skip) pop.push_back(population[i]);
  if (pop.empty()) {
    Embedding h = ec_raw;
    h.kind = EmbeddingKind::hyperclass;
    return h;
  }
  return raw_hyperclass(ec_raw, pop, std::min(k, pop.size()), restarts, seed);
}

struct Memory {
  MemoryPool cat;
  MemoryPool hyp;  // aligned E_h in the category slot
};

void update_memory(Memory& mem, const ExperimentConfig& cfg, const Model& model, int session) {
  if (cfg.strategy.kind == StrategyKind::non_update) return;
  if (updates_category(cfg.embeddings)) {
    mem.cat = apply_strategy(mem.cat, cfg.strategy, model.eaus, model.lt, session);
  }
  if (updates_hyper(cfg.embeddings)) {
    mem.hyp = apply_strategy(mem.hyp, cfg.strategy, model.eaus, model.lt, session);
  }
}

/// Inserts one class. With `absorb`, extra shots are fused by kshot_absorb
/// into whichever embeddings the setting updates; otherwise shots are fused
/// by averaging their raw embeddings.
void add_class(Memory& mem, const ExperimentConfig& cfg, const Model& model, int cid, int session,
               std::span<const Embedding> shot_raws, const Embedding& eh_raw, bool absorb) {
  const Embedding mean_raw = mean_embedding(shot_raws);
  const AlignedPair fused = cim_align(eh_raw, mean_raw, model.cim);
  const bool eaus = absorb && cfg.strategy.kind == StrategyKind::eaus && shot_raws.size() > 1;
  const bool absorb_c = eaus && updates_category(cfg.embeddings);
  const bool absorb_h = eaus && updates_hyper(cfg.embeddings);
  std::vector<AlignedPair> shots;
  if (absorb_c || absorb_h)
    for (const auto& r : shot_raws) shots.push_back(cim_align(eh_raw, r, model.cim));

  mem.cat.insert(cid, absorb_c ? shots[0].category : fused.category, fused.hyper, session);
  mem.hyp.insert(cid, absorb_h ? shots[0].hyper : fused.hyper, fused.hyper, session);
  for (std::size_t s = 1; s < shots.size(); ++s) {
    if (absorb_c) mem.cat = kshot_absorb(mem.cat, cid, shots[s].category, model.eaus);
    if (absorb_h) mem.hyp = kshot_absorb(mem.hyp, cid, shots[s].hyper, model.eaus);
  }
}

std::vector<Embedding> embed_refs(const Taxonomy& tax, const Model& model, std::span<const SampleRef> refs) {
  std::vector<Embedding> out;
  for (const auto& r : refs) {
    const RenderedSample s = render_sample(tax, r.class_id, r.seed);
    out.push_back(embed_support(s.image, s.mask, model.featext));
  }
  return out;
}

std::vector<SampleRef> refs_of(std::span<const SampleRef> all, int cid) {
  std::vector<SampleRef> out;
  for (const auto& r : all)
    if (r.class_id == cid) out.push_back(r);
  return out;
}

template <typename F>
auto with_context(const std::string& ctx, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const NumericError& e) {
    throw NumericError(ctx + ": " + e.what());
  } catch (const Error& e) {
    throw Error(ctx + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Base training
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<Sample>> training_samples(const ExperimentConfig& cfg, const Taxonomy& tax,
                                                  std::span<const int> base_classes) {
  std::vector<std::vector<Sample>> samples(base_classes.size());
  for (std::size_t c = 0; c < base_classes.size(); ++c)
    for (std::size_t j = 0; j < cfg.training.samples_per_class; ++j) {
      const int cid = base_classes[c];
      const auto s = render_sample(
          tax, cid, derive_seed(cfg.seed, {kTagTrainSample, static_cast<std::uint64_t>(cid), j}));
      samples[c].push_back({s.image, s.mask, cid});
    }
  return samples;
}

/// One support per class split into pseudo-sessions, a query of a random
/// episode class, and that class plus negatives (same group first) as targets.
struct FrozenFeatures {
  std::vector<std::vector<Embedding>> raw;
  std::vector<std::vector<FeatureMap>> maps;
};

Episode make_episode(const ExperimentConfig& cfg, const Taxonomy& tax, const std::vector<std::vector<Sample>>& samples,
                     const std::vector<Embedding>& hyper, Rng& rng, const FrozenFeatures* frozen = nullptr) {
  const std::size_t n = samples.size();
  const std::size_t per = samples.front().size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  // With frozen features the first pseudo-session mirrors the test protocol
  // and stores the mean of several supports per class.
  const std::size_t base_k = frozen ? std::clamp<std::size_t>(cfg.protocol.base_support_per_class, 1, per - 1) : 1;
  Episode ep;
  std::vector<std::vector<std::size_t>> picks;
  std::size_t used = 0;
  for (std::size_t ps = 0; ps < cfg.training.episode_sessions.size() && used < n; ++ps)
    for (std::size_t k = 0; k < cfg.training.episode_sessions[ps] && used < n; ++k, ++used) {
      const std::size_t c = order[used];
      std::vector<std::size_t> idx(per);
      for (std::size_t j = 0; j < per; ++j) idx[j] = j;
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(ps == 0 ? base_k : 1);
      EpisodeClass ec{samples[c][idx[0]], hyper[c], static_cast<int>(ps), std::nullopt};
      if (frozen) {
        std::vector<Embedding> raws;
        for (std::size_t j : idx) raws.push_back(frozen->raw[c][j]);
        ec.ec_raw = mean_embedding(raws);
      }
      picks.push_back(std::move(idx));
      ep.classes.push_back(std::move(ec));
    }
  const std::size_t qi = std::uniform_int_distribution<std::size_t>(0, ep.classes.size() - 1)(rng);
  const int qcid = ep.classes[qi].support.class_id;
  std::vector<std::size_t> rest;
  for (std::size_t j = 0; j < per; ++j)
    if (std::find(picks[qi].begin(), picks[qi].end(), j) == picks[qi].end()) rest.push_back(j);
  const std::size_t qpick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
  ep.query = samples[order[qi]][qpick];
  if (frozen) ep.query_features = frozen->maps[order[qi]][qpick];

  std::vector<int> same, other;
  for (const auto& ec : ep.classes) {
    const int cid = ec.support.class_id;
    if (cid == qcid) continue;
    (tax.at(cid).group == tax.at(qcid).group ? same : other).push_back(cid);
  }
  std::shuffle(same.begin(), same.end(), rng);
  std::shuffle(other.begin(), other.end(), rng);
  same.insert(same.end(), other.begin(), other.end());
  ep.targets = {qcid};
  for (std::size_t k = 0; k < cfg.training.negatives && k < same.size(); ++k) ep.targets.push_back(same[k]);
  return ep;
}

std::vector<Embedding> epoch_hypers(const ExperimentConfig& cfg, const Model& model,
                                    const std::vector<std::vector<Sample>>& samples, std::uint64_t epoch) {
  // Raw embeddings under the current extractor; hyper-classes are constants
  // of the epoch, clustered with the class itself left out.
  std::vector<Embedding> bank;
  for (const auto& cls : samples) {
    std::vector<Embedding> raws;
    for (const auto& s : cls) raws.push_back(embed_support(s.image, s.mask, model.featext));
    bank.push_back(mean_embedding(raws));
  }
  std::vector<Embedding> hyper(bank.size());
  for (std::size_t c = 0; c < bank.size(); ++c)
    hyper[c] = hyper_raw_for(bank[c], bank, c, cfg.model.clusters, cfg.model.kmeans_restarts,
                             derive_seed(cfg.seed, {kTagHyper, epoch, c}));
  return hyper;
}

}  // namespace

namespace {

double lr_at(const TrainingConfig& t, std::size_t epoch) {
  return t.lr * std::pow(t.lr_decay, static_cast<double>(epoch / t.decay_every));
}

}  // namespace

Model pretrain_model(const ExperimentConfig& cfg, const Taxonomy& tax, std::span<const int> base_classes,
                     std::vector<double>* epoch_losses) {
  const auto samples = training_samples(cfg, tax, base_classes);
  Model model = Model::init(cfg.shape(), cfg.seed);
  Optimizer opt(cfg.training.optimizer, model);
  const std::vector<ParamGroup> groups{ParamGroup::featext, ParamGroup::cim, ParamGroup::casm};
  PipelineOptions popt;
  popt.strategy = {StrategyKind::non_update, UpdateScope::both};
  popt.setting = EmbeddingSetting::keep_hyper;
  popt.iterations = cfg.model.iterations;

  for (std::size_t epoch = 0; epoch < cfg.training.pretrain_epochs; ++epoch) {
    const auto hyper = epoch_hypers(cfg, model, samples, epoch);
    const double lr = lr_at(cfg.training, epoch);
    double loss_sum = 0.0;
    for (std::size_t e = 0; e < cfg.training.episodes_per_epoch; ++e) {
      Rng rng(derive_seed(cfg.seed, {kTagEpisode, epoch, e}));
      const Episode ep = make_episode(cfg, tax, samples, hyper, rng);
      loss_sum += with_context("pretraining, epoch " + std::to_string(epoch) + " episode " + std::to_string(e),
                               [&] { return train_step(model, opt, ep, popt, lr, groups); });
    }
    if (epoch_losses) epoch_losses->push_back(loss_sum / static_cast<double>(cfg.training.episodes_per_epoch));
  }
  return model;
}

Model train_model(const ExperimentConfig& cfg, const Taxonomy& tax, std::span<const int> base_classes,
                  const Model& pretrained, std::vector<double>* epoch_losses) {
  const auto samples = training_samples(cfg, tax, base_classes);
  Model model = pretrained;
  Optimizer opt(cfg.training.optimizer, model);
  std::vector<ParamGroup> groups;
  if (!cfg.training.freeze_heads) groups = {ParamGroup::cim, ParamGroup::casm};
  if (cfg.strategy.kind == StrategyKind::eaus) groups.push_back(ParamGroup::eaus);
  if (cfg.strategy.kind == StrategyKind::linear_transform) groups.push_back(ParamGroup::lt);
  const PipelineOptions popt = cfg.pipeline_options();
  if (groups.empty()) return model;

  FrozenFeatures frozen;
  for (const auto& cls : samples) {
    frozen.raw.emplace_back();
    frozen.maps.emplace_back();
    for (const auto& s : cls) {
      frozen.raw.back().push_back(embed_support(s.image, s.mask, model.featext));
      frozen.maps.back().push_back(extract_features(s.image, model.featext));
    }
  }
  const auto hyper = epoch_hypers(cfg, model, samples, 0);

  for (std::size_t epoch = 0; epoch < cfg.training.epochs; ++epoch) {
    const double lr = lr_at(cfg.training, epoch);
    double loss_sum = 0.0;
    for (std::size_t e = 0; e < cfg.training.episodes_per_epoch; ++e) {
      Rng rng(derive_seed(cfg.seed, {kTagEpisode, cfg.training.pretrain_epochs + epoch, e}));
      const Episode ep = make_episode(cfg, tax, samples, hyper, rng, &frozen);
      loss_sum += with_context("base training, epoch " + std::to_string(epoch) + " episode " + std::to_string(e),
                               [&] { return train_step(model, opt, ep, popt, lr, groups); });
    }
    if (epoch_losses) epoch_losses->push_back(loss_sum / static_cast<double>(cfg.training.episodes_per_epoch));
  }
  return model;
}

namespace {

BaseState prepare_base(const ExperimentConfig& cfg, Model model, const Taxonomy& tax,
                       const SessionSchedule& sched) {
  BaseState base;
  base.model = std::move(model);
  const std::size_t d = cfg.model.embed_dim;
  base.pool = MemoryPool(d);
  base.hyper_pool = MemoryPool(d);
  base.base_raw = MemoryPool(d);
  const Session& s0 = sched.sessions.front();
  std::vector<Embedding> raw_means;
  for (int cid : s0.classes) {
    const auto refs = refs_of(s0.support, cid);
    const auto raws = embed_refs(tax, base.model, refs);
    raw_means.push_back(mean_embedding(raws));
  }
  Memory mem{MemoryPool(d), MemoryPool(d)};
  for (std::size_t i = 0; i < s0.classes.size(); ++i) {
    const int cid = s0.classes[i];
    const Embedding eh = hyper_raw_for(raw_means[i], raw_means, i, cfg.model.clusters,
                                       cfg.model.kmeans_restarts,
                                       derive_seed(cfg.seed, {kTagHyper, static_cast<std::uint64_t>(cid)}));
    base.base_raw.insert(cid, raw_means[i], eh, 0);
    const Embedding one[] = {raw_means[i]};
    add_class(mem, cfg, base.model, cid, 0, one, eh, false);
    if (cfg.schedule == UpdateSchedule::per_insertion) update_memory(mem, cfg, base.model, 0);
  }
  if (cfg.schedule == UpdateSchedule::per_session) update_memory(mem, cfg, base.model, 0);
  base.pool = std::move(mem.cat);
  base.hyper_pool = std::move(mem.hyp);
  return base;
}

}  // namespace

BaseState train_base(const ExperimentConfig& cfg, const Model* pretrained) {
  const Taxonomy tax = gen_taxonomy(cfg.seed, cfg.taxonomy);
  const SessionSchedule sched = build_schedule(tax, cfg.protocol, cfg.seed, 0);
  const std::vector<int>& base_classes = sched.sessions.front().classes;
  std::vector<double> losses;
  Model own;
  if (!pretrained) {
    own = pretrain_model(cfg, tax, base_classes, &losses);
    pretrained = &own;
  }
  Model model = train_model(cfg, tax, base_classes, *pretrained, &losses);
  BaseState base = with_context("session 0", [&] { return prepare_base(cfg, std::move(model), tax, sched); });
  base.losses = std::move(losses);
  return base;
}

void save_base(const std::string& dir, const BaseState& base) {
  std::filesystem::create_directories(dir);
  save_model(dir + "/model.bin", base.model);
  save_pool(dir + "/pool.bin", base.pool);
  save_pool(dir + "/hyper_pool.bin", base.hyper_pool);
  save_pool(dir + "/base_raw.bin", base.base_raw);
}

BaseState load_base(const std::string& dir) {
  BaseState b;
  b.model = load_model(dir + "/model.bin");
  b.pool = load_pool(dir + "/pool.bin");
  b.hyper_pool = load_pool(dir + "/hyper_pool.bin");
  // The pool format does not carry the stage tag.
  const MemoryPool raw = load_pool(dir + "/base_raw.bin");
  b.base_raw = MemoryPool(raw.dim());
  for (const auto& r : raw.records()) {
    Embedding c = r.category(), h = r.hyper();
    c.stage = h.stage = EmbeddingStage::raw;
    b.base_raw.insert(r.class_id(), std::move(c), std::move(h), r.session_id());
  }
  if (b.pool.dim() != b.model.embed_dim() || b.hyper_pool.size() != b.pool.size() ||
      b.base_raw.size() != b.pool.size()) {
    throw Error("base checkpoint in " + dir + " is inconsistent");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

LabelMap predict(const ExperimentConfig& cfg, const Model& model, const Memory& mem, const RasterImage& img) {
  const FeatureMap q = extract_features(img, model.featext);
  const std::size_t factor = img.height() / q.dim(1);
  std::map<int, ConfidenceMap> conf;
  for (std::size_t j = 0; j < mem.cat.size(); ++j) {
    const ClassRecord& r = mem.cat[j];
    std::span<const double> c, h;
    if (uses_category(cfg.embeddings)) c = r.category().values;
    if (uses_hyper(cfg.embeddings)) h = updates_hyper(cfg.embeddings) ? mem.hyp[j].category().values : r.hyper().values;
    const DenseFeat f = dense_compare(q, c, h, model.casm);
    conf.emplace(r.class_id(), upsample_bilinear(segment_class(f, cfg.model.iterations, model.casm), factor));
  }
  return nms_fuse(conf, cfg.model.tau);
}

std::vector<SessionEval> evaluate_draw(const ExperimentConfig& cfg, const BaseState& base, const Taxonomy& tax,
                                       std::uint64_t draw) {
  const SessionSchedule sched = build_schedule(tax, cfg.protocol, cfg.seed, draw);
  const std::vector<int> base_ids = sched.sessions.front().classes;
  const std::set<int> base_set(base_ids.begin(), base_ids.end());
  std::vector<Embedding> population;
  for (const auto& r : base.base_raw.records()) population.push_back(r.category());

  Memory mem{base.pool, base.hyper_pool};
  std::vector<SessionEval> out;
  for (std::size_t i = 0; i < sched.sessions.size(); ++i) {
    const Session& ses = sched.sessions[i];
    const int si = static_cast<int>(i);
    const std::string ctx = "session " + std::to_string(i);
    if (i > 0) {
      for (int cid : ses.classes) {
        with_context(ctx + " class " + std::to_string(cid), [&] {
          const auto raws = embed_refs(tax, base.model, refs_of(ses.support, cid));
          const Embedding eh = hyper_raw_for(mean_embedding(raws), population, std::nullopt, cfg.model.clusters,
                                             cfg.model.kmeans_restarts,
                                             derive_seed(cfg.seed, {kTagHyper, static_cast<std::uint64_t>(cid)}));
          add_class(mem, cfg, base.model, cid, si, raws, eh, true);
          if (cfg.schedule == UpdateSchedule::per_insertion) update_memory(mem, cfg, base.model, si);
          return 0;
        });
      }
      if (cfg.schedule == UpdateSchedule::per_session) update_memory(mem, cfg, base.model, si);
    }

    SessionEval ev;
    ev.session = i;
    ev.classes = sched.seen_classes(i);
    IouAccumulator acc;
    double ms = 0.0;
    with_context(ctx + " evaluation", [&] {
      for (const auto& ref : ses.query) {
        const RenderedSample s = render_sample(tax, ref.class_id, ref.seed);
        const auto t0 = std::chrono::steady_clock::now();
        const LabelMap pred = predict(cfg, base.model, mem, s.image);
        ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        acc.add(pred, label_map(s.mask, ref.class_id), ev.classes);
      }
      return 0;
    });
    if (cfg.record_timing) ev.ms_per_frame = ms / static_cast<double>(ses.query.size());

    std::vector<int> newer, current, earlier;
    for (int c : ev.classes) {
      if (const auto v = acc.iou(c)) ev.class_iou[c] = *v;
      if (base_set.count(c)) continue;
      newer.push_back(c);
      (std::find(ses.classes.begin(), ses.classes.end(), c) != ses.classes.end() ? current : earlier).push_back(c);
    }
    ev.base_miou = acc.miou(base_ids);
    if (i > 0) {
      ev.new_miou = acc.miou(newer);
      ev.current_miou = acc.miou(current);
      ev.earlier_miou = acc.miou(earlier);
    }
    ev.mean_miou = acc.miou(ev.classes);
    out.push_back(std::move(ev));
  }
  return out;
}

std::optional<double> mean_opt(const std::vector<std::optional<double>>& v) { return mean_of(v); }

}  // namespace

EvalReport evaluate(const ExperimentConfig& cfg, const BaseState& base) {
  const Taxonomy tax = gen_taxonomy(cfg.seed, cfg.taxonomy);
  std::vector<std::vector<SessionEval>> runs;
  for (std::size_t r = 0; r < cfg.repeat; ++r) runs.push_back(evaluate_draw(cfg, base, tax, r));

  EvalReport rep;
  for (const auto& c : tax.classes) rep.class_group[c.class_id] = c.group;
  const std::size_t ns = runs.front().size();
  for (std::size_t i = 0; i < ns; ++i) {
    SessionEval m;
    m.session = i;
    m.classes = runs.front()[i].classes;
    for (int c : m.classes) {
      std::vector<std::optional<double>> v;
      for (const auto& run : runs) {
        const auto it = run[i].class_iou.find(c);
        v.push_back(it == run[i].class_iou.end() ? std::nullopt : std::optional<double>(it->second));
      }
      if (const auto x = mean_opt(v)) m.class_iou[c] = *x;
    }
    auto agg = [&](std::optional<double> SessionEval::*field) {
      std::vector<std::optional<double>> v;
      for (const auto& run : runs) v.push_back(run[i].*field);
      return mean_opt(v);
    };
    m.base_miou = agg(&SessionEval::base_miou);
    m.new_miou = agg(&SessionEval::new_miou);
    m.current_miou = agg(&SessionEval::current_miou);
    m.earlier_miou = agg(&SessionEval::earlier_miou);
    m.mean_miou = agg(&SessionEval::mean_miou);
    m.ms_per_frame = agg(&SessionEval::ms_per_frame);
    rep.sessions.push_back(std::move(m));
  }

  const std::size_t first = rep.sessions.size() > 1 ? 1 : 0;
  auto over_sessions = [&](std::optional<double> SessionEval::*field) {
    std::vector<std::optional<double>> v;
    for (std::size_t i = first; i < rep.sessions.size(); ++i) v.push_back(rep.sessions[i].*field);
    return mean_opt(v);
  };
  rep.summary.base_miou = over_sessions(&SessionEval::base_miou);
  rep.summary.new_miou = over_sessions(&SessionEval::new_miou);
  rep.summary.mean_miou = over_sessions(&SessionEval::mean_miou);
  rep.summary.ms_per_frame = over_sessions(&SessionEval::ms_per_frame);
  return rep;
}

EvalReport run_experiment(const ExperimentConfig& cfg) { return evaluate(cfg, train_base(cfg)); }

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

void write_report_csv(std::ostream& os, const EvalReport& report) {
  os << kReportHeader << "\n";
  for (const auto& s : report.sessions) {
    for (int c : s.classes) {
      const auto it = s.class_iou.find(c);
      os << s.session << "," << c << "," << report.class_group.at(c) << ","
         << fmt(it == s.class_iou.end() ? std::nullopt : std::optional<double>(it->second)) << ",,,,\n";
    }
    os << s.session << ",current-new,," << fmt(s.current_miou) << ",,,,\n";
    os << s.session << ",earlier-new,," << fmt(s.earlier_miou) << ",,,,\n";
    os << s.session << ",all,,," << fmt(s.base_miou) << "," << fmt(s.new_miou) << "," << fmt(s.mean_miou) << ","
       << fmt(s.ms_per_frame) << "\n";
  }
  const auto& m = report.summary;
  os << "mean,all,,," << fmt(m.base_miou) << "," << fmt(m.new_miou) << "," << fmt(m.mean_miou) << ","
     << fmt(m.ms_per_frame) << "\n";
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::embeddings: return "embeddings";
    case AblationAxis::strategy: return "strategy";
    case AblationAxis::iterations: return "iterations";
  }
  return "?";
}

AblationAxis parse_ablation_axis(const std::string& s) {
  for (auto a : {AblationAxis::embeddings, AblationAxis::strategy, AblationAxis::iterations})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown ablation axis '" + s + "' (expected embeddings, strategy, iterations)");
}

const BaseState& BaseCache::get(const ExperimentConfig& cfg) {
  const std::string key = training_key(cfg);
  auto it = bases_.find(key);
  if (it != bases_.end()) return it->second;
  const std::string pkey = pretrain_key(cfg);
  auto pt = pretrained_.find(pkey);
  if (pt == pretrained_.end()) {
    const Taxonomy tax = gen_taxonomy(cfg.seed, cfg.taxonomy);
    const SessionSchedule sched = build_schedule(tax, cfg.protocol, cfg.seed, 0);
    pt = pretrained_.emplace(pkey, pretrain_model(cfg, tax, sched.sessions.front().classes)).first;
  }
  return bases_.emplace(key, train_base(cfg, &pt->second)).first->second;
}

std::vector<std::pair<std::string, ExperimentConfig>> ablation_configs(const ExperimentConfig& cfg,
                                                                       AblationAxis axis) {
  std::vector<std::pair<std::string, ExperimentConfig>> out;
  switch (axis) {
    case AblationAxis::embeddings:
      for (auto s : {EmbeddingSetting::hyper_only, EmbeddingSetting::category_only, EmbeddingSetting::both_updated,
                     EmbeddingSetting::keep_category, EmbeddingSetting::keep_hyper}) {
        ExperimentConfig c = cfg;
        c.embeddings = s;
        out.emplace_back(to_string(s), c);
      }
      break;
    case AblationAxis::strategy: {
      ExperimentConfig c = cfg;
      c.strategy = {StrategyKind::non_update, UpdateScope::both};
      out.emplace_back("non-update", c);
      for (auto k : {StrategyKind::linear_transform, StrategyKind::eaus})
        for (auto s : {UpdateScope::base_only, UpdateScope::new_only, UpdateScope::both}) {
          c.strategy = {k, s};
          out.emplace_back(to_string(k) + "-" + to_string(s), c);
        }
      break;
    }
    case AblationAxis::iterations:
      for (std::size_t t = 0; t <= 5; ++t) {
        ExperimentConfig c = cfg;
        c.model.iterations = t;
        c.record_timing = true;
        out.emplace_back("T=" + std::to_string(t), c);
      }
      break;
  }
  return out;
}

std::vector<AblationRow> ablation_run(const ExperimentConfig& cfg, AblationAxis axis, BaseCache* cache) {
  BaseCache local;
  BaseCache& bc = cache ? *cache : local;
  std::vector<AblationRow> rows;
  for (const auto& [name, c] : ablation_configs(cfg, axis)) {
    // The iteration sweep evaluates one model trained at the configured T.
    const BaseState& base = bc.get(axis == AblationAxis::iterations ? cfg : c);
    rows.push_back({name, evaluate(c, base).summary});
  }
  return rows;
}

void write_ablation_csv(std::ostream& os, AblationAxis axis, const std::vector<AblationRow>& rows) {
  os << kAblationHeader << "\n";
  for (const auto& r : rows) {
    os << to_string(axis) << "," << r.setting << "," << fmt(r.summary.base_miou) << "," << fmt(r.summary.new_miou)
       << "," << fmt(r.summary.mean_miou) << "," << fmt(r.summary.ms_per_frame) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Dataset export and gradient check
// ---------------------------------------------------------------------------

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void write_ppm(const std::string& path, const RasterImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t ch = std::min(c, img.channels() - 1);
        os.put(static_cast<char>(to_byte(img.pixels.at(ch, y, x))));
      }
}

void write_pgm(const std::string& path, const BinaryMask& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << "P5\n" << m.width << " " << m.height << "\n255\n";
  for (auto v : m.values) os.put(static_cast<char>(v ? 255 : 0));
}

}  // namespace

void export_dataset(const ExperimentConfig& cfg, const std::string& dir, std::uint64_t draw) {
  const Taxonomy tax = gen_taxonomy(cfg.seed, cfg.taxonomy);
  const SessionSchedule sched = build_schedule(tax, cfg.protocol, cfg.seed, draw);
  validate_schedule(sched);
  std::filesystem::create_directories(dir + "/images");
  std::filesystem::create_directories(dir + "/masks");
  std::ofstream index(dir + "/index.csv");
  if (!index) throw Error("cannot write " + dir + "/index.csv");
  index << "session,split,class_id,group,image,mask\n";
  std::size_t n = 0;
  for (std::size_t i = 0; i < sched.sessions.size(); ++i) {
    for (const char* split : {"support", "query"}) {
      const auto& refs = std::string(split) == "support" ? sched.sessions[i].support : sched.sessions[i].query;
      for (const auto& r : refs) {
        const RenderedSample s = render_sample(tax, r.class_id, r.seed);
        char name[32];
        std::snprintf(name, sizeof name, "%06zu", n++);
        const std::string img = std::string("images/") + name + ".ppm";
        const std::string msk = std::string("masks/") + name + ".pgm";
        write_ppm(dir + "/" + img, s.image);
        write_pgm(dir + "/" + msk, s.mask);
        index << i << "," << split << "," << r.class_id << "," << tax.at(r.class_id).group << "," << img << ","
              << msk << "\n";
      }
    }
  }
}

std::vector<PipelineGradCheck> gradcheck_pipeline(const ExperimentConfig& cfg, std::uint64_t seed,
                                                  std::size_t coords_per_tensor, double h) {
  ExperimentConfig c = cfg;
  c.seed = seed;
  c.training.samples_per_class = 2;
  const Taxonomy tax = gen_taxonomy(c.seed, c.taxonomy);
  const SessionSchedule sched = build_schedule(tax, c.protocol, c.seed);
  const Model model = Model::init(c.shape(), seed);
  const auto samples = training_samples(c, tax, sched.sessions.front().classes);
  const auto hyper = epoch_hypers(c, model, samples, 0);
  Rng rng(derive_seed(seed, {kTagEpisode}));
  const Episode ep = make_episode(c, tax, samples, hyper, rng);
  const PipelineOptions popt = c.pipeline_options();

  Model grad = model.zeros_like();
  episode_loss(model, ep, popt, &grad);
  Model probe = model;
  const auto pt = all_tensors(probe);
  const auto gt = all_tensors(grad);
  std::vector<PipelineGradCheck> out;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    if (pt[i]->empty()) continue;
    const Tensor base = *pt[i];
    std::vector<std::size_t> coords(base.size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    Rng pick(derive_seed(seed, {0x636f, i}));
    std::shuffle(coords.begin(), coords.end(), pick);
    coords.resize(std::min(coords.size(), coords_per_tensor));
    std::sort(coords.begin(), coords.end());
    auto f = [&](const Tensor& t) {
      *pt[i] = t;
      const double v = episode_loss(probe, ep, popt);
      *pt[i] = base;
      return v;
    };
    out.push_back({"slot " + std::to_string(i), check_gradient(f, base, *gt[i], h, coords)});
  }
  return out;
}

}  // namespace ehnet
