#include "pbal/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <openssl/evp.h>

namespace pbal {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// INI helpers

using SectionMap = std::map<std::string, std::string>;

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Reads typed values from one section and remembers which keys were used.
class Section {
 public:
  Section(std::string name, const SectionMap* values) : name_(std::move(name)), values_(values) {}

  bool has(const std::string& key) const { return values_ && values_->count(key); }

  const std::string* raw(const std::string& key) {
    if (!values_) return nullptr;
    auto it = values_->find(key);
    if (it == values_->end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  void get(const std::string& key, double& out) {
    if (auto* v = raw(key)) out = to_double(key, *v);
  }
  void get(const std::string& key, int& out) {
    if (auto* v = raw(key)) {
      const double d = to_double(key, *v);
      if (d != std::floor(d) || std::abs(d) > 1e9) fail(key, *v, "an integer");
      out = static_cast<int>(d);
    }
  }
  void get_count(const std::string& key, std::size_t& out) {
    int v = static_cast<int>(out);
    get(key, v);
    if (v < 0) fail(key, std::to_string(v), "a non-negative integer");
    out = static_cast<std::size_t>(v);
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (auto* v = raw(key)) {
      std::uint64_t x = 0;
      auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), x);
      if (ec != std::errc() || p != v->data() + v->size()) fail(key, *v, "an unsigned integer");
      out = x;
    }
  }
  void get(const std::string& key, std::string& out) {
    if (auto* v = raw(key)) out = *v;
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (auto* v = raw(key)) out = split_list(*v);
  }
  std::vector<double> get_list(const std::string& key) {
    std::vector<double> out;
    if (auto* v = raw(key))
      for (const auto& item : split_list(*v)) out.push_back(to_double(key, item));
    return out;
  }

  /// Throws on keys that were never read.
  void finish() const {
    if (!values_) return;
    for (const auto& [k, v] : *values_)
      if (!used_.count(k)) throw ConfigError(fmt::format("[{}] unknown key '{}'", name_, k));
  }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& v, const char* what) const {
    throw ConfigError(fmt::format("[{}] {} = '{}' is not {}", name_, key, v, what));
  }
  double to_double(const std::string& key, const std::string& v) const {
    try {
      return parse_double(v);
    } catch (const DatasetError&) {
      fail(key, v, "a number");
    }
  }

  std::string name_;
  const SectionMap* values_;
  std::set<std::string> used_;
};

struct BodyField {
  const char* key;
  double BodyConfig::*member;
};

constexpr BodyField kBodyFields[] = {
    {"spine_pitch_deg", &BodyConfig::spine_pitch_deg},
    {"ankle_offset_deg", &BodyConfig::ankle_offset_deg},
    {"sole_stiffness", &BodyConfig::sole_stiffness},
    {"sole_damping", &BodyConfig::sole_damping},
    {"foot_half_length", &BodyConfig::foot_half_length},
    {"foot_half_width", &BodyConfig::foot_half_width},
    {"body_mass", &BodyConfig::body_mass},
    {"com_height", &BodyConfig::com_height},
    {"gyration_radius", &BodyConfig::gyration_radius},
    {"push_height", &BodyConfig::push_height},
    {"moment_arm", &BodyConfig::moment_arm},
    {"muscle_stiffness", &BodyConfig::muscle_stiffness},
    {"muscle_damping", &BodyConfig::muscle_damping},
    {"muscle_pretension", &BodyConfig::muscle_pretension},
    {"muscle_rest_length", &BodyConfig::muscle_rest_length},
    {"actuator_time_constant", &BodyConfig::actuator_time_constant},
    {"passive_stiffness", &BodyConfig::passive_stiffness},
    {"passive_damping", &BodyConfig::passive_damping},
    {"joint_friction", &BodyConfig::joint_friction},
    {"noise_z", &BodyConfig::noise_z},
    {"noise_f", &BodyConfig::noise_f},
    {"noise_l", &BodyConfig::noise_l},
};

void read_body(Section& s, BodyConfig& b) {
  for (const auto& f : kBodyFields) s.get(f.key, b.*(f.member));
}

void read_control(Section& s, ControlConfig& c) {
  s.get("n_step", c.n_step);
  s.get("n_batch", c.n_batch);
  s.get("n_epoch", c.n_epoch);
  s.get("gamma_max", c.gamma_max);
  s.get("c_f", c.c_f);
  s.get("c_l", c.c_l);
  s.get("c_u", c.c_u);
  if (s.has("z_ref")) {
    const auto z = s.get_list("z_ref");
    if (z.size() != 2) throw ConfigError("[control] z_ref needs two values");
    c.z_ref = {z[0], z[1]};
  }
  std::string text;
  if (s.has("space")) {
    s.get("space", text);
    c.space = parse_loss_space(text);
  }
  if (s.has("hidden")) {
    s.get("hidden", text);
    c.hidden = parse_hidden_mode(text);
  }
  s.get("rewarm_ticks", c.rewarm_ticks);
}

std::string fmt_num(double v) { return format_double(v); }

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + items[i];
  return out;
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 computation failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

bool valid_label(const std::string& label) {
  if (label.empty()) return false;
  return std::all_of(label.begin(), label.end(), [](unsigned char ch) {
    return std::isalnum(ch) || ch == '_' || ch == '-' || ch == '+' || ch == '.';
  });
}

}  // namespace

std::string grid_label(double sp, double ao) { return fmt::format("sp{:+g}_ao{:+g}", sp, ao); }

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
  // FNV-1a over the tag, then splitmix64 finalization.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : tag) h = (h ^ ch) * 0x100000001b3ull;
  std::uint64_t z = base ^ h ^ (index * 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(fmt::format("config syntax error at line {}: {}", e.line(), e.message()));
  }

  // Sections in file order; top-level keys are not allowed.
  std::vector<std::pair<std::string, SectionMap>> sections;
  std::map<std::string, const SectionMap*> by_name;
  for (const auto& [name, child] : pt) {
    if (child.empty() && !child.data().empty())
      throw ConfigError(fmt::format("key '{}' outside of any section", name));
    SectionMap m;
    for (const auto& [k, v] : child) m[k] = trim(v.data());
    sections.emplace_back(name, std::move(m));
  }
  for (const auto& [name, m] : sections) by_name[name] = &m;
  auto section = [&](const std::string& name) {
    auto it = by_name.find(name);
    return Section(name, it == by_name.end() ? nullptr : it->second);
  };

  ExperimentConfig cfg;
  cfg.bodies.clear();
  std::set<std::string> known{"experiment", "collect", "body", "grid", "train",
                              "adapt",      "control", "disturbance", "pd"};

  {
    auto s = section("experiment");
    s.get("name", cfg.name);
    s.get("seed", cfg.seed);
    s.finish();
  }
  {
    auto s = section("collect");
    std::string policy;
    if (s.has("policy")) {
      s.get("policy", policy);
      cfg.policy = parse_policy(policy);
    }
    s.get("steps", cfg.steps);
    s.get("n_cnt", cfg.collect.n_cnt);
    s.get("c_diff", cfg.collect.c_diff);
    s.get("c_init_diff", cfg.collect.c_init_diff);
    s.finish();
  }

  BodyConfig defaults;
  {
    auto s = section("body");
    read_body(s, defaults);
    s.finish();
  }
  {
    auto s = section("grid");
    const auto sp = s.get_list("spine_pitch_deg");
    const auto ao = s.get_list("ankle_offset_deg");
    s.finish();
    if (sp.empty() != ao.empty())
      throw ConfigError("[grid] needs both spine_pitch_deg and ankle_offset_deg");
    for (double a : sp)
      for (double b : ao) {
        BodyConfig body = defaults;
        body.spine_pitch_deg = a;
        body.ankle_offset_deg = b;
        body.label = grid_label(a, b);
        cfg.bodies.push_back(body);
      }
  }
  for (const auto& [name, m] : sections) {
    if (name.rfind("body.", 0) == 0) {
      Section s(name, &m);
      BodyConfig body = defaults;
      body.label = name.substr(5);
      read_body(s, body);
      s.finish();
      cfg.bodies.push_back(body);
    } else if (name.rfind("variant.", 0) == 0) {
      cfg.variants[name.substr(8)] = m;
    } else if (!known.count(name)) {
      throw ConfigError(fmt::format("unknown section [{}]", name));
    }
  }

  {
    auto s = section("train");
    auto& t = cfg.train;
    s.get("window", t.window);
    s.get("batch", t.batch);
    s.get("epochs", t.epochs);
    s.get("lr", t.lr);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("eps", t.eps);
    s.get("val_fraction", t.val_fraction);
    s.get("n_p", t.n_p);
    s.get("plateau_patience", t.plateau_patience);
    s.get("plateau_threshold", t.plateau_threshold);
    s.get("plateau_factor", t.plateau_factor);
    s.get("max_lr_drops", t.max_lr_drops);
    s.finish();
  }
  {
    auto s = section("adapt");
    s.get_count("capacity", cfg.adapt.capacity);
    s.get_count("threshold", cfg.adapt.threshold);
    s.get("lr", cfg.adapt.lr);
    s.get("momentum", cfg.adapt.momentum);
    s.get("updates", cfg.adapt_updates);
    s.get("bodies", cfg.adapt_bodies);
    s.get("init", cfg.adapt_init);
    s.finish();
  }
  {
    auto s = section("control");
    read_control(s, cfg.control);
    s.get("body", cfg.control_body);
    s.get("pb", cfg.control_pb);
    s.get("trials", cfg.trials);
    s.get("warmup_ticks", cfg.warmup_ticks);
    s.get("conditions", cfg.conditions);
    for (auto [key, slot] : {std::pair{"noise_z", &cfg.trial_noise_z},
                             std::pair{"noise_f", &cfg.trial_noise_f},
                             std::pair{"noise_l", &cfg.trial_noise_l}}) {
      if (!s.has(key)) continue;
      double v = 0.0;
      s.get(key, v);
      *slot = v;
    }
    s.finish();
  }
  {
    auto s = section("disturbance");
    s.get("force", cfg.disturbance.force);
    s.get("duration", cfg.disturbance.duration);
    double h = 0.0;
    if (s.has("height")) {
      s.get("height", h);
      cfg.disturbance.height = h;
    }
    s.finish();
  }
  if (by_name.count("pd")) {
    cfg.pd.clear();
    auto s = section("pd");
    for (const auto& [k, v] : *by_name["pd"]) {
      const auto g = s.get_list(k);
      if (g.size() != 2) throw ConfigError(fmt::format("[pd] {} needs 'kp, kd'", k));
      cfg.pd[k] = {g[0], g[1]};
    }
    s.finish();
  }

  if (cfg.bodies.empty()) {
    BodyConfig body = defaults;
    body.label = "nominal";
    cfg.bodies.push_back(body);
  }
  if (cfg.control_body.empty()) {
    // Prefer the untilted body if present.
    cfg.control_body = cfg.bodies.front().label;
    for (const auto& b : cfg.bodies)
      if (b.spine_pitch_deg == 0.0 && b.ankle_offset_deg == 0.0) {
        cfg.control_body = b.label;
        break;
      }
  }
  if (cfg.control_pb.empty()) cfg.control_pb = cfg.control_body;
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot read config {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::validate() const {
  std::set<std::string> labels;
  for (const auto& b : bodies) {
    if (!valid_label(b.label))
      throw ConfigError(fmt::format("body label '{}' must be non-empty and use [A-Za-z0-9_+-.]", b.label));
    if (!labels.insert(b.label).second)
      throw ConfigError(fmt::format("duplicate body label '{}'", b.label));
    b.validate();
  }
  if (steps < 1) throw ConfigError("[collect] steps must be >= 1");
  if (collect.n_cnt < 1 || !(collect.c_diff >= 0.0) || !(collect.c_init_diff >= 0.0))
    throw ConfigError("[collect] n_cnt must be >= 1 and c_diff, c_init_diff >= 0");
  try {
    train.validate();
    adapt.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (adapt_updates < 1) throw ConfigError("[adapt] updates must be >= 1");
  for (const auto& l : adapt_bodies)
    if (!labels.count(l)) throw ConfigError(fmt::format("[adapt] unknown body '{}'", l));
  if (adapt_init != "zero" && !labels.count(adapt_init))
    throw ConfigError(fmt::format("[adapt] init '{}' is neither 'zero' nor a body label", adapt_init));
  control.validate();
  if (!labels.count(control_body))
    throw ConfigError(fmt::format("[control] unknown body '{}'", control_body));
  if (!labels.count(control_pb))
    throw ConfigError(fmt::format("[control] pb '{}' is not a body label", control_pb));
  if (trials < 1) throw ConfigError("[control] trials must be >= 1");
  if (warmup_ticks < 0) throw ConfigError("[control] warmup_ticks must be >= 0");
  for (auto [key, v] : {std::pair{"noise_z", trial_noise_z}, std::pair{"noise_f", trial_noise_f},
                        std::pair{"noise_l", trial_noise_l}})
    if (v && !(*v >= 0.0)) throw ConfigError(fmt::format("[control] {} must be >= 0", key));
  disturbance.validate();
  for (const auto& name : conditions) condition(name);
}

const BodyConfig& ExperimentConfig::body(const std::string& label) const {
  for (const auto& b : bodies)
    if (b.label == label) return b;
  throw ConfigError(fmt::format("unknown body '{}'", label));
}

Condition ExperimentConfig::condition(const std::string& name) const {
  Condition c;
  c.name = name;
  if (name == "none") {
    c.kind = Condition::Kind::None;
    return c;
  }
  if (auto it = pd.find(name); it != pd.end()) {
    c.kind = Condition::Kind::Pd;
    c.pd = it->second;
    return c;
  }
  c.kind = Condition::Kind::Model;
  c.control = control;
  c.pb_label = control_pb;
  if (name == "proposed") return c;
  auto it = variants.find(name);
  if (it == variants.end()) throw ConfigError(fmt::format("unknown condition '{}'", name));
  SectionMap rest = it->second;
  if (auto pb = rest.find("pb"); pb != rest.end()) {
    c.pb_label = pb->second;
    rest.erase(pb);
  }
  Section s("variant." + name, &rest);
  read_control(s, c.control);
  s.finish();
  c.control.validate();
  bool known = false;
  for (const auto& b : bodies) known |= b.label == c.pb_label;
  if (!known) throw ConfigError(fmt::format("[variant.{}] pb '{}' is not a body label", name, c.pb_label));
  return c;
}

std::vector<Condition> ExperimentConfig::resolved_conditions() const {
  std::vector<Condition> out;
  for (const auto& n : conditions) out.push_back(condition(n));
  return out;
}

std::string ExperimentConfig::canonical() const {
  std::string o;
  auto kv = [&](const std::string& k, const std::string& v) { o += k + " = " + v + "\n"; };
  o += "[experiment]\n";
  kv("name", name);
  kv("seed", std::to_string(seed));
  o += "\n[collect]\n";
  kv("policy", std::string(to_string(policy)));
  kv("steps", std::to_string(steps));
  kv("n_cnt", std::to_string(collect.n_cnt));
  kv("c_diff", fmt_num(collect.c_diff));
  kv("c_init_diff", fmt_num(collect.c_init_diff));
  for (const auto& b : bodies) {
    o += "\n[body." + b.label + "]\n";
    for (const auto& f : kBodyFields) kv(f.key, fmt_num(b.*(f.member)));
  }
  o += "\n[train]\n";
  kv("window", std::to_string(train.window));
  kv("batch", std::to_string(train.batch));
  kv("epochs", std::to_string(train.epochs));
  kv("lr", fmt_num(train.lr));
  kv("beta1", fmt_num(train.beta1));
  kv("beta2", fmt_num(train.beta2));
  kv("eps", fmt_num(train.eps));
  kv("val_fraction", fmt_num(train.val_fraction));
  kv("n_p", std::to_string(train.n_p));
  kv("plateau_patience", std::to_string(train.plateau_patience));
  kv("plateau_threshold", fmt_num(train.plateau_threshold));
  kv("plateau_factor", fmt_num(train.plateau_factor));
  kv("max_lr_drops", std::to_string(train.max_lr_drops));
  o += "\n[adapt]\n";
  kv("capacity", std::to_string(adapt.capacity));
  kv("threshold", std::to_string(adapt.threshold));
  kv("lr", fmt_num(adapt.lr));
  kv("momentum", fmt_num(adapt.momentum));
  kv("updates", std::to_string(adapt_updates));
  kv("bodies", join(adapt_bodies));
  kv("init", adapt_init);
  o += "\n[control]\n";
  kv("n_step", std::to_string(control.n_step));
  kv("n_batch", std::to_string(control.n_batch));
  kv("n_epoch", std::to_string(control.n_epoch));
  kv("gamma_max", fmt_num(control.gamma_max));
  kv("c_f", fmt_num(control.c_f));
  kv("c_l", fmt_num(control.c_l));
  kv("c_u", fmt_num(control.c_u));
  kv("z_ref", fmt_num(control.z_ref.x()) + ", " + fmt_num(control.z_ref.y()));
  kv("space", std::string(to_string(control.space)));
  kv("hidden", std::string(to_string(control.hidden)));
  kv("rewarm_ticks", std::to_string(control.rewarm_ticks));
  kv("body", control_body);
  kv("pb", control_pb);
  kv("trials", std::to_string(trials));
  kv("warmup_ticks", std::to_string(warmup_ticks));
  kv("conditions", join(conditions));
  if (trial_noise_z) kv("noise_z", fmt_num(*trial_noise_z));
  if (trial_noise_f) kv("noise_f", fmt_num(*trial_noise_f));
  if (trial_noise_l) kv("noise_l", fmt_num(*trial_noise_l));
  o += "\n[disturbance]\n";
  kv("force", fmt_num(disturbance.force));
  kv("duration", fmt_num(disturbance.duration));
  if (disturbance.height) kv("height", fmt_num(*disturbance.height));
  o += "\n[pd]\n";
  for (const auto& [k, g] : pd) kv(k, fmt_num(g.kp) + ", " + fmt_num(g.kd));
  for (const auto& [vname, m] : variants) {
    o += "\n[variant." + vname + "]\n";
    for (const auto& [k, v] : m) kv(k, v);
  }
  return o;
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical()); }

// ---------------------------------------------------------------------------
// Protocols

CollectedDataset collect_dataset(const ExperimentConfig& cfg) {
  CollectedDataset out;
  for (std::size_t i = 0; i < cfg.bodies.size(); ++i) {
    const auto& body = cfg.bodies[i];
    ManifestEntry entry;
    entry.label = body.label;
    entry.policy = cfg.policy;
    entry.seed = derive_seed(cfg.seed, "collect", i);
    try {
      auto ep = run_collection(body, cfg.policy, cfg.steps, entry.seed, cfg.collect);
      entry.file = fmt::format("episode_{:02}_{}.csv", i, body.label);
      entry.ticks = ep.size();
      entry.fell = ep.fell;
      out.episodes.push_back(std::move(ep));
    } catch (const std::exception& e) {
      entry.error = e.what();
    }
    out.manifest.push_back(entry);
  }
  return out;
}

AdaptRun run_adaptation(const ExperimentConfig& cfg, const Checkpoint& ckpt,
                        const std::string& body_label) {
  const auto& body = cfg.body(body_label);
  AdaptRun run;
  run.label = body_label;
  run.start = cfg.adapt_init == "zero" ? Vec::Zero(ckpt.arch.n_p) : ckpt.pb(cfg.adapt_init);
  PbAdapter adapter(ckpt, run.start, cfg.adapt);

  const auto seed = derive_seed(cfg.seed, "adapt:" + body_label);
  Plant plant(body, seed ^ 0x9e3779b97f4a7c15ull);
  auto ps = PolicyState::start(cfg.policy, seed, cfg.collect);
  const auto target = ckpt.pb_index(body_label);

  // Same movement as during collection; restart from upright after a fall.
  const std::size_t max_ticks = cfg.adapt.threshold + 10 * static_cast<std::size_t>(cfg.adapt_updates);
  for (std::size_t t = 0; t < max_ticks && adapter.updates() < static_cast<std::size_t>(cfg.adapt_updates); ++t) {
    const auto s = plant.sense();
    const double u = next_command(ps);
    adapter.observe(s, u);
    plant.step(u);
    if (plant.is_fallen()) {
      plant.reset(0.0);
      ps = PolicyState::start(cfg.policy, derive_seed(seed, "restart", t), cfg.collect);
    }
  }
  run.log = adapter.log();

  double best = std::numeric_limits<double>::infinity();
  for (const auto& pb : ckpt.pbs) {
    const double d = (pb.p - adapter.p()).norm();
    if (d < best) {
      best = d;
      run.nearest = pb.label;
    }
  }
  if (target) {
    run.start_distance = (ckpt.pbs[*target].p - run.start).norm();
    run.end_distance = (ckpt.pbs[*target].p - adapter.p()).norm();
  } else {
    run.start_distance = run.end_distance = std::numeric_limits<double>::quiet_NaN();
  }
  return run;
}

std::vector<TrialRun> run_trials(const ExperimentConfig& cfg, const Checkpoint* ckpt,
                                 const Condition& condition) {
  if (condition.kind == Condition::Kind::Model && !ckpt)
    throw std::invalid_argument(fmt::format("condition '{}' needs a trained model", condition.name));
  BodyConfig body = cfg.body(cfg.control_body);
  if (cfg.trial_noise_z) body.noise_z = *cfg.trial_noise_z;
  if (cfg.trial_noise_f) body.noise_f = *cfg.trial_noise_f;
  if (cfg.trial_noise_l) body.noise_l = *cfg.trial_noise_l;
  Vec p;
  if (condition.kind == Condition::Kind::Model) p = ckpt->pb(condition.pb_label);

  std::vector<TrialRun> runs;
  for (int trial = 0; trial < cfg.trials; ++trial) {
    Plant plant(body, derive_seed(cfg.seed, "trial-noise", static_cast<std::uint64_t>(trial)));
    std::optional<ControllerState> cs;
    if (ckpt) cs = ControllerState::initial(*ckpt);
    double prev_error = 0.0;
    bool have_prev = false;
    TrialRun run;
    run.record.condition = condition.name;

    auto decide = [&](const SensorState& s, bool log) {
      switch (condition.kind) {
        case Condition::Kind::None:
          return 0.0;
        case Condition::Kind::Pd: {
          const double e = s.z.x() - cfg.control.z_ref.x();
          const double de = have_prev ? (e - prev_error) / kTickSeconds : 0.0;
          prev_error = e;
          have_prev = true;
          return std::clamp(condition.pd.kp * e + condition.pd.kd * de, kThetaMin, kThetaMax);
        }
        case Condition::Kind::Model: {
          auto out = control_step(s, *cs, condition.control, p, *ckpt);
          if (log) run.controller.push_back(std::move(out.log));
          return out.u;
        }
      }
      return 0.0;
    };

    for (int t = 0; t < cfg.warmup_ticks; ++t) plant.step(decide(plant.sense(), false));

    Disturbance push = cfg.disturbance;
    push.start = plant.state().time;
    const double t0 = plant.state().time;
    for (int t = 0; t < kTrialTicks; ++t) {
      const auto s = plant.sense();
      const double u = decide(s, true);
      run.record.t.push_back(plant.state().time - t0);
      run.record.states.push_back(s);
      run.record.commands.push_back(u);
      plant.step(u, &push);
    }
    runs.push_back(std::move(run));
  }
  return runs;
}

ConditionMetrics summarize(const std::string& name, const std::vector<TrialRun>& runs) {
  ConditionMetrics m;
  m.name = name;
  std::vector<TrialRecord> records;
  for (const auto& r : runs) records.push_back(r.record);
  m.e_z = metric_Ez(records);
  for (const auto& r : records) {
    m.e_f += metric_Ef(r) / static_cast<double>(records.size());
    m.rms_du += rms_delta_u(r) / static_cast<double>(records.size());
    const auto z = zx_offset_removed(r);
    m.worst_overshoot_ratio = std::max(m.worst_overshoot_ratio, overshoot(z).ratio);
  }
  const auto mean = mean_zx(records);
  m.overshoot_ratio = overshoot(mean).ratio;
  for (const auto& r : runs)
    for (const auto& log : r.controller) {
      ++m.control_ticks;
      if (log.fault) ++m.faults;
      double prev = log.initial_loss;
      for (double l : log.loss) {
        if (l > prev) ++m.monotone_violations;
        prev = l;
      }
    }
  return m;
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::ofstream open_csv(const fs::path& path, const Metadata& meta) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError(fmt::format("cannot write {}", path.string()));
  for (const auto& [k, v] : meta) out << "# " << k << ": " << v << '\n';
  return out;
}

std::string join_nums(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + format_double(v[i]);
  return s;
}

}  // namespace

void write_trials_csv(const std::vector<TrialRun>& runs, const fs::path& path, const Metadata& meta) {
  auto out = open_csv(path, meta);
  const int n_m = runs.empty() || runs.front().record.states.empty()
                      ? 0
                      : runs.front().record.states.front().n_muscles();
  out << "condition,trial,tick,t,z_x,z_y";
  for (int i = 0; i < n_m; ++i) out << ",f" << i;
  for (int i = 0; i < n_m; ++i) out << ",l" << i;
  out << ",theta_ref\n";
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& r = runs[k].record;
    for (std::size_t t = 0; t < r.size(); ++t) {
      const auto& s = r.states[t];
      out << r.condition << ',' << k << ',' << t << ',' << format_double(r.t[t]) << ','
          << format_double(s.z.x()) << ',' << format_double(s.z.y());
      for (int i = 0; i < n_m; ++i) out << ',' << format_double(s.f[i]);
      for (int i = 0; i < n_m; ++i) out << ',' << format_double(s.l[i]);
      out << ',' << format_double(r.commands[t]) << '\n';
    }
  }
}

std::vector<TrialRun> read_trials_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(fmt::format("cannot read {}", path.string()));
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) == 0) continue;
    header = split_list(line);
    break;
  }
  if (header.size() < 7 || header[0] != "condition")
    throw DatasetError(fmt::format("{}: not a trials file", path.string()));
  const int n_m = static_cast<int>(header.size() - 7) / 2;
  std::vector<TrialRun> runs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream row(line);
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size())
      throw DatasetError(fmt::format("{}: malformed row '{}'", path.string(), line));
    const auto trial = static_cast<std::size_t>(parse_double(cells[1]));
    if (trial >= runs.size()) runs.resize(trial + 1);
    auto& r = runs[trial].record;
    r.condition = cells[0];
    r.t.push_back(parse_double(cells[3]));
    auto s = SensorState::zeros(n_m);
    s.z = {parse_double(cells[4]), parse_double(cells[5])};
    for (int i = 0; i < n_m; ++i) {
      s.f[i] = parse_double(cells[6 + i]);
      s.l[i] = parse_double(cells[6 + n_m + i]);
    }
    r.states.push_back(std::move(s));
    r.commands.push_back(parse_double(cells.back()));
  }
  return runs;
}

void write_controller_csv(const std::vector<TrialRun>& runs, const fs::path& path,
                          const Metadata& meta) {
  auto out = open_csv(path, meta);
  out << "trial,tick,t,z_x,z_y,u_init,u_opt,initial_loss,gamma,loss,fault\n";
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& r = runs[k];
    for (std::size_t t = 0; t < r.controller.size() && t < r.record.size(); ++t) {
      const auto& log = r.controller[t];
      const auto& s = r.record.states[t];
      out << k << ',' << t << ',' << format_double(r.record.t[t]) << ',' << format_double(s.z.x())
          << ',' << format_double(s.z.y()) << ',' << join_nums(log.u_init) << ','
          << join_nums(log.u_opt) << ',' << format_double(log.initial_loss) << ','
          << join_nums(log.gamma) << ',' << join_nums(log.loss) << ',' << (log.fault ? 1 : 0)
          << '\n';
    }
  }
}

void write_train_log_csv(const std::vector<EpochLog>& log, const fs::path& path,
                         const Metadata& meta) {
  auto out = open_csv(path, meta);
  out << "epoch,train_loss,val_loss,lr\n";
  for (const auto& e : log)
    out << e.epoch << ',' << format_double(e.train_loss) << ','
        << (std::isnan(e.val_loss) ? std::string() : format_double(e.val_loss)) << ','
        << format_double(e.lr) << '\n';
}

void write_adapt_csv(const AdaptRun& run, const fs::path& path, const Metadata& meta) {
  auto out = open_csv(path, meta);
  const auto n_p = run.start.size();
  out << "update";
  for (Eigen::Index i = 0; i < n_p; ++i) out << ",p" << i;
  out << ",buffer_loss,skipped,wall_ms\n";
  out << 0;
  for (Eigen::Index i = 0; i < n_p; ++i) out << ',' << format_double(run.start[i]);
  out << ",,0,\n";
  for (const auto& e : run.log) {
    out << e.update;
    for (Eigen::Index i = 0; i < n_p; ++i) out << ',' << format_double(e.p[i]);
    out << ',' << format_double(e.loss) << ',' << (e.skipped ? 1 : 0) << ','
        << fmt::format("{:.3f}", e.wall_ms) << '\n';
  }
}

}  // namespace pbal
