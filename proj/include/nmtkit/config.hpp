#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "nmtkit/bleu.hpp"
#include "nmtkit/checkpoint.hpp"
#include "nmtkit/errors.hpp"
#include "nmtkit/model.hpp"
#include "nmtkit/training.hpp"

namespace nmt {

struct PathsConfig {
  std::string train_src, train_tgt;
  std::string dev_src, dev_tgt;
  std::string test_src, test_ref;
  std::string src_merges;  // applied to raw source text at translation time
  std::string checkpoint_dir;
  std::string lm;
};

struct DecodeConfig {
  std::size_t beam = 12;
  std::size_t kbest = 50;
  double max_len_factor = 3.0;
  std::size_t threads = 1;
};

struct EvalConfig {
  BrevityMode bp = BrevityMode::shortest;
  CaseMode case_mode = CaseMode::insensitive;
  std::size_t bootstrap_samples = 1000;
  std::uint64_t seed = 1;
};

/// Everything a pipeline run reads. Sections: paths, model, train, bpe, lm,
/// decode, eval.
struct RunConfig {
  PathsConfig paths;
  ModelConfig model;
  std::size_t src_vocab_size = 0;  // 0 = every training token
  std::size_t tgt_vocab_size = 0;
  TrainConfig train;
  bool lowercase = true;
  std::size_t bpe_operations = 30000;
  std::size_t lm_order = 5;
  DecodeConfig decode;
  EvalConfig eval;
};

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v.front() == '-') throw std::invalid_argument(v);
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw FormatError("config " + key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw FormatError("config " + key + ": expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw FormatError("config " + key + ": expected true or false, got '" + v + "'");
}

struct ConfigKey {
  std::string name;  // section.key
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::string real_text(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto path = [&](std::string name, std::string PathsConfig::*m) {
      k.push_back({"paths." + name, [m](RunConfig& c, const std::string& v) { c.paths.*m = v; },
                   [m](const RunConfig& c) { return c.paths.*m; }});
    };
    path("train_src", &PathsConfig::train_src);
    path("train_tgt", &PathsConfig::train_tgt);
    path("dev_src", &PathsConfig::dev_src);
    path("dev_tgt", &PathsConfig::dev_tgt);
    path("test_src", &PathsConfig::test_src);
    path("test_ref", &PathsConfig::test_ref);
    path("src_merges", &PathsConfig::src_merges);
    path("checkpoint_dir", &PathsConfig::checkpoint_dir);
    path("lm", &PathsConfig::lm);

    auto size = [&](std::string name, auto getter) {
      k.push_back({name, [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_size(name, v); },
                   [getter](const RunConfig& c) { return std::to_string(getter(const_cast<RunConfig&>(c))); }});
    };
    auto real = [&](std::string name, auto getter) {
      k.push_back({name, [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_real(name, v); },
                   [getter](const RunConfig& c) { return real_text(getter(const_cast<RunConfig&>(c))); }});
    };
    auto flag = [&](std::string name, auto getter) {
      k.push_back({name, [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_bool(name, v); },
                   [getter](const RunConfig& c) {
                     return std::string(getter(const_cast<RunConfig&>(c)) ? "true" : "false");
                   }});
    };

    k.push_back({"model.unit", [](RunConfig& c, const std::string& v) { c.model.unit = parse_unit(v); },
                 [](const RunConfig& c) { return std::string(c.model.unit == UnitType::gru ? "gru" : "lstm"); }});
    k.push_back({"model.arch", [](RunConfig& c, const std::string& v) { c.model.arch = parse_architecture(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.arch)); }});
    size("model.embed", [](RunConfig& c) -> std::size_t& { return c.model.embed; });
    size("model.hidden", [](RunConfig& c) -> std::size_t& { return c.model.hidden; });
    size("model.align", [](RunConfig& c) -> std::size_t& { return c.model.align; });
    size("model.enc_depth", [](RunConfig& c) -> std::size_t& { return c.model.enc_depth; });
    size("model.dec_depth", [](RunConfig& c) -> std::size_t& { return c.model.dec_depth; });
    size("model.enc_transitions", [](RunConfig& c) -> std::size_t& { return c.model.enc_transitions; });
    size("model.dec_transitions", [](RunConfig& c) -> std::size_t& { return c.model.dec_transitions; });
    flag("model.layer_norm", [](RunConfig& c) -> bool& { return c.model.layer_norm; });
    flag("model.tie_embeddings", [](RunConfig& c) -> bool& { return c.model.tie_embeddings; });
    size("model.src_vocab_size", [](RunConfig& c) -> std::size_t& { return c.src_vocab_size; });
    size("model.tgt_vocab_size", [](RunConfig& c) -> std::size_t& { return c.tgt_vocab_size; });

    size("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    real("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; });
    real("train.clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; });
    size("train.checkpoint_interval", [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_interval; });
    size("train.patience", [](RunConfig& c) -> std::size_t& { return c.train.patience; });
    size("train.max_length", [](RunConfig& c) -> std::size_t& { return c.train.max_length; });
    size("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
    size("train.max_updates", [](RunConfig& c) -> std::size_t& { return c.train.max_updates; });
    flag("train.lowercase", [](RunConfig& c) -> bool& { return c.lowercase; });

    size("bpe.operations", [](RunConfig& c) -> std::size_t& { return c.bpe_operations; });
    size("lm.order", [](RunConfig& c) -> std::size_t& { return c.lm_order; });

    size("decode.beam", [](RunConfig& c) -> std::size_t& { return c.decode.beam; });
    size("decode.kbest", [](RunConfig& c) -> std::size_t& { return c.decode.kbest; });
    real("decode.max_len_factor", [](RunConfig& c) -> double& { return c.decode.max_len_factor; });
    size("decode.threads", [](RunConfig& c) -> std::size_t& { return c.decode.threads; });

    k.push_back({"eval.bp_mode",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "shortest")
                     c.eval.bp = BrevityMode::shortest;
                   else if (v == "closest")
                     c.eval.bp = BrevityMode::closest;
                   else
                     throw FormatError("config eval.bp_mode: expected shortest or closest, got '" + v + "'");
                 },
                 [](const RunConfig& c) { return std::string(c.eval.bp == BrevityMode::shortest ? "shortest" : "closest"); }});
    k.push_back({"eval.case_mode",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "insensitive")
                     c.eval.case_mode = CaseMode::insensitive;
                   else if (v == "sensitive")
                     c.eval.case_mode = CaseMode::sensitive;
                   else
                     throw FormatError("config eval.case_mode: expected sensitive or insensitive, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.eval.case_mode == CaseMode::insensitive ? "insensitive" : "sensitive");
                 }});
    size("eval.bootstrap_samples", [](RunConfig& c) -> std::size_t& { return c.eval.bootstrap_samples; });
    size("eval.seed", [](RunConfig& c) -> std::uint64_t& { return c.eval.seed; });
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Sets one "section.key" to a textual value; unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) return k.set(c, value);
  throw FormatError("unknown config key '" + key + "'");
}

/// "section.key=value"
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw FormatError("override '" + assignment + "' is not section.key=value");
  set_config_value(c, assignment.substr(0, eq), assignment.substr(eq + 1));
}

inline RunConfig parse_config(std::istream& is, RunConfig base = {}) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw FormatError("config: " + e.message() + " at line " + std::to_string(e.line()));
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw FormatError("config key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) set_config_value(base, section + "." + key, value.data());
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return parse_config(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_config(std::ostream& os, const RunConfig& c) {
  std::string section;
  for (const auto& k : detail::config_keys()) {
    const auto dot = k.name.find('.');
    const std::string s = k.name.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    os << k.name.substr(dot + 1) << " = " << k.get(c) << '\n';
  }
}

}  // namespace nmt
