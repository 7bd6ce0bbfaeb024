#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "nmtkit/errors.hpp"
#include "nmtkit/model.hpp"
#include "nmtkit/vocab.hpp"

namespace nmt {

inline constexpr char kCheckpointMagic[8] = {'N', 'M', 'T', 'K', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Parameters plus the vocabularies and training position they belong to.
template <class Real>
struct SavedModel {
  ModelParams<Real> params;
  Vocab src_vocab, tgt_vocab;
  std::uint64_t updates = 0;
  double dev_loss = 0;
};

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "unit=" << (c.unit == UnitType::gru ? "gru" : "lstm") << '\n'
     << "arch=" << to_string(c.arch) << '\n'
     << "src_vocab=" << c.src_vocab << '\n'
     << "tgt_vocab=" << c.tgt_vocab << '\n'
     << "embed=" << c.embed << '\n'
     << "hidden=" << c.hidden << '\n'
     << "align=" << c.align << '\n'
     << "enc_depth=" << c.enc_depth << '\n'
     << "dec_depth=" << c.dec_depth << '\n'
     << "enc_transitions=" << c.enc_transitions << '\n'
     << "dec_transitions=" << c.dec_transitions << '\n'
     << "layer_norm=" << c.layer_norm << '\n'
     << "tie_embeddings=" << c.tie_embeddings << '\n';
  return os.str();
}

inline UnitType parse_unit(const std::string& v) {
  if (v == "gru") return UnitType::gru;
  if (v == "lstm") return UnitType::lstm;
  throw FormatError("unknown unit type '" + v + "' (expected gru or lstm)");
}

inline Architecture parse_architecture(const std::string& v) {
  if (v == to_string(Architecture::deep_stacked)) return Architecture::deep_stacked;
  if (v == to_string(Architecture::deep_transition)) return Architecture::deep_transition;
  throw FormatError("unknown architecture '" + v + "' (expected " + to_string(Architecture::deep_stacked) + " or " +
                    to_string(Architecture::deep_transition) + ")");
}

inline ModelConfig parse_model_config_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint config: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint config: missing key " + k);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto num = [&](const std::string& k) -> std::size_t {
    const std::string v = take(k);
    try {
      std::size_t used = 0;
      const auto n = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw FormatError("checkpoint config: bad value for " + k);
    }
  };
  c.unit = parse_unit(take("unit"));
  c.arch = parse_architecture(take("arch"));
  c.src_vocab = num("src_vocab");
  c.tgt_vocab = num("tgt_vocab");
  c.embed = num("embed");
  c.hidden = num("hidden");
  c.align = num("align");
  c.enc_depth = num("enc_depth");
  c.dec_depth = num("dec_depth");
  c.enc_transitions = num("enc_transitions");
  c.dec_transitions = num("dec_transitions");
  c.layer_norm = num("layer_norm") != 0;
  c.tie_embeddings = num("tie_embeddings") != 0;
  if (!kv.empty()) throw FormatError("checkpoint config: unknown key " + kv.begin()->first);
  return c;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint64_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::string& bytes() const { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& b, std::size_t end) : b_(b), end_(end) {}
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw FormatError("checkpoint is truncated");
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str() {
    const auto n = uint<std::uint64_t>();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes to bytes: magic, version, config block, vocabularies,
/// position, parameter blocks (name, rank, dims, float32 data), checksum.
template <class Real>
std::string serialize_checkpoint(const SavedModel<Real>& m) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.uint(kCheckpointVersion);
  w.str(model_config_text(m.params.config));
  for (const Vocab* v : {&m.src_vocab, &m.tgt_vocab}) {
    w.uint(static_cast<std::uint64_t>(v->size()));
    for (const auto& t : v->tokens()) w.str(t);
  }
  w.uint(m.updates);
  w.f64(m.dev_loss);
  const auto named = m.params.named();
  w.uint(static_cast<std::uint64_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.str(name);
    w.uint(static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) w.uint(static_cast<std::uint64_t>(d));
    for (std::size_t i = 0; i < t->size(); ++i) w.f32(static_cast<float>((*t)[i]));
  }
  w.uint(detail::fnv1a(w.bytes()));
  return w.bytes();
}

template <class Real>
SavedModel<Real> deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw FormatError("not a checkpoint file (bad magic)");
  {
    detail::ByteReader head(bytes, bytes.size());
    head.skip(8);
    const auto version = head.uint<std::uint32_t>();
    if (version != kCheckpointVersion)
      throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                        std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 20) throw FormatError("checkpoint is truncated");
  const std::size_t body = bytes.size() - 8;
  detail::ByteReader tail(bytes, bytes.size());
  tail.skip(body);
  if (tail.uint<std::uint64_t>() != detail::fnv1a(bytes.substr(0, body)))
    throw FormatError("checkpoint checksum mismatch (file is truncated or corrupt)");

  detail::ByteReader r(bytes, body);
  r.skip(12);
  SavedModel<Real> m;
  const ModelConfig cfg = parse_model_config_text(r.str());
  try {
    m.params = make_params<Real>(cfg);
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  for (Vocab* v : {&m.src_vocab, &m.tgt_vocab}) {
    const auto n = r.uint<std::uint64_t>();
    std::vector<std::string> toks;
    for (std::uint64_t i = 0; i < n; ++i) toks.push_back(r.str());
    *v = Vocab(std::move(toks));
  }
  if (m.src_vocab.size() != cfg.src_vocab || m.tgt_vocab.size() != cfg.tgt_vocab)
    throw FormatError("checkpoint vocabularies do not match the model config");
  m.updates = r.uint<std::uint64_t>();
  m.dev_loss = r.f64();
  auto named = m.params.named();
  if (r.uint<std::uint64_t>() != named.size()) throw FormatError("checkpoint parameter count does not match config");
  for (auto& [name, t] : named) {
    if (r.str() != name) throw FormatError("checkpoint parameter order does not match config at " + name);
    if (r.uint<std::uint32_t>() != t->rank()) throw FormatError("checkpoint rank mismatch for " + name);
    for (auto d : t->shape())
      if (r.uint<std::uint64_t>() != d) throw FormatError("checkpoint shape mismatch for " + name);
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = static_cast<Real>(r.f32());
  }
  if (!r.done()) throw FormatError("checkpoint has trailing data");
  return m;
}

/// Writes through a temporary file and a rename.
template <class Real>
void save_checkpoint(const std::filesystem::path& path, const SavedModel<Real>& m) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    const std::string bytes = serialize_checkpoint(m);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("error writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class Real>
SavedModel<Real> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint<Real>(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Exclusive advisory lock on <dir>/.lock, held for the object's lifetime.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto p = dir / ".lock";
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + p.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw IoError("checkpoint directory " + dir.string() + " is in use by another process");
    }
  }
  ~DirectoryLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace nmt
