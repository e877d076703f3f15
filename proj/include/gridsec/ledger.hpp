#pragma once

// Hash-chained, signed, proof-of-work ledger of per-node state estimates.
//
// Canonical encoding (all integers 64-bit little-endian, reals IEEE-754
// binary64 little-endian):
//   vector  := u64 count, count x f64
//   payload := vector (the sender's estimate)
//   block   := u64 timestep, 32-byte prev_hash, u64 nonce,
//              u64 node_count, node_count x (u64 node_id, vector)
//              with node ids strictly ascending
//   file    := "GSLD", u16 version (=1), block*
// Signatures are Ed25519 over SHA-256(payload).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <sodium.h>

#include "gridsec/error.hpp"
#include "gridsec/model.hpp"
#include "gridsec/rng.hpp"

namespace gridsec {

using Bytes = std::vector<std::uint8_t>;
using Digest = std::array<std::uint8_t, crypto_hash_sha256_BYTES>;
using Signature = std::array<std::uint8_t, crypto_sign_BYTES>;
using PublicKey = std::array<std::uint8_t, crypto_sign_PUBLICKEYBYTES>;
using SecretKey = std::array<std::uint8_t, crypto_sign_SECRETKEYBYTES>;

inline constexpr std::uint16_t kLedgerFormatVersion = 1;
inline constexpr char kLedgerMagic[4] = {'G', 'S', 'L', 'D'};

inline void ensure_sodium() {
  static const bool ready = [] { return sodium_init() >= 0; }();
  if (!ready) throw std::runtime_error("libsodium initialization failed");
}

inline Digest sha256(std::span<const std::uint8_t> data) {
  ensure_sodium();
  Digest d{};
  crypto_hash_sha256(d.data(), data.data(), data.size());
  return d;
}

inline std::string to_hex(std::span<const std::uint8_t> data) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  s.reserve(data.size() * 2);
  for (auto b : data) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

inline int leading_zero_bits(const Digest& d) noexcept {
  int n = 0;
  for (auto b : d) {
    if (b == 0) {
      n += 8;
      continue;
    }
    return n + std::countl_zero(b);
  }
  return n;
}

class ByteWriter {
 public:
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void vector(const Vector& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    for (Index i = 0; i < v.size(); ++i) f64(v(i));
  }
  Bytes& bytes() noexcept { return out_; }
  Bytes take() noexcept { return std::move(out_); }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void raw(std::span<std::uint8_t> out) {
    need(out.size());
    std::memcpy(out.data(), in_.data() + pos_, out.size());
    pos_ += out.size();
  }
  Vector vector() {
    const std::uint64_t n = u64();
    if (n > remaining() / 8) throw Error(Errc::FormatError, "vector length exceeds remaining data");
    Vector v(static_cast<Index>(n));
    for (Index i = 0; i < v.size(); ++i) v(i) = f64();
    return v;
  }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw Error(Errc::FormatError, "unexpected end of data at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline Bytes serialize_payload(const Vector& estimate) {
  ByteWriter w;
  w.vector(estimate);
  return w.take();
}

inline Vector deserialize_payload(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Vector v = r.vector();
  if (r.remaining() != 0) throw Error(Errc::FormatError, "trailing bytes after payload");
  return v;
}

// ---- identities -----------------------------------------------------------

struct KeyPair {
  PublicKey public_key{};
  SecretKey secret_key{};
};

// Keys derived from the seeded key-generation stream, node by node.
inline std::vector<KeyPair> generate_keys(int node_count, std::uint64_t seed) {
  ensure_sodium();
  RandomStream rng(seed, Stream::KeyGeneration);
  std::vector<KeyPair> keys(static_cast<std::size_t>(node_count));
  for (auto& kp : keys) {
    std::array<std::uint8_t, crypto_sign_SEEDBYTES> s{};
    for (std::size_t i = 0; i < s.size(); i += 8) {
      const std::uint64_t v = rng.next_u64();
      for (std::size_t b = 0; b < 8; ++b) s[i + b] = static_cast<std::uint8_t>(v >> (8 * b));
    }
    crypto_sign_seed_keypair(kp.public_key.data(), kp.secret_key.data(), s.data());
    sodium_memzero(s.data(), s.size());
  }
  return keys;
}

// Public verification keys of the permissioned network; immutable once built.
class KeyRegistry {
 public:
  KeyRegistry() = default;
  explicit KeyRegistry(const std::vector<KeyPair>& keys) {
    for (const auto& k : keys) keys_.push_back(k.public_key);
  }
  int size() const noexcept { return static_cast<int>(keys_.size()); }
  const PublicKey& key(int node) const {
    if (node < 0 || node >= size()) throw Error(Errc::UnknownSender, "node " + std::to_string(node + 1) + " is not registered");
    return keys_[std::size_t(node)];
  }

 private:
  std::vector<PublicKey> keys_;
};

struct DataPackage {
  int sender_id = 0;
  std::int64_t timestep = 0;
  Bytes payload;
  Signature signature{};
};

inline DataPackage sign_package(int sender_id, const SecretKey& secret, std::int64_t timestep, Bytes payload) {
  ensure_sodium();
  DataPackage pkg;
  pkg.sender_id = sender_id;
  pkg.timestep = timestep;
  pkg.payload = std::move(payload);
  const Digest digest = sha256(pkg.payload);
  crypto_sign_detached(pkg.signature.data(), nullptr, digest.data(), digest.size(), secret.data());
  return pkg;
}

inline bool verify_package(const KeyRegistry& registry, const DataPackage& pkg) {
  const PublicKey& pk = registry.key(pkg.sender_id);
  const Digest digest = sha256(pkg.payload);
  return crypto_sign_verify_detached(pkg.signature.data(), digest.data(), digest.size(), pk.data()) == 0;
}

// ---- blocks ---------------------------------------------------------------

struct NodeEstimate {
  std::uint64_t node_id = 0;  // full width so that every stored bit is hashed back
  Vector estimate;
};

struct Block {
  std::int64_t timestep = 0;
  Digest prev_hash{};
  std::uint64_t nonce = 0;
  std::vector<NodeEstimate> estimates;  // ascending node_id
};

inline void write_block(ByteWriter& w, const Block& b) {
  w.u64(static_cast<std::uint64_t>(b.timestep));
  w.raw(b.prev_hash);
  w.u64(b.nonce);
  w.u64(b.estimates.size());
  for (const auto& e : b.estimates) {
    w.u64(e.node_id);
    w.vector(e.estimate);
  }
}

inline Bytes serialize_block(const Block& b) {
  ByteWriter w;
  write_block(w, b);
  return w.take();
}

inline Block read_block(ByteReader& r) {
  Block b;
  b.timestep = static_cast<std::int64_t>(r.u64());
  r.raw(b.prev_hash);
  b.nonce = r.u64();
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 16) throw Error(Errc::FormatError, "estimate count exceeds remaining data");
  for (std::uint64_t i = 0; i < n; ++i) {
    NodeEstimate e;
    e.node_id = r.u64();
    e.estimate = r.vector();
    b.estimates.push_back(std::move(e));
  }
  return b;
}

inline Digest block_hash(const Block& b) { return sha256(serialize_block(b)); }

inline bool meets_difficulty(const Digest& d, int difficulty) noexcept { return leading_zero_bits(d) >= difficulty; }

struct MiningResult {
  std::uint64_t nonce = 0;
  int winner = -1;                      // node id of the first solver
  std::uint64_t hash_evaluations = 0;   // across all miners
};

// Smallest nonce >= start meeting the difficulty.
inline std::uint64_t mine(Block block, int difficulty, std::uint64_t start = 0,
                          std::uint64_t* evaluations = nullptr) {
  if (difficulty < 0 || difficulty > 64) throw Error(Errc::OutOfDomain, "difficulty must be in [0, 64]");
  ByteWriter w;
  block.nonce = start;
  write_block(w, block);
  Bytes& bytes = w.bytes();
  const std::size_t nonce_at = 8 + sizeof(Digest);
  for (std::uint64_t nonce = start;; ++nonce) {
    for (int i = 0; i < 8; ++i) bytes[nonce_at + std::size_t(i)] = static_cast<std::uint8_t>(nonce >> (8 * i));
    if (evaluations) ++*evaluations;
    if (meets_difficulty(sha256(bytes), difficulty)) return nonce;
  }
}

inline constexpr int kMinerOffsetShift = 40;

// Miners search disjoint ranges starting at position << 40; the first solver
// is the one needing the fewest iterations (ties go to the earlier position).
inline MiningResult mine_competitive(const Block& block, int difficulty, const std::vector<int>& miners) {
  if (miners.empty()) throw Error(Errc::OutOfDomain, "no miners assigned");
  if (difficulty < 0 || difficulty > 64) throw Error(Errc::OutOfDomain, "difficulty must be in [0, 64]");
  ByteWriter w;
  write_block(w, block);
  Bytes bytes = w.take();
  const std::size_t nonce_at = 8 + sizeof(Digest);
  MiningResult out;
  for (std::uint64_t k = 0;; ++k) {
    for (std::size_t m = 0; m < miners.size(); ++m) {
      const std::uint64_t nonce = (static_cast<std::uint64_t>(m) << kMinerOffsetShift) + k;
      for (int i = 0; i < 8; ++i) bytes[nonce_at + std::size_t(i)] = static_cast<std::uint8_t>(nonce >> (8 * i));
      ++out.hash_evaluations;
      if (meets_difficulty(sha256(bytes), difficulty)) {
        out.nonce = nonce;
        out.winner = miners[m];
        return out;
      }
    }
  }
}

// Distinct miner ids drawn from the assignment stream, in draw order.
inline std::vector<int> assign_miners(RandomStream& rng, int node_count, int miners_per_block) {
  miners_per_block = std::clamp(miners_per_block, 1, node_count);
  std::vector<int> pool(static_cast<std::size_t>(node_count));
  for (int i = 0; i < node_count; ++i) pool[std::size_t(i)] = i;
  std::vector<int> out;
  for (int m = 0; m < miners_per_block; ++m) {
    const auto pick = static_cast<std::size_t>(rng.below(pool.size()));
    out.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

// ---- ledger ---------------------------------------------------------------

struct ChainViolation {
  std::size_t index = 0;  // position within the retained blocks
  std::int64_t timestep = 0;
  std::string kind;       // linkage | pow | continuity | ordering | anchor
  std::string detail;
};

struct ChainReport {
  std::vector<ChainViolation> violations;
  std::size_t blocks_checked = 0;
  bool clean() const noexcept { return violations.empty(); }
  const ChainViolation* first() const noexcept { return violations.empty() ? nullptr : &violations.front(); }
};

// Retains at most `capacity` consecutive blocks. Two anchors close the chain
// at both ends: the prev_hash expected for the oldest retained block and the
// hash of the newest one.
class Ledger {
 public:
  Ledger(std::size_t capacity, int difficulty) : capacity_(capacity), difficulty_(difficulty) {
    if (capacity == 0) throw Error(Errc::OutOfDomain, "ledger capacity must be positive");
    if (difficulty < 0 || difficulty > 64) throw Error(Errc::OutOfDomain, "difficulty must be in [0, 64]");
  }

  std::size_t capacity() const noexcept { return capacity_; }
  int difficulty() const noexcept { return difficulty_; }
  std::size_t size() const noexcept { return blocks_.size(); }
  bool empty() const noexcept { return blocks_.empty(); }
  const std::deque<Block>& blocks() const noexcept { return blocks_; }
  std::deque<Block>& mutable_blocks() noexcept { return blocks_; }
  const Block& back() const { return blocks_.back(); }
  const Block& front() const { return blocks_.front(); }
  const Digest& base_anchor() const noexcept { return base_anchor_; }
  const std::optional<Digest>& tip_anchor() const noexcept { return tip_anchor_; }

  Digest tip_hash() const { return blocks_.empty() ? Digest{} : block_hash(blocks_.back()); }
  std::int64_t next_timestep() const noexcept { return blocks_.empty() ? 0 : blocks_.back().timestep + 1; }

  // Appends a block already validated by the network.
  void append(Block b) {
    const Digest h = block_hash(b);
    blocks_.push_back(std::move(b));
    tip_anchor_ = h;
    while (blocks_.size() > capacity_) {
      base_anchor_ = block_hash(blocks_.front());
      blocks_.pop_front();
    }
  }

  const Block* find(std::int64_t timestep) const noexcept {
    if (blocks_.empty()) return nullptr;
    const std::int64_t off = timestep - blocks_.front().timestep;
    if (off < 0 || off >= static_cast<std::int64_t>(blocks_.size())) return nullptr;
    const Block& b = blocks_[std::size_t(off)];
    return b.timestep == timestep ? &b : nullptr;
  }

  // Rebuilds a ledger from stored blocks; anchors are taken from the data.
  static Ledger from_blocks(std::deque<Block> blocks, std::size_t capacity, int difficulty) {
    Ledger l(std::max<std::size_t>(capacity, std::max<std::size_t>(blocks.size(), 1)), difficulty);
    if (!blocks.empty()) {
      l.base_anchor_ = blocks.front().prev_hash;
      l.tip_anchor_ = block_hash(blocks.back());
    }
    l.blocks_ = std::move(blocks);
    return l;
  }

 private:
  std::size_t capacity_;
  int difficulty_;
  std::deque<Block> blocks_;
  Digest base_anchor_{};
  std::optional<Digest> tip_anchor_;
};

inline Vector get_estimate(const Ledger& ledger, std::int64_t timestep, int node_id) {
  const Block* b = ledger.find(timestep);
  if (!b)
    throw Error(Errc::MissingBlock, "ledger holds no block for t=" + std::to_string(timestep));
  for (const auto& e : b->estimates)
    if (node_id >= 0 && e.node_id == static_cast<std::uint64_t>(node_id)) return e.estimate;
  throw Error(Errc::MissingBlock, "block t=" + std::to_string(timestep) + " has no estimate for node " +
                                      std::to_string(node_id + 1));
}

inline ChainReport verify_chain(const Ledger& ledger) {
  ChainReport rep;
  const auto& blocks = ledger.blocks();
  rep.blocks_checked = blocks.size();
  Digest prev{};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const Block& b = blocks[i];
    auto report = [&](const char* kind, std::string detail) {
      rep.violations.push_back({i, b.timestep, kind, std::move(detail)});
    };
    const Digest h = block_hash(b);
    if (i == 0) {
      if (b.prev_hash != ledger.base_anchor()) report("linkage", "prev_hash does not match the retained anchor");
      if (b.timestep == 0 && b.prev_hash != Digest{}) report("linkage", "genesis prev_hash is not zero");
    } else {
      if (b.prev_hash != prev) report("linkage", "prev_hash does not match the preceding block");
      if (b.timestep != blocks[i - 1].timestep + 1) report("continuity", "timestep is not consecutive");
    }
    if (b.timestep < 0) report("continuity", "negative timestep");
    if (!meets_difficulty(h, ledger.difficulty())) report("pow", "hash misses the difficulty target");
    for (std::size_t k = 1; k < b.estimates.size(); ++k)
      if (b.estimates[k].node_id <= b.estimates[k - 1].node_id) report("ordering", "node ids not ascending");
    if (i + 1 == blocks.size() && ledger.tip_anchor() && h != *ledger.tip_anchor())
      report("anchor", "newest block hash does not match the tip anchor");
    prev = h;
  }
  return rep;
}

// ---- commit protocol ------------------------------------------------------

class PackageRejected : public Error {
 public:
  explicit PackageRejected(std::vector<int> senders)
      : Error(Errc::PackageRejected, describe(senders)), senders_(std::move(senders)) {}
  const std::vector<int>& senders() const noexcept { return senders_; }

 private:
  static std::string describe(const std::vector<int>& s) {
    std::string out = "packages rejected from node(s)";
    for (int id : s) out += " " + std::to_string(id + 1);
    return out;
  }
  std::vector<int> senders_;
};

struct CommitOptions {
  int miners_per_block = 2;
  // Validators marked false reject everything they are asked to check.
  std::vector<bool> honest_validators;
};

struct CommitResult {
  MiningResult mining;
  std::vector<int> miners;
  Digest hash{};
};

inline bool validator_is_honest(const CommitOptions& opt, int node) {
  return opt.honest_validators.empty() || opt.honest_validators.at(std::size_t(node));
}

// One package per node for timestep t. A package stands if a strict majority
// of the other nodes verify it; the mined block stands if a strict majority
// of all nodes verify its puzzle and linkage.
inline CommitResult propose_and_commit(Ledger& ledger, const std::vector<DataPackage>& packages,
                                       const KeyRegistry& registry, RandomStream& miner_rng,
                                       const CommitOptions& options = {}) {
  const int L = registry.size();
  if (static_cast<int>(packages.size()) != L)
    throw Error(Errc::DimensionMismatch, "expected one package per node");
  const std::int64_t t = ledger.next_timestep();

  std::vector<int> rejected;
  std::vector<NodeEstimate> estimates;
  for (int s = 0; s < L; ++s) {
    const DataPackage& pkg = packages[std::size_t(s)];
    if (pkg.sender_id != s) throw Error(Errc::DimensionMismatch, "packages must be ordered by sender id");
    int yes = 0;
    const bool valid = pkg.timestep == t && verify_package(registry, pkg);
    for (int v = 0; v < L; ++v)
      if (v != s && validator_is_honest(options, v) && valid) ++yes;
    if (2 * yes <= L - 1) {
      rejected.push_back(s);
      continue;
    }
    estimates.push_back({static_cast<std::uint64_t>(s), deserialize_payload(pkg.payload)});
  }
  if (!rejected.empty()) throw PackageRejected(rejected);

  Block b;
  b.timestep = t;
  b.prev_hash = ledger.empty() ? Digest{} : ledger.tip_hash();
  b.estimates = std::move(estimates);

  CommitResult out;
  out.miners = assign_miners(miner_rng, L, options.miners_per_block);
  out.mining = mine_competitive(b, ledger.difficulty(), out.miners);
  b.nonce = out.mining.nonce;
  out.hash = block_hash(b);

  const bool puzzle_ok = meets_difficulty(out.hash, ledger.difficulty()) &&
                         b.prev_hash == (ledger.empty() ? Digest{} : ledger.tip_hash());
  int yes = 0;
  for (int v = 0; v < L; ++v)
    if (validator_is_honest(options, v) && puzzle_ok) ++yes;
  if (2 * yes <= L) throw Error(Errc::PuzzleRejected, "block t=" + std::to_string(t) + " not confirmed by a majority");
  ledger.append(std::move(b));
  return out;
}

// ---- file format ----------------------------------------------------------

inline Bytes export_ledger(const Ledger& ledger) {
  ByteWriter w;
  w.raw(std::span(reinterpret_cast<const std::uint8_t*>(kLedgerMagic), 4));
  w.u16(kLedgerFormatVersion);
  for (const auto& b : ledger.blocks()) write_block(w, b);
  return w.take();
}

inline Ledger import_ledger(std::span<const std::uint8_t> bytes, int difficulty, std::size_t capacity = 0) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kLedgerMagic, 4) != 0)
    throw Error(Errc::FormatError, "missing GSLD magic");
  ByteReader r(bytes.subspan(4));
  const std::uint16_t version = r.u16();
  if (version != kLedgerFormatVersion)
    throw Error(Errc::FormatError, "unsupported ledger format version " + std::to_string(version));
  std::deque<Block> blocks;
  while (r.remaining() > 0) blocks.push_back(read_block(r));
  return Ledger::from_blocks(std::move(blocks), capacity, difficulty);
}

}  // namespace gridsec
