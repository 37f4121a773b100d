#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "quiverml/quiver.hpp"

namespace quiverml {

using KeySet = std::unordered_set<CanonicalKey, KeyHash>;

struct ExploreOptions {
  std::size_t memory_cap_bytes = std::size_t{8} << 30;
  // Entries are tracked in 128 bits during exploration; a branch whose next
  // entry would not even fit there is dropped and the result flagged.
  bool record_paths = false;
};

struct ExplorationResult {
  // First-seen BFS depth per canonical key. Keys whose entries exceed int64
  // are tracked internally for dedup but reported only in wide_key_count.
  std::unordered_map<CanonicalKey, int, KeyHash> frontier_depths;
  std::size_t wide_key_count = 0;
  bool truncated = false;      // depth cap hit while new keys were still appearing
  bool weight_pruned = false;  // some branch dropped on 128-bit overflow
  std::size_t visited_count() const { return frontier_depths.size() + wide_key_count; }
  bool contains(const CanonicalKey& k) const { return frontier_depths.count(k) > 0; }
};

// Breadth-first expansion of the mutation class, mutating at every vertex.
// With dedup, expansion is over canonical keys so each isomorphism class is
// expanded once and depth is the minimal mutation distance; without dedup
// every generated quiver is expanded (exponential; small depths only).
// Throws ResourceError when the memory cap is exceeded.
ExplorationResult explore_class(const ExchangeMatrix& seed, int max_depth, bool dedup,
                                const ExploreOptions& opts = {});

// Certificate attached to every classified mutation class.
struct Witness {
  enum class Kind { Acyclic, Rank3Subquiver, BoxQuiver, DreadedTorus, KnownKey, Closure };
  Kind kind = Kind::Acyclic;
  std::vector<int> sequence;        // mutations from the class representative
  std::array<int, 3> vertices{};    // Rank3Subquiver: the vertex triple
  Rank3Triple triple{};             // Rank3Subquiver: its multiplicities
  CanonicalKey matched_key;         // KnownKey: the NMA-ball key that matched
  int closure_depth = 0;            // Closure: depth at which the graph closed
  std::size_t class_size = 0;       // Closure: number of isomorphism classes
};

const char* to_string(Witness::Kind k);
Witness::Kind witness_kind_from_string(const std::string& s);

struct ClassRecord {
  Verdict verdict = Verdict::Undetermined;
  Witness witness;
};

struct ProofLedger {
  std::uint64_t total_raw = 0;
  std::uint64_t total_connected = 0;
  std::uint64_t total_classes = 0;
  std::uint64_t acyclic_count = 0;
  std::uint64_t markov_subquiver_count = 0;
  std::uint64_t special_count = 0;           // box quiver + dreaded torus
  std::uint64_t propagated_nma_count = 0;
  std::uint64_t resolved_by_search_count = 0;
  std::uint64_t final_ma = 0;
  std::uint64_t final_nma = 0;
  std::map<CanonicalKey, ClassRecord> classes;  // ordered: serialization is stable
  std::vector<CanonicalKey> undetermined;
  bool complete() const { return undetermined.empty(); }
  KeySet nma_keys() const;
};

// True iff q is an oriented 4-cycle with alternating weights a,b,a,b and
// a,b >= 2 (non-mutation-acyclic with all proper subquivers mutation-acyclic).
bool is_box_quiver(const ExchangeMatrix& q);

// True iff q has an NMA rank-3 subquiver, is a box quiver, is isomorphic to
// the dreaded torus, or its canonical key is in `known`.
bool detect_known_nma(const ExchangeMatrix& q, const KeySet& known,
                      Witness* witness = nullptr);

struct EnumerationResult {
  std::uint64_t raw_count = 0;
  std::vector<ExchangeMatrix> connected;
  std::vector<CanonicalKey> classes;  // sorted ascending
};

// All rank-4 exchange matrices with upper-triangle entries in {-2..2}.
EnumerationResult enumerate_weight2_rank4();

struct ProveOptions {
  int max_nma_seed_depth = 8;
  int max_resolve_depth = 12;
  int threads = 1;
  std::size_t memory_cap_bytes = std::size_t{8} << 30;
  // Re-run unresolved classes against the balls of freshly classified NMA
  // classes until a fixpoint; deterministic (pass-synchronous).
  bool accumulate_nma_balls = true;
  std::function<void(const std::string&)> progress;  // optional
};

// The staged decision pipeline for rank-4 quivers with weights <= 2.
ProofLedger prove_rank4_weight2(const ProveOptions& opts = {});

// Replays every witness in the ledger. Returns false (with a reason) on the
// first witness that does not check out.
bool verify_ledger(const ProofLedger& ledger, std::string* why = nullptr);

struct DecideResult {
  Verdict verdict = Verdict::Undetermined;
  Witness witness;
  bool from_ledger = false;
};

// Ledger lookup for rank-4 weight-<=2 quivers; bounded search plus
// detect_known_nma against the ledger's NMA classes otherwise.
DecideResult decide(const ExchangeMatrix& q, const ProofLedger& ledger,
                    int search_depth = 8, const ExploreOptions& opts = {});

// JSON-lines serialization: one record per class {key, verdict, witness}.
void save_ledger(const ProofLedger& ledger, const std::string& path);
ProofLedger load_ledger(const std::string& path);

}  // namespace quiverml
