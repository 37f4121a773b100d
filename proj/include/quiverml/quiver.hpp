#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace quiverml {

// Thrown when a mutation or constant would leave the int64 range.
struct WeightOverflowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a configured memory/size budget is exceeded.
struct ResourceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Verdict { MA, NMA, Undetermined };

const char* to_string(Verdict v);
Verdict verdict_from_string(const std::string& s);

// Arrow multiplicities of a directed 3-cycle.
struct Rank3Triple {
  std::int64_t x = 0, y = 0, z = 0;
};

// C(x,y,z) = x^2 + y^2 + z^2 - xyz. Throws WeightOverflowError if the value
// does not fit in int64.
std::int64_t markov_constant(const Rank3Triple& t);

// Rank-3 mutation-acyclicity from the Markov constant. Exact for all
// non-negative int64 triples (internally evaluated in 128-bit).
Verdict classify_rank3_cycle(const Rank3Triple& t);

// Lexicographically minimal row-major flattening over simultaneous
// row/column permutations. Equal keys <=> isomorphic quivers.
using CanonicalKey = std::vector<std::int64_t>;

// Skew-symmetric integer exchange matrix of a quiver.
// b(i,j) > 0 means b(i,j) arrows i -> j.
class ExchangeMatrix {
 public:
  explicit ExchangeMatrix(int n);

  // Validates shape and skew-symmetry.
  static ExchangeMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows);
  // Rank-4 from upper-triangle entries (b01, b02, b03, b12, b13, b23).
  static ExchangeMatrix from_upper6(const std::array<std::int64_t, 6>& e);

  int size() const { return n_; }
  std::int64_t operator()(int i, int j) const { return b_[static_cast<std::size_t>(i) * n_ + j]; }

  // Sets b[i][j] = w and b[j][i] = -w. Requires i != j.
  void set_arrow(int i, int j, std::int64_t w);

  std::array<std::int64_t, 6> upper6() const;          // requires n == 4
  const std::vector<std::int64_t>& flat() const { return b_; }
  std::int64_t max_abs_entry() const;

  bool operator==(const ExchangeMatrix&) const = default;

 private:
  int n_;
  std::vector<std::int64_t> b_;  // row-major
};

// mu_k. Pure; throws std::out_of_range for bad k and WeightOverflowError if
// an entry would overflow int64.
ExchangeMatrix mutate(const ExchangeMatrix& q, int k);

// True iff the digraph with arcs {i -> j : b(i,j) > 0} has no directed cycle.
bool is_acyclic(const ExchangeMatrix& q);

// True iff the underlying undirected graph (edges where b != 0) is connected.
bool is_weakly_connected(const ExchangeMatrix& q);

// Restriction to the given vertices, order-preserving. The subset must be
// non-empty, in-range, and strictly increasing.
ExchangeMatrix full_subquiver(const ExchangeMatrix& q, const std::vector<int>& vertices);

// If the rank-3 quiver is a directed 3-cycle, reports its multiplicities.
bool is_directed_3cycle(const ExchangeMatrix& q3, Rank3Triple* triple = nullptr);

// True iff some 3-vertex full subquiver is a directed cycle whose triple
// classifies NMA.
bool has_nma_rank3_subquiver(const ExchangeMatrix& q);

inline constexpr int kMaxCanonicalRank = 8;

CanonicalKey canonical_form(const ExchangeMatrix& q);
ExchangeMatrix matrix_from_key(const CanonicalKey& key);
bool are_isomorphic(const ExchangeMatrix& a, const ExchangeMatrix& b);

enum class EncodeMode { Flat16, Upper6 };

const char* to_string(EncodeMode m);
EncodeMode encode_mode_from_string(const std::string& s);

// Rank-4 vector encodings. Flat16 = row-major flattening; Upper6 = upper
// triangle (e0..e5).
std::vector<std::int64_t> encode(const ExchangeMatrix& q, EncodeMode mode);
ExchangeMatrix decode(const std::vector<std::int64_t>& v, EncodeMode mode);

// Named quivers used throughout.
ExchangeMatrix markov_quiver();   // rank-3 cycle, all weights 2
ExchangeMatrix dreaded_torus();   // the rank-4 quiver fixed (up to iso) by every mutation

// JSON form {"n": 4, "b": [[...], ...]}; skew-symmetry validated on load.
ExchangeMatrix quiver_from_json(const nlohmann::json& j);
nlohmann::json quiver_to_json(const ExchangeMatrix& q);
ExchangeMatrix load_quiver(const std::string& path);

struct KeyHash {
  std::size_t operator()(const CanonicalKey& k) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::int64_t v : k) {
      h ^= static_cast<std::uint64_t>(v);
      h *= 1099511628211ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace quiverml
