#include "quiverml/quiver.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

namespace quiverml {

namespace {

constexpr std::int64_t kInt64Max = std::numeric_limits<std::int64_t>::max();
constexpr std::int64_t kInt64Min = std::numeric_limits<std::int64_t>::min();

std::int64_t checked_narrow(__int128 v, const char* what) {
  if (v > static_cast<__int128>(kInt64Max) || v < static_cast<__int128>(kInt64Min))
    throw WeightOverflowError(std::string(what) + ": value exceeds int64 range");
  return static_cast<std::int64_t>(v);
}

}  // namespace

const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::MA: return "MA";
    case Verdict::NMA: return "NMA";
    default: return "Undetermined";
  }
}

Verdict verdict_from_string(const std::string& s) {
  if (s == "MA") return Verdict::MA;
  if (s == "NMA") return Verdict::NMA;
  if (s == "Undetermined") return Verdict::Undetermined;
  throw std::invalid_argument("unknown verdict: " + s);
}

std::int64_t markov_constant(const Rank3Triple& t) {
  __int128 c = static_cast<__int128>(t.x) * t.x + static_cast<__int128>(t.y) * t.y +
               static_cast<__int128>(t.z) * t.z;
  __int128 xy = static_cast<__int128>(t.x) * t.y;
  // x,y,z are multiplicities (non-negative), so xy*z only shrinks c's sign
  // headroom; detect the rare 128-bit overflow explicitly.
  if (t.z != 0 && (xy > (static_cast<__int128>(1) << 126) / t.z))
    throw WeightOverflowError("markov_constant: xyz exceeds 128-bit range");
  c -= xy * t.z;
  return checked_narrow(c, "markov_constant");
}

Verdict classify_rank3_cycle(const Rank3Triple& t) {
  const std::int64_t x = t.x, y = t.y, z = t.z;
  if (x < 0 || y < 0 || z < 0) throw std::invalid_argument("multiplicities must be >= 0");
  const std::int64_t mn = std::min({x, y, z});

  // C compared against thresholds in 128-bit so any int64 triple is exact.
  const unsigned __int128 ux = static_cast<unsigned __int128>(x);
  const unsigned __int128 uy = static_cast<unsigned __int128>(y);
  const unsigned __int128 uz = static_cast<unsigned __int128>(z);
  const unsigned __int128 squares = ux * ux + uy * uy + uz * uz;
  bool product_huge = false;  // xyz beyond u128: C is hugely negative
  unsigned __int128 product = 0;
  if (x == 0 || y == 0 || z == 0) {
    product = 0;
  } else {
    unsigned __int128 xy = ux * uy;
    if (xy > ~static_cast<unsigned __int128>(0) / uz)
      product_huge = true;
    else
      product = xy * uz;
  }

  const bool c_negative = product_huge || product > squares;
  const bool c_at_most_4 = c_negative || squares - product <= 4;
  const bool c_greater_4 = !c_at_most_4;

  if (c_greater_4 || mn < 2) return Verdict::MA;
  // Exceptional list (sorted x >= y >= z): all members have min < 2, so this
  // is already covered above; kept for fidelity to the statement.
  std::array<std::int64_t, 3> s{x, y, z};
  std::sort(s.begin(), s.end(), std::greater<>());
  static constexpr std::array<std::array<std::int64_t, 3>, 6> kExceptional{
      {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {1, 1, 1}, {2, 0, 0}, {2, 1, 1}}};
  for (const auto& e : kExceptional)
    if (s[0] == e[0] && s[1] == e[1] && s[2] == e[2]) return Verdict::MA;

  if (c_negative || (c_at_most_4 && mn >= 2)) return Verdict::NMA;
  return Verdict::Undetermined;
}

ExchangeMatrix::ExchangeMatrix(int n) : n_(n) {
  if (n <= 0) throw std::invalid_argument("vertex count must be positive");
  b_.assign(static_cast<std::size_t>(n) * n, 0);
}

ExchangeMatrix ExchangeMatrix::from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
  const int n = static_cast<int>(rows.size());
  ExchangeMatrix q(n);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(rows[i].size()) != n)
      throw std::invalid_argument("exchange matrix must be square");
    for (int j = 0; j < n; ++j) q.b_[static_cast<std::size_t>(i) * n + j] = rows[i][j];
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j)
      if (q(i, j) != -q(j, i))
        throw std::invalid_argument("exchange matrix must be skew-symmetric");
  return q;
}

ExchangeMatrix ExchangeMatrix::from_upper6(const std::array<std::int64_t, 6>& e) {
  ExchangeMatrix q(4);
  q.set_arrow(0, 1, e[0]);
  q.set_arrow(0, 2, e[1]);
  q.set_arrow(0, 3, e[2]);
  q.set_arrow(1, 2, e[3]);
  q.set_arrow(1, 3, e[4]);
  q.set_arrow(2, 3, e[5]);
  return q;
}

void ExchangeMatrix::set_arrow(int i, int j, std::int64_t w) {
  if (i == j) throw std::invalid_argument("no loops: i != j required");
  b_[static_cast<std::size_t>(i) * n_ + j] = w;
  b_[static_cast<std::size_t>(j) * n_ + i] = -w;
}

std::array<std::int64_t, 6> ExchangeMatrix::upper6() const {
  if (n_ != 4) throw std::invalid_argument("upper6 requires a rank-4 quiver");
  return {(*this)(0, 1), (*this)(0, 2), (*this)(0, 3),
          (*this)(1, 2), (*this)(1, 3), (*this)(2, 3)};
}

std::int64_t ExchangeMatrix::max_abs_entry() const {
  std::int64_t m = 0;
  for (std::int64_t v : b_) m = std::max(m, std::abs(v));
  return m;
}

ExchangeMatrix mutate(const ExchangeMatrix& q, int k) {
  const int n = q.size();
  if (k < 0 || k >= n) throw std::out_of_range("mutation vertex out of range");
  ExchangeMatrix r(n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      std::int64_t v;
      if (i == k || j == k) {
        v = -q(i, j);
      } else {
        // b' = b_ij + sign(b_ik) * max(0, b_ik * b_kj)
        __int128 acc = q(i, j);
        const std::int64_t bik = q(i, k), bkj = q(k, j);
        if (bik > 0 && bkj > 0)
          acc += static_cast<__int128>(bik) * bkj;
        else if (bik < 0 && bkj < 0)
          acc -= static_cast<__int128>(bik) * bkj;
        v = checked_narrow(acc, "mutate");
      }
      r.set_arrow(i, j, v);
    }
  }
  return r;
}

bool is_acyclic(const ExchangeMatrix& q) {
  const int n = q.size();
  std::vector<int> indeg(n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (q(i, j) > 0) ++indeg[j];
  std::vector<int> stack;
  for (int i = 0; i < n; ++i)
    if (indeg[i] == 0) stack.push_back(i);
  int removed = 0;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    ++removed;
    for (int j = 0; j < n; ++j)
      if (q(u, j) > 0 && --indeg[j] == 0) stack.push_back(j);
  }
  return removed == n;
}

bool is_weakly_connected(const ExchangeMatrix& q) {
  const int n = q.size();
  std::vector<char> seen(n, 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (int j = 0; j < n; ++j)
      if (q(u, j) != 0 && !seen[j]) {
        seen[j] = 1;
        ++count;
        stack.push_back(j);
      }
  }
  return count == n;
}

ExchangeMatrix full_subquiver(const ExchangeMatrix& q, const std::vector<int>& vertices) {
  if (vertices.empty()) throw std::invalid_argument("subquiver vertex set must be non-empty");
  for (std::size_t t = 0; t < vertices.size(); ++t) {
    if (vertices[t] < 0 || vertices[t] >= q.size())
      throw std::out_of_range("subquiver vertex out of range");
    if (t > 0 && vertices[t] <= vertices[t - 1])
      throw std::invalid_argument("subquiver vertices must be strictly increasing");
  }
  ExchangeMatrix r(static_cast<int>(vertices.size()));
  for (std::size_t i = 0; i < vertices.size(); ++i)
    for (std::size_t j = i + 1; j < vertices.size(); ++j)
      r.set_arrow(static_cast<int>(i), static_cast<int>(j), q(vertices[i], vertices[j]));
  return r;
}

bool is_directed_3cycle(const ExchangeMatrix& q3, Rank3Triple* triple) {
  if (q3.size() != 3) throw std::invalid_argument("is_directed_3cycle requires rank 3");
  if (q3(0, 1) == 0 || q3(0, 2) == 0 || q3(1, 2) == 0) return false;
  // All three pairs connected: a 3-vertex quiver is a directed cycle iff it
  // is not acyclic.
  if (is_acyclic(q3)) return false;
  if (triple)
    *triple = {std::abs(q3(0, 1)), std::abs(q3(1, 2)), std::abs(q3(0, 2))};
  return true;
}

bool has_nma_rank3_subquiver(const ExchangeMatrix& q) {
  const int n = q.size();
  if (n < 3) return false;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      for (int c = b + 1; c < n; ++c) {
        ExchangeMatrix sub = full_subquiver(q, {a, b, c});
        Rank3Triple t;
        if (is_directed_3cycle(sub, &t) && classify_rank3_cycle(t) == Verdict::NMA)
          return true;
      }
  return false;
}

CanonicalKey canonical_form(const ExchangeMatrix& q) {
  const int n = q.size();
  if (n > kMaxCanonicalRank)
    throw std::invalid_argument("canonical_form: rank exceeds configured bound");
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  CanonicalKey best = q.flat();
  std::vector<std::int64_t> cand(best.size());
  while (std::next_permutation(perm.begin(), perm.end())) {
    // Lazy lexicographic compare: abandon as soon as this permutation is worse.
    int cmp = 0;
    std::size_t idx = 0;
    for (int i = 0; i < n && cmp <= 0; ++i) {
      for (int j = 0; j < n; ++j, ++idx) {
        std::int64_t v = q(perm[i], perm[j]);
        cand[idx] = v;
        if (cmp == 0) {
          if (v < best[idx]) cmp = -1;
          else if (v > best[idx]) { cmp = 1; break; }
        }
      }
    }
    if (cmp < 0) best = cand;  // cand is fully filled: we only break when worse
  }
  return best;
}

ExchangeMatrix matrix_from_key(const CanonicalKey& key) {
  int n = 0;
  while (static_cast<std::size_t>(n) * n < key.size()) ++n;
  if (static_cast<std::size_t>(n) * n != key.size())
    throw std::invalid_argument("key length is not a perfect square");
  std::vector<std::vector<std::int64_t>> rows(n, std::vector<std::int64_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) rows[i][j] = key[static_cast<std::size_t>(i) * n + j];
  return ExchangeMatrix::from_rows(rows);
}

bool are_isomorphic(const ExchangeMatrix& a, const ExchangeMatrix& b) {
  if (a.size() != b.size()) throw std::invalid_argument("are_isomorphic: size mismatch");
  return canonical_form(a) == canonical_form(b);
}

const char* to_string(EncodeMode m) { return m == EncodeMode::Flat16 ? "flat16" : "upper6"; }

EncodeMode encode_mode_from_string(const std::string& s) {
  if (s == "flat16") return EncodeMode::Flat16;
  if (s == "upper6") return EncodeMode::Upper6;
  throw std::invalid_argument("unknown encoding: " + s);
}

std::vector<std::int64_t> encode(const ExchangeMatrix& q, EncodeMode mode) {
  if (q.size() != 4) throw std::invalid_argument("encode requires a rank-4 quiver");
  if (mode == EncodeMode::Flat16) return q.flat();
  auto e = q.upper6();
  return {e.begin(), e.end()};
}

ExchangeMatrix decode(const std::vector<std::int64_t>& v, EncodeMode mode) {
  if (mode == EncodeMode::Upper6) {
    if (v.size() != 6) throw std::invalid_argument("upper6 vector must have 6 entries");
    return ExchangeMatrix::from_upper6({v[0], v[1], v[2], v[3], v[4], v[5]});
  }
  if (v.size() != 16) throw std::invalid_argument("flat16 vector must have 16 entries");
  std::vector<std::vector<std::int64_t>> rows(4, std::vector<std::int64_t>(4));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) rows[i][j] = v[static_cast<std::size_t>(i) * 4 + j];
  return ExchangeMatrix::from_rows(rows);
}

ExchangeMatrix markov_quiver() {
  ExchangeMatrix q(3);
  q.set_arrow(0, 1, 2);
  q.set_arrow(1, 2, 2);
  q.set_arrow(2, 0, 2);
  return q;
}

ExchangeMatrix dreaded_torus() {
  return ExchangeMatrix::from_upper6({1, 1, -1, -1, 2, -1});
}

ExchangeMatrix quiver_from_json(const nlohmann::json& j) {
  if (!j.contains("n") || !j.contains("b"))
    throw std::invalid_argument("quiver JSON requires fields \"n\" and \"b\"");
  const int n = j.at("n").get<int>();
  auto rows = j.at("b").get<std::vector<std::vector<std::int64_t>>>();
  if (static_cast<int>(rows.size()) != n)
    throw std::invalid_argument("quiver JSON: \"b\" has wrong row count");
  return ExchangeMatrix::from_rows(rows);
}

nlohmann::json quiver_to_json(const ExchangeMatrix& q) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < q.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < q.size(); ++j) row.push_back(q(i, j));
    rows.push_back(std::move(row));
  }
  return {{"n", q.size()}, {"b", std::move(rows)}};
}

ExchangeMatrix load_quiver(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open quiver file: " + path);
  nlohmann::json j;
  in >> j;
  return quiver_from_json(j);
}

}  // namespace quiverml
