#include "quiverml/search.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <boost/multiprecision/cpp_int.hpp>
#include <nlohmann/json.hpp>

namespace quiverml {

namespace {

using I128 = __int128;
using WideFlat = std::vector<I128>;  // row-major matrix entries

struct WideKeyHash {
  std::size_t operator()(const WideFlat& k) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (I128 v : k) {
      h ^= static_cast<std::uint64_t>(v);
      h *= 1099511628211ULL;
      h ^= static_cast<std::uint64_t>(static_cast<unsigned __int128>(v) >> 64);
      h *= 1099511628211ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

WideFlat widen(const ExchangeMatrix& q) {
  WideFlat w(q.flat().size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = q.flat()[i];
  return w;
}

bool narrow(const WideFlat& w, CanonicalKey* out) {
  constexpr I128 lo = std::numeric_limits<std::int64_t>::min();
  constexpr I128 hi = std::numeric_limits<std::int64_t>::max();
  CanonicalKey k(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] > hi || w[i] < lo) return false;
    k[i] = static_cast<std::int64_t>(w[i]);
  }
  *out = std::move(k);
  return true;
}

WideFlat widen_key(const CanonicalKey& k) {
  WideFlat w(k.size());
  for (std::size_t i = 0; i < k.size(); ++i) w[i] = k[i];
  return w;
}

// mu_k on a wide matrix; false if an entry leaves the 128-bit range.
bool wide_mutate(const WideFlat& m, int n, int k, WideFlat& out) {
  out.assign(m.size(), 0);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      I128 v;
      const I128 bij = m[static_cast<std::size_t>(i) * n + j];
      if (i == k || j == k) {
        v = -bij;
      } else {
        const I128 bik = m[static_cast<std::size_t>(i) * n + k];
        const I128 bkj = m[static_cast<std::size_t>(k) * n + j];
        if ((bik > 0) == (bkj > 0) && bik != 0 && bkj != 0) {
          I128 prod;
          if (__builtin_mul_overflow(bik, bkj, &prod)) return false;
          I128 sum;
          const I128 delta = bik > 0 ? prod : -prod;
          if (__builtin_add_overflow(bij, delta, &sum)) return false;
          v = sum;
        } else {
          v = bij;
        }
      }
      out[static_cast<std::size_t>(i) * n + j] = v;
      out[static_cast<std::size_t>(j) * n + i] = -v;
    }
  }
  return true;
}

bool wide_acyclic(const WideFlat& m, int n) {
  int indeg[kMaxCanonicalRank] = {};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (m[static_cast<std::size_t>(i) * n + j] > 0) ++indeg[j];
  int stack[kMaxCanonicalRank], top = 0, removed = 0;
  for (int i = 0; i < n; ++i)
    if (indeg[i] == 0) stack[top++] = i;
  while (top > 0) {
    int u = stack[--top];
    ++removed;
    for (int j = 0; j < n; ++j)
      if (m[static_cast<std::size_t>(u) * n + j] > 0 && --indeg[j] == 0) stack[top++] = j;
  }
  return removed == n;
}

// Permutation index maps, built once per rank.
const std::vector<std::vector<int>>& perm_maps(int n) {
  static std::mutex mu;
  static std::vector<std::vector<std::vector<int>>> cache(kMaxCanonicalRank + 1);
  std::lock_guard<std::mutex> lock(mu);
  auto& maps = cache[n];
  if (maps.empty()) {
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      std::vector<int> m(static_cast<std::size_t>(n) * n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          m[static_cast<std::size_t>(i) * n + j] = perm[i] * n + perm[j];
      maps.push_back(std::move(m));
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  return maps;
}

WideFlat wide_canonical(const WideFlat& m, int n) {
  const auto& maps = perm_maps(n);
  const std::vector<int>* best_map = &maps[0];
  for (std::size_t p = 1; p < maps.size(); ++p) {
    const auto& pm = maps[p];
    const auto& bm = *best_map;
    for (std::size_t idx = 0; idx < m.size(); ++idx) {
      const I128 a = m[pm[idx]], b = m[bm[idx]];
      if (a < b) { best_map = &maps[p]; break; }
      if (a > b) break;
    }
  }
  WideFlat out(m.size());
  for (std::size_t idx = 0; idx < m.size(); ++idx) out[idx] = m[(*best_map)[idx]];
  return out;
}

// Rank-3 classification where inputs may be any I128 magnitudes. Falls back
// to arbitrary precision only near the (rare) huge-value boundary cases.
Verdict wide_classify_cycle(I128 x, I128 y, I128 z) {
  const I128 mn = std::min({x, y, z});
  if (mn < 2) return Verdict::MA;
  constexpr I128 kSmall = static_cast<I128>(1) << 31;
  if (x <= kSmall && y <= kSmall && z <= kSmall) {
    const I128 c = x * x + y * y + z * z - x * y * z;
    return c > 4 ? Verdict::MA : Verdict::NMA;
  }
  // cpp_int has no direct __int128 constructor; assemble from halves.
  using Big = boost::multiprecision::cpp_int;
  auto to_big = [](I128 v) {
    Big hi = static_cast<std::int64_t>(v >> 64);
    Big lo = static_cast<std::uint64_t>(v);
    return (hi << 64) + lo;
  };
  const Big X = to_big(x), Y = to_big(y), Z = to_big(z);
  const Big c = X * X + Y * Y + Z * Z - X * Y * Z;
  return c > 4 ? Verdict::MA : Verdict::NMA;
}

struct Rank3Hit {
  std::array<int, 3> vertices;
  I128 x, y, z;
};

bool wide_nma_rank3_sub(const WideFlat& m, int n, Rank3Hit* hit) {
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      for (int c = b + 1; c < n; ++c) {
        const I128 xab = m[static_cast<std::size_t>(a) * n + b];
        const I128 xbc = m[static_cast<std::size_t>(b) * n + c];
        const I128 xac = m[static_cast<std::size_t>(a) * n + c];
        if (xab == 0 || xbc == 0 || xac == 0) continue;
        // Directed 3-cycle iff orientations are cyclic: a->b->c->a or reverse.
        const bool cyc = (xab > 0 && xbc > 0 && xac < 0) || (xab < 0 && xbc < 0 && xac > 0);
        if (!cyc) continue;
        const I128 x = xab > 0 ? xab : -xab;
        const I128 y = xbc > 0 ? xbc : -xbc;
        const I128 z = xac > 0 ? xac : -xac;
        if (wide_classify_cycle(x, y, z) == Verdict::NMA) {
          if (hit) *hit = {{a, b, c}, x, y, z};
          return true;
        }
      }
  return false;
}

bool wide_is_box(const WideFlat& m, int n) {
  if (n != 4) return false;
  int deg[4] = {};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (j != i && m[static_cast<std::size_t>(i) * 4 + j] != 0) ++deg[i];
  for (int i = 0; i < 4; ++i)
    if (deg[i] != 2) return false;
  // Walk the cycle from vertex 0.
  int prev = -1, cur = 0;
  I128 w[4];
  int dir[4];
  for (int step = 0; step < 4; ++step) {
    int nxt = -1;
    for (int j = 0; j < 4; ++j)
      if (j != cur && j != prev && m[static_cast<std::size_t>(cur) * 4 + j] != 0) { nxt = j; break; }
    if (nxt == -1) return false;
    const I128 v = m[static_cast<std::size_t>(cur) * 4 + nxt];
    w[step] = v > 0 ? v : -v;
    dir[step] = v > 0 ? 1 : -1;
    prev = cur;
    cur = nxt;
  }
  if (cur != 0) return false;  // support is two 2-cycles, not a 4-cycle
  if (!(dir[0] == dir[1] && dir[1] == dir[2] && dir[2] == dir[3])) return false;
  return w[0] == w[2] && w[1] == w[3] && w[0] >= 2 && w[1] >= 2;
}

std::int64_t saturate64(I128 v) {
  constexpr std::int64_t m = std::numeric_limits<std::int64_t>::max();
  if (v > m) return m;
  if (v < -static_cast<I128>(m)) return -m;
  return static_cast<std::int64_t>(v);
}

using WideKeySet = std::unordered_set<WideFlat, WideKeyHash>;

// ----------------------------------------------------------------------------
// BFS core over the mutation graph.

struct CoreOptions {
  int max_depth = 0;
  bool dedup = true;
  bool record_paths = false;
  std::size_t memory_cap_bytes = std::size_t{8} << 30;
};

struct CoreResult {
  std::unordered_map<WideFlat, int, WideKeyHash> visited;  // canonical key -> depth
  bool truncated = false;
  bool weight_pruned = false;
  bool stopped = false;            // visitor requested stop
  std::vector<int> stop_path;      // mutation sequence to the stopping node
  int closure_depth = 0;           // last level that produced new keys
};

// visitor(mat, depth) -> false to stop the search at this node.
using Visitor = std::function<bool(const WideFlat&, int)>;

struct PathNode {
  std::int32_t parent;
  std::int8_t k;
};

CoreResult core_explore(const ExchangeMatrix& seed, const CoreOptions& opt,
                        const Visitor& visitor = {}) {
  const int n = seed.size();
  CoreResult res;
  std::vector<PathNode> tree;        // only when record_paths
  std::vector<WideFlat> frontier;    // matrices of the current level
  std::vector<std::int32_t> frontier_ids;

  auto approx_bytes = [&]() {
    const std::size_t per_key = n * n * 16 + 64;
    return res.visited.size() * per_key + frontier.size() * per_key +
           tree.size() * sizeof(PathNode);
  };
  auto path_to = [&](std::int32_t id) {
    std::vector<int> path;
    for (std::int32_t cur = id; cur >= 0; cur = tree[cur].parent)
      path.push_back(tree[cur].k);
    std::reverse(path.begin(), path.end());
    return path;
  };

  WideFlat w0 = widen(seed);
  res.visited.emplace(wide_canonical(w0, n), 0);
  if (visitor && !visitor(w0, 0)) {
    res.stopped = true;
    return res;
  }
  frontier.push_back(std::move(w0));
  if (opt.record_paths) {
    tree.push_back({-1, -1});
    frontier_ids.push_back(0);
  }

  WideFlat child;
  for (int depth = 1; depth <= opt.max_depth && !frontier.empty(); ++depth) {
    std::vector<WideFlat> next;
    std::vector<std::int32_t> next_ids;
    for (std::size_t f = 0; f < frontier.size(); ++f) {
      for (int k = 0; k < n; ++k) {
        if (!wide_mutate(frontier[f], n, k, child)) {
          res.weight_pruned = true;
          continue;
        }
        WideFlat ckey = wide_canonical(child, n);
        auto [it, fresh] = res.visited.emplace(std::move(ckey), depth);
        if (opt.dedup && !fresh) continue;
        if (opt.record_paths) {
          tree.push_back({opt.record_paths ? frontier_ids[f] : -1, static_cast<std::int8_t>(k)});
          next_ids.push_back(static_cast<std::int32_t>(tree.size()) - 1);
        }
        if (visitor && !visitor(child, depth)) {
          res.stopped = true;
          if (opt.record_paths) res.stop_path = path_to(static_cast<std::int32_t>(tree.size()) - 1);
          return res;
        }
        next.push_back(child);
        if (approx_bytes() > opt.memory_cap_bytes)
          throw ResourceError("exploration exceeded the configured memory cap");
      }
    }
    if (!next.empty()) res.closure_depth = depth;
    frontier = std::move(next);
    frontier_ids = std::move(next_ids);
  }
  res.truncated = !frontier.empty();
  return res;
}

}  // namespace

ExplorationResult explore_class(const ExchangeMatrix& seed, int max_depth, bool dedup,
                                const ExploreOptions& opts) {
  if (max_depth < 0) throw std::invalid_argument("max_depth must be >= 0");
  CoreOptions copt;
  copt.max_depth = max_depth;
  copt.dedup = dedup;
  copt.memory_cap_bytes = opts.memory_cap_bytes;
  CoreResult core = core_explore(seed, copt);
  ExplorationResult out;
  out.truncated = core.truncated;
  out.weight_pruned = core.weight_pruned;
  CanonicalKey nk;
  for (const auto& [key, depth] : core.visited) {
    if (narrow(key, &nk))
      out.frontier_depths.emplace(std::move(nk), depth);
    else
      ++out.wide_key_count;
  }
  return out;
}

const char* to_string(Witness::Kind k) {
  switch (k) {
    case Witness::Kind::Acyclic: return "acyclic";
    case Witness::Kind::Rank3Subquiver: return "rank3_subquiver";
    case Witness::Kind::BoxQuiver: return "box_quiver";
    case Witness::Kind::DreadedTorus: return "dreaded_torus";
    case Witness::Kind::KnownKey: return "known_key";
    default: return "closure";
  }
}

Witness::Kind witness_kind_from_string(const std::string& s) {
  if (s == "acyclic") return Witness::Kind::Acyclic;
  if (s == "rank3_subquiver") return Witness::Kind::Rank3Subquiver;
  if (s == "box_quiver") return Witness::Kind::BoxQuiver;
  if (s == "dreaded_torus") return Witness::Kind::DreadedTorus;
  if (s == "known_key") return Witness::Kind::KnownKey;
  if (s == "closure") return Witness::Kind::Closure;
  throw std::invalid_argument("unknown witness kind: " + s);
}

KeySet ProofLedger::nma_keys() const {
  KeySet out;
  for (const auto& [key, rec] : classes)
    if (rec.verdict == Verdict::NMA) out.insert(key);
  return out;
}

bool is_box_quiver(const ExchangeMatrix& q) {
  if (q.size() != 4) return false;
  return wide_is_box(widen(q), 4);
}

bool detect_known_nma(const ExchangeMatrix& q, const KeySet& known, Witness* witness) {
  const WideFlat w = widen(q);
  Rank3Hit hit;
  if (q.size() >= 3 && wide_nma_rank3_sub(w, q.size(), &hit)) {
    if (witness) {
      witness->kind = Witness::Kind::Rank3Subquiver;
      witness->vertices = hit.vertices;
      witness->triple = {saturate64(hit.x), saturate64(hit.y), saturate64(hit.z)};
    }
    return true;
  }
  if (q.size() == 4) {
    if (wide_is_box(w, 4)) {
      if (witness) witness->kind = Witness::Kind::BoxQuiver;
      return true;
    }
    if (q.max_abs_entry() <= 2 && canonical_form(q) == canonical_form(dreaded_torus())) {
      if (witness) witness->kind = Witness::Kind::DreadedTorus;
      return true;
    }
  }
  CanonicalKey key = canonical_form(q);
  if (known.count(key)) {
    if (witness) {
      witness->kind = Witness::Kind::KnownKey;
      witness->matched_key = key;
    }
    return true;
  }
  return false;
}

EnumerationResult enumerate_weight2_rank4() {
  EnumerationResult out;
  KeySet seen;
  std::array<std::int64_t, 6> e{};
  for (e[0] = -2; e[0] <= 2; ++e[0])
    for (e[1] = -2; e[1] <= 2; ++e[1])
      for (e[2] = -2; e[2] <= 2; ++e[2])
        for (e[3] = -2; e[3] <= 2; ++e[3])
          for (e[4] = -2; e[4] <= 2; ++e[4])
            for (e[5] = -2; e[5] <= 2; ++e[5]) {
              ++out.raw_count;
              ExchangeMatrix q = ExchangeMatrix::from_upper6(e);
              if (!is_weakly_connected(q)) continue;
              out.connected.push_back(q);
              CanonicalKey key = canonical_form(q);
              if (seen.insert(key).second) out.classes.push_back(std::move(key));
            }
  std::sort(out.classes.begin(), out.classes.end());
  return out;
}

namespace {

// Union of canonical keys within the given mutation distance of the seeds.
WideKeySet nma_ball(const std::vector<CanonicalKey>& seeds, int radius,
                    std::size_t memory_cap) {
  WideKeySet known;
  CoreOptions copt;
  copt.max_depth = radius;
  copt.dedup = true;
  copt.memory_cap_bytes = memory_cap;
  for (const auto& key : seeds) {
    CoreResult core = core_explore(matrix_from_key(key), copt);
    for (const auto& [k, d] : core.visited) known.insert(k);
  }
  return known;
}

struct ResolveOutcome {
  Verdict verdict = Verdict::Undetermined;
  Witness witness;
};

ResolveOutcome resolve_class(const CanonicalKey& key, int max_depth,
                             const WideKeySet& known, std::size_t memory_cap) {
  ExchangeMatrix rep = matrix_from_key(key);
  const int n = rep.size();
  ResolveOutcome out;
  Witness found;
  bool is_ma = false;
  CoreOptions copt;
  copt.max_depth = max_depth;
  copt.dedup = true;
  copt.record_paths = true;
  copt.memory_cap_bytes = memory_cap;
  auto visitor = [&](const WideFlat& m, int depth) {
    if (depth == 0) return true;  // stage-iv seeds are pre-screened
    if (wide_acyclic(m, n)) {
      is_ma = true;
      found = Witness{};
      found.kind = Witness::Kind::Acyclic;
      return false;
    }
    Rank3Hit hit;
    if (wide_nma_rank3_sub(m, n, &hit)) {
      is_ma = false;
      found = Witness{};
      found.kind = Witness::Kind::Rank3Subquiver;
      found.vertices = hit.vertices;
      found.triple = {saturate64(hit.x), saturate64(hit.y), saturate64(hit.z)};
      return false;
    }
    if (wide_is_box(m, n)) {
      is_ma = false;
      found = Witness{};
      found.kind = Witness::Kind::BoxQuiver;
      return false;
    }
    WideFlat ck = wide_canonical(m, n);
    if (known.count(ck)) {
      is_ma = false;
      found = Witness{};
      found.kind = Witness::Kind::KnownKey;
      CanonicalKey nk;
      if (narrow(ck, &nk)) found.matched_key = std::move(nk);
      return false;
    }
    return true;
  };
  CoreResult core = core_explore(rep, copt, visitor);
  if (core.stopped) {
    out.verdict = is_ma ? Verdict::MA : Verdict::NMA;
    out.witness = found;
    out.witness.sequence = core.stop_path;
    return out;
  }
  if (!core.truncated && !core.weight_pruned) {
    // Exchange graph generated completely with no acyclic member.
    out.verdict = Verdict::NMA;
    out.witness.kind = Witness::Kind::Closure;
    out.witness.closure_depth = core.closure_depth;
    out.witness.class_size = core.visited.size();
    return out;
  }
  return out;  // Undetermined
}

}  // namespace

ProofLedger prove_rank4_weight2(const ProveOptions& opts) {
  if (opts.max_nma_seed_depth < 1 || opts.max_resolve_depth < 1)
    throw std::invalid_argument("depths must be >= 1");
  auto log = [&](const std::string& s) {
    if (opts.progress) opts.progress(s);
  };

  ProofLedger ledger;
  EnumerationResult enumr = enumerate_weight2_rank4();
  ledger.total_raw = enumr.raw_count;
  ledger.total_connected = enumr.connected.size();
  ledger.total_classes = enumr.classes.size();
  log("enumerated " + std::to_string(ledger.total_raw) + " raw, " +
      std::to_string(ledger.total_connected) + " connected, " +
      std::to_string(ledger.total_classes) + " classes");

  // Stage i: acyclic representatives are mutation-acyclic outright.
  std::vector<CanonicalKey> unknown;
  for (const auto& key : enumr.classes) {
    ExchangeMatrix rep = matrix_from_key(key);
    if (is_acyclic(rep)) {
      ClassRecord rec;
      rec.verdict = Verdict::MA;
      rec.witness.kind = Witness::Kind::Acyclic;
      ledger.classes.emplace(key, std::move(rec));
      ++ledger.acyclic_count;
    } else {
      unknown.push_back(key);
    }
  }
  log("stage i: " + std::to_string(ledger.acyclic_count) + " acyclic classes");

  // Stage ii: NMA rank-3 subquiver, box quiver, dreaded torus.
  std::vector<CanonicalKey> nma_seeds;
  {
    std::vector<CanonicalKey> still;
    const CanonicalKey dt_key = canonical_form(dreaded_torus());
    for (const auto& key : unknown) {
      ExchangeMatrix rep = matrix_from_key(key);
      ClassRecord rec;
      Rank3Hit hit;
      if (wide_nma_rank3_sub(widen(rep), rep.size(), &hit)) {
        rec.verdict = Verdict::NMA;
        rec.witness.kind = Witness::Kind::Rank3Subquiver;
        rec.witness.vertices = hit.vertices;
        rec.witness.triple = {saturate64(hit.x), saturate64(hit.y), saturate64(hit.z)};
        ++ledger.markov_subquiver_count;
      } else if (is_box_quiver(rep)) {
        rec.verdict = Verdict::NMA;
        rec.witness.kind = Witness::Kind::BoxQuiver;
        ++ledger.special_count;
      } else if (key == dt_key) {
        rec.verdict = Verdict::NMA;
        rec.witness.kind = Witness::Kind::DreadedTorus;
        ++ledger.special_count;
      } else {
        still.push_back(key);
        continue;
      }
      nma_seeds.push_back(key);
      ledger.classes.emplace(key, std::move(rec));
    }
    unknown = std::move(still);
  }
  log("stage ii: " + std::to_string(ledger.markov_subquiver_count) +
      " rank-3-subquiver classes, " + std::to_string(ledger.special_count) + " special");

  // Stage iii: expand the known NMA classes to the seed depth; any unknown
  // class whose key appears is mutation-equivalent to an NMA quiver.
  WideKeySet known = nma_ball(nma_seeds, opts.max_nma_seed_depth, opts.memory_cap_bytes);
  log("stage iii: known NMA ball has " + std::to_string(known.size()) + " keys");
  {
    std::vector<CanonicalKey> still;
    for (const auto& key : unknown) {
      if (known.count(widen_key(key))) {
        ClassRecord rec;
        rec.verdict = Verdict::NMA;
        rec.witness.kind = Witness::Kind::KnownKey;
        rec.witness.matched_key = key;
        ledger.classes.emplace(key, std::move(rec));
        ++ledger.propagated_nma_count;
      } else {
        still.push_back(key);
      }
    }
    unknown = std::move(still);
  }
  log("stage iii: " + std::to_string(ledger.propagated_nma_count) + " propagated NMA");

  // Stage iv: per-class bounded exploration, optionally iterated with the
  // balls of freshly found NMA classes until nothing changes.
  ledger.resolved_by_search_count = unknown.size();
  const int threads = std::max(1, opts.threads);
  int pass = 0;
  while (!unknown.empty()) {
    ++pass;
    std::vector<ResolveOutcome> outcomes(unknown.size());
    std::atomic<std::size_t> cursor{0};
    auto worker = [&]() {
      for (;;) {
        const std::size_t i = cursor.fetch_add(1);
        if (i >= unknown.size()) return;
        outcomes[i] =
            resolve_class(unknown[i], opts.max_resolve_depth, known,
                          opts.memory_cap_bytes / static_cast<std::size_t>(threads));
      }
    };
    if (threads == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
      for (auto& th : pool) th.join();
    }

    std::vector<CanonicalKey> still;
    std::vector<CanonicalKey> fresh_nma;
    std::size_t resolved_ma = 0, resolved_nma = 0;
    for (std::size_t i = 0; i < unknown.size(); ++i) {
      if (outcomes[i].verdict == Verdict::Undetermined) {
        still.push_back(unknown[i]);
        continue;
      }
      ClassRecord rec;
      rec.verdict = outcomes[i].verdict;
      rec.witness = outcomes[i].witness;
      ledger.classes.emplace(unknown[i], std::move(rec));
      if (outcomes[i].verdict == Verdict::NMA) {
        fresh_nma.push_back(unknown[i]);
        ++resolved_nma;
      } else {
        ++resolved_ma;
      }
    }
    log("stage iv pass " + std::to_string(pass) + ": " + std::to_string(resolved_ma) +
        " MA, " + std::to_string(resolved_nma) + " NMA, " + std::to_string(still.size()) +
        " open");
    if (still.empty()) {
      unknown.clear();
      break;
    }
    if (!opts.accumulate_nma_balls || fresh_nma.empty()) {
      unknown = std::move(still);
      break;  // no new information can appear; stop
    }
    WideKeySet extra = nma_ball(fresh_nma, opts.max_nma_seed_depth, opts.memory_cap_bytes);
    known.insert(extra.begin(), extra.end());
    unknown = std::move(still);
  }
  ledger.undetermined = unknown;

  for (const auto& [key, rec] : ledger.classes) {
    if (rec.verdict == Verdict::MA)
      ++ledger.final_ma;
    else
      ++ledger.final_nma;
  }
  log("final: " + std::to_string(ledger.final_ma) + " MA / " +
      std::to_string(ledger.final_nma) + " NMA, " +
      std::to_string(ledger.undetermined.size()) + " undetermined");
  return ledger;
}

namespace {

ExchangeMatrix apply_sequence_narrowed(const CanonicalKey& key, const std::vector<int>& seq,
                                       WideFlat* wide_out) {
  ExchangeMatrix rep = matrix_from_key(key);
  WideFlat m = widen(rep);
  WideFlat next;
  const int n = rep.size();
  for (int k : seq) {
    if (!wide_mutate(m, n, k, next))
      throw WeightOverflowError("witness sequence overflows 128 bits");
    m = next;
  }
  *wide_out = m;
  return rep;
}

}  // namespace

bool verify_ledger(const ProofLedger& ledger, std::string* why) {
  auto fail = [&](const CanonicalKey& key, const std::string& reason) {
    if (why) {
      std::ostringstream os;
      os << "class [";
      for (std::size_t i = 0; i < key.size(); ++i) os << (i ? "," : "") << key[i];
      os << "]: " << reason;
      *why = os.str();
    }
    return false;
  };

  // Re-derive the known ball from the stage-ii NMA classes (the ones whose
  // witnesses need no mutation sequence).
  std::vector<CanonicalKey> ball_seeds;
  for (const auto& [key, rec] : ledger.classes)
    if (rec.verdict == Verdict::NMA) ball_seeds.push_back(key);
  WideKeySet known;
  bool known_built = false;

  for (const auto& [key, rec] : ledger.classes) {
    WideFlat reached;
    ExchangeMatrix rep = matrix_from_key(key);
    const int n = rep.size();
    try {
      apply_sequence_narrowed(key, rec.witness.sequence, &reached);
    } catch (const WeightOverflowError&) {
      return fail(key, "witness sequence not replayable");
    }
    switch (rec.witness.kind) {
      case Witness::Kind::Acyclic:
        if (rec.verdict != Verdict::MA) return fail(key, "acyclic witness on NMA class");
        if (!wide_acyclic(reached, n)) return fail(key, "sequence does not end acyclic");
        break;
      case Witness::Kind::Rank3Subquiver: {
        if (rec.verdict != Verdict::NMA) return fail(key, "rank3 witness on MA class");
        const auto& v = rec.witness.vertices;
        const I128 xab = reached[static_cast<std::size_t>(v[0]) * n + v[1]];
        const I128 xbc = reached[static_cast<std::size_t>(v[1]) * n + v[2]];
        const I128 xac = reached[static_cast<std::size_t>(v[0]) * n + v[2]];
        const bool cyc = (xab > 0 && xbc > 0 && xac < 0) || (xab < 0 && xbc < 0 && xac > 0);
        if (!cyc) return fail(key, "witness triple is not a directed 3-cycle");
        auto abs128 = [](I128 t) { return t > 0 ? t : -t; };
        if (wide_classify_cycle(abs128(xab), abs128(xbc), abs128(xac)) != Verdict::NMA)
          return fail(key, "witness 3-cycle is not NMA");
        break;
      }
      case Witness::Kind::BoxQuiver:
        if (!wide_is_box(reached, n)) return fail(key, "sequence does not end on a box quiver");
        break;
      case Witness::Kind::DreadedTorus: {
        CanonicalKey nk;
        if (!narrow(wide_canonical(reached, n), &nk) || nk != canonical_form(dreaded_torus()))
          return fail(key, "sequence does not end on the dreaded torus");
        break;
      }
      case Witness::Kind::KnownKey: {
        if (!known_built) {
          known = nma_ball(ball_seeds, 8, std::size_t{8} << 30);
          known_built = true;
        }
        if (!known.count(wide_canonical(reached, n)))
          return fail(key, "reached key is not in the NMA ball");
        break;
      }
      case Witness::Kind::Closure: {
        CoreOptions copt;
        copt.max_depth = rec.witness.closure_depth + 1;
        copt.dedup = true;
        CoreResult core = core_explore(rep, copt);
        if (core.truncated || core.weight_pruned)
          return fail(key, "exchange graph did not close as witnessed");
        for (const auto& [k, d] : core.visited)
          if (wide_acyclic(k, n)) return fail(key, "closed exchange graph contains an acyclic quiver");
        break;
      }
    }
  }
  return true;
}

DecideResult decide(const ExchangeMatrix& q, const ProofLedger& ledger, int search_depth,
                    const ExploreOptions& opts) {
  DecideResult out;
  if (q.size() == 4 && q.max_abs_entry() <= 2) {
    auto it = ledger.classes.find(canonical_form(q));
    if (it != ledger.classes.end()) {
      out.verdict = it->second.verdict;
      out.witness = it->second.witness;
      out.from_ledger = true;
      return out;
    }
  }
  // Bounded search: acyclic quiver => MA; NMA evidence via subquivers, box,
  // dreaded torus, or contact with a ledger NMA class.
  WideKeySet known;
  for (const auto& [key, rec] : ledger.classes)
    if (rec.verdict == Verdict::NMA) known.insert(widen_key(key));
  const int n = q.size();
  const CanonicalKey dt_key = n == 4 ? canonical_form(dreaded_torus()) : CanonicalKey{};
  bool is_ma = false;
  Witness found;
  CoreOptions copt;
  copt.max_depth = search_depth;
  copt.dedup = true;
  copt.record_paths = true;
  copt.memory_cap_bytes = opts.memory_cap_bytes;
  auto visitor = [&](const WideFlat& m, int) {
    if (wide_acyclic(m, n)) {
      is_ma = true;
      found.kind = Witness::Kind::Acyclic;
      return false;
    }
    Rank3Hit hit;
    if (n >= 3 && wide_nma_rank3_sub(m, n, &hit)) {
      found.kind = Witness::Kind::Rank3Subquiver;
      found.vertices = hit.vertices;
      found.triple = {saturate64(hit.x), saturate64(hit.y), saturate64(hit.z)};
      return false;
    }
    if (wide_is_box(m, n)) {
      found.kind = Witness::Kind::BoxQuiver;
      return false;
    }
    WideFlat ck = wide_canonical(m, n);
    CanonicalKey nk;
    if (narrow(ck, &nk)) {
      if (n == 4 && nk == dt_key) {
        found.kind = Witness::Kind::DreadedTorus;
        return false;
      }
      if (known.count(ck)) {
        found.kind = Witness::Kind::KnownKey;
        found.matched_key = nk;
        return false;
      }
    }
    return true;
  };
  CoreResult core = core_explore(q, copt, visitor);
  if (core.stopped) {
    out.verdict = is_ma ? Verdict::MA : Verdict::NMA;
    out.witness = found;
    out.witness.sequence = core.stop_path;
    return out;
  }
  if (!core.truncated && !core.weight_pruned) {
    out.verdict = Verdict::NMA;
    out.witness.kind = Witness::Kind::Closure;
    out.witness.closure_depth = core.closure_depth;
    out.witness.class_size = core.visited.size();
    return out;
  }
  return out;  // Undetermined
}

namespace {

nlohmann::json witness_to_json(const Witness& w) {
  nlohmann::json j;
  j["type"] = to_string(w.kind);
  j["sequence"] = w.sequence;
  switch (w.kind) {
    case Witness::Kind::Rank3Subquiver:
      j["vertices"] = w.vertices;
      j["triple"] = {w.triple.x, w.triple.y, w.triple.z};
      break;
    case Witness::Kind::KnownKey:
      j["matched_key"] = w.matched_key;
      break;
    case Witness::Kind::Closure:
      j["closure_depth"] = w.closure_depth;
      j["class_size"] = w.class_size;
      break;
    default:
      break;
  }
  return j;
}

Witness witness_from_json(const nlohmann::json& j) {
  Witness w;
  w.kind = witness_kind_from_string(j.at("type").get<std::string>());
  w.sequence = j.at("sequence").get<std::vector<int>>();
  if (j.contains("vertices")) w.vertices = j.at("vertices").get<std::array<int, 3>>();
  if (j.contains("triple")) {
    auto t = j.at("triple").get<std::array<std::int64_t, 3>>();
    w.triple = {t[0], t[1], t[2]};
  }
  if (j.contains("matched_key")) w.matched_key = j.at("matched_key").get<CanonicalKey>();
  if (j.contains("closure_depth")) w.closure_depth = j.at("closure_depth").get<int>();
  if (j.contains("class_size")) w.class_size = j.at("class_size").get<std::size_t>();
  return w;
}

}  // namespace

void save_ledger(const ProofLedger& ledger, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open ledger file for writing: " + path);
  nlohmann::json meta;
  meta["meta"] = {{"total_raw", ledger.total_raw},
                  {"total_connected", ledger.total_connected},
                  {"total_classes", ledger.total_classes},
                  {"acyclic_count", ledger.acyclic_count},
                  {"markov_subquiver_count", ledger.markov_subquiver_count},
                  {"special_count", ledger.special_count},
                  {"propagated_nma_count", ledger.propagated_nma_count},
                  {"resolved_by_search_count", ledger.resolved_by_search_count},
                  {"final_ma", ledger.final_ma},
                  {"final_nma", ledger.final_nma}};
  out << meta.dump() << "\n";
  for (const auto& [key, rec] : ledger.classes) {
    nlohmann::json j;
    j["key"] = key;
    j["verdict"] = to_string(rec.verdict);
    j["witness"] = witness_to_json(rec.witness);
    out << j.dump() << "\n";
  }
  for (const auto& key : ledger.undetermined) {
    nlohmann::json j;
    j["key"] = key;
    j["verdict"] = to_string(Verdict::Undetermined);
    out << j.dump() << "\n";
  }
}

ProofLedger load_ledger(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ledger file: " + path);
  ProofLedger ledger;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    if (j.contains("meta")) {
      const auto& m = j.at("meta");
      ledger.total_raw = m.value("total_raw", 0ULL);
      ledger.total_connected = m.value("total_connected", 0ULL);
      ledger.total_classes = m.value("total_classes", 0ULL);
      ledger.acyclic_count = m.value("acyclic_count", 0ULL);
      ledger.markov_subquiver_count = m.value("markov_subquiver_count", 0ULL);
      ledger.special_count = m.value("special_count", 0ULL);
      ledger.propagated_nma_count = m.value("propagated_nma_count", 0ULL);
      ledger.resolved_by_search_count = m.value("resolved_by_search_count", 0ULL);
      ledger.final_ma = m.value("final_ma", 0ULL);
      ledger.final_nma = m.value("final_nma", 0ULL);
      continue;
    }
    CanonicalKey key = j.at("key").get<CanonicalKey>();
    const Verdict v = verdict_from_string(j.at("verdict").get<std::string>());
    if (v == Verdict::Undetermined) {
      ledger.undetermined.push_back(std::move(key));
      continue;
    }
    ClassRecord rec;
    rec.verdict = v;
    rec.witness = witness_from_json(j.at("witness"));
    ledger.classes.emplace(std::move(key), std::move(rec));
  }
  return ledger;
}

}  // namespace quiverml
