#include "mflab/classify.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <utility>

#include "mflab/dynamics.hpp"
#include "mflab/errors.hpp"
#include "mflab/parallel.hpp"

namespace mflab {

Track track(const TrackSet& set, std::size_t i) {
  if (i >= set.n) throw ContractViolation("track: particle index out of range");
  const std::size_t s = set.steps();
  return {std::span<const double>(set.times),
          std::span<const Vec2>(set.q).subspan(i * s, s),
          std::span<const Vec2>(set.p).subspan(i * s, s)};
}

void CollisionClassSpec::validate() const {
  if (std::isnan(r) || std::isnan(R) || std::isnan(v) || std::isnan(V) || std::isnan(t1) || std::isnan(t2))
    throw DomainError("CollisionClassSpec: NaN bound");
  if (r < 0.0 || r > R) throw ContractViolation("CollisionClassSpec: need 0 <= r <= R");
  if (v < 0.0 || v > V) throw ContractViolation("CollisionClassSpec: need 0 <= v <= V");
  if (t1 > t2) throw ContractViolation("CollisionClassSpec: need t1 <= t2");
}

namespace {

bool same_grid(const Track& a, const Track& b) {
  return a.times.size() == b.times.size() && std::equal(a.times.begin(), a.times.end(), b.times.begin());
}

bool in_window(double t, double t1, double t2) {
  double tol = 1e-9 * std::max(1.0, std::abs(t));
  return t >= t1 - tol && t <= t2 + tol;
}

}  // namespace

Encounter min_encounter(const Track& a, const Track& b, double t1, double t2) {
  if (!same_grid(a, b)) throw ContractViolation("min_encounter: tracks are on different snapshot grids");
  if (std::isnan(t1) || std::isnan(t2) || t1 > t2) throw ContractViolation("min_encounter: malformed window");
  Encounter best;
  bool found = false;
  for (std::size_t s = 0; s < a.times.size(); ++s) {
    if (!in_window(a.times[s], t1, t2)) continue;
    double d = norm(a.q[s] - b.q[s]);
    if (!found || d < best.dr) {
      best = {a.times[s], d, 0.0, s};
      found = true;
    }
  }
  if (!found) throw ContractViolation("min_encounter: window contains no snapshot");
  best.dv = norm(a.p[best.snapshot] - b.p[best.snapshot]);
  return best;
}

Encounter refine_encounter(const Track& a, const Track& b, const Encounter& e) {
  if (!same_grid(a, b)) throw ContractViolation("refine_encounter: tracks are on different snapshot grids");
  const std::size_t s = e.snapshot;
  if (s == 0 || s + 1 >= a.times.size()) return e;
  double t0 = a.times[s - 1], t1 = a.times[s], t2 = a.times[s + 1];
  double h = t1 - t0;
  if (!(h > 0.0) || std::abs((t2 - t1) - h) > 1e-9 * h) return e;
  double d0 = norm2(a.q[s - 1] - b.q[s - 1]);
  double d1 = norm2(a.q[s] - b.q[s]);
  double d2 = norm2(a.q[s + 1] - b.q[s + 1]);
  double curv = d0 - 2.0 * d1 + d2;
  if (!(curv > 0.0)) return e;
  // quadratic through (-1,d0), (0,d1), (1,d2): d1 + (d2-d0)/2 u + curv/2 u^2
  double u = std::clamp(0.5 * (d0 - d2) / curv, -1.0, 1.0);
  double dmin = d1 + 0.5 * (d2 - d0) * u + 0.5 * curv * u * u;
  Encounter out = e;
  out.t_min = t1 + u * h;
  out.dr = std::sqrt(std::max(0.0, std::min(dmin, d1)));
  std::size_t lo = u < 0 ? s - 1 : s;
  double w = u < 0 ? u + 1.0 : u;
  Vec2 rel_lo = a.p[lo] - b.p[lo], rel_hi = a.p[lo + 1] - b.p[lo + 1];
  out.dv = norm((1.0 - w) * rel_lo + w * rel_hi);
  return out;
}

bool in_class(const Track& a, const Track& b, const CollisionClassSpec& spec) {
  spec.validate();
  Encounter e = min_encounter(a, b, spec.t1, spec.t2);
  return spec.r <= e.dr && e.dr <= spec.R && spec.v <= e.dv && e.dv <= spec.V;
}

bool Partition::is_bad(std::size_t i) const { return std::binary_search(bad.begin(), bad.end(), i); }

double bad_radius(std::uint64_t n, double sigma) { return 4.0 * bad_velocity(n, sigma); }

double bad_velocity(std::uint64_t n, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw DomainError("sigma must be positive and finite");
  return std::pow(static_cast<double>(n), -0.6 - sigma);
}

namespace {

void check_tracks(const TrackSet& phi, const char* who) {
  if (phi.steps() == 0) throw ContractViolation(std::string(who) + ": tracks have no snapshots");
  if (phi.q.size() != phi.n * phi.steps() || phi.p.size() != phi.q.size())
    throw ContractViolation(std::string(who) + ": malformed track set");
}

bool bad_pair(const Encounter& e, double rb, double vb) { return e.dr <= rb && e.dv <= vb; }

// For every particle, its ascending candidate partners; the first one that
// is in the bad class becomes the witness.
Partition assemble(const TrackSet& phi, const std::vector<std::vector<std::size_t>>& candidates, double rb,
                   double vb, unsigned threads) {
  const std::size_t n = phi.n;
  std::vector<std::optional<Witness>> found(n);
  parallel_for(n, threads, [&](std::size_t i) {
    Track ti = track(phi, i);
    for (std::size_t j : candidates[i]) {
      Encounter e = min_encounter(ti, track(phi, j));
      if (bad_pair(e, rb, vb)) {
        found[i] = Witness{j, e};
        break;
      }
    }
  });
  Partition part;
  part.r_bad = rb;
  part.v_bad = vb;
  for (std::size_t i = 0; i < n; ++i) {
    if (found[i]) {
      part.bad.push_back(i);
      part.witness.push_back(*found[i]);
    } else {
      part.good.push_back(i);
    }
  }
  return part;
}

std::int64_t cell_of(double x, double inv) {
  double c = std::floor(x * inv);
  constexpr double lim = 1e15;
  return static_cast<std::int64_t>(std::clamp(c, -lim, lim));
}

}  // namespace

Partition partition_with_radii(const TrackSet& phi, double rb, double vb, unsigned threads) {
  check_tracks(phi, "partition");
  if (std::isnan(rb) || std::isnan(vb) || rb < 0.0 || vb < 0.0)
    throw DomainError("partition: radii must be nonnegative");
  const std::size_t n = phi.n, steps = phi.steps();
  std::vector<std::vector<std::size_t>> cand(n);

  if (std::isinf(rb) || n < 2) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) cand[i].push_back(j);
    return assemble(phi, cand, rb, vb, threads);
  }

  // Cell list of width rb. With rb = 0 only exact coincidences qualify
  // (hypot of distinct doubles never rounds to 0), so the key is the value
  // itself and only the home cell is scanned.
  const bool exact = rb == 0.0;
  const double inv = exact ? 0.0 : 1.0 / rb;
  const std::int64_t reach = exact ? 0 : 1;
  auto key = [&](double x) { return exact ? std::bit_cast<std::int64_t>(x + 0.0) : cell_of(x, inv); };
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> per_step(steps);
  parallel_for(steps, threads, [&](std::size_t s) {
    struct Item {
      std::int64_t cx, cy;
      std::size_t i;
    };
    std::vector<Item> items(n);
    for (std::size_t i = 0; i < n; ++i) {
      Vec2 q = phi.q_at(i, s);
      items[i] = {key(q.x), key(q.y), i};
    }
    auto key_less = [](const Item& a, const Item& b) {
      return a.cx != b.cx ? a.cx < b.cx : (a.cy != b.cy ? a.cy < b.cy : a.i < b.i);
    };
    std::sort(items.begin(), items.end(), key_less);
    auto& out = per_step[s];
    for (const Item& it : items) {
      for (std::int64_t dx = -reach; dx <= reach; ++dx) {
        for (std::int64_t dy = -reach; dy <= reach; ++dy) {
          Item probe{it.cx + dx, it.cy + dy, 0};
          auto lo = std::lower_bound(items.begin(), items.end(), probe, key_less);
          for (auto k = lo; k != items.end() && k->cx == probe.cx && k->cy == probe.cy; ++k) {
            if (k->i <= it.i) continue;
            if (norm(phi.q_at(it.i, s) - phi.q_at(k->i, s)) <= rb) out.emplace_back(it.i, k->i);
          }
        }
      }
    }
  });

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (auto& v : per_step) pairs.insert(pairs.end(), v.begin(), v.end());
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  for (auto [i, j] : pairs) {
    cand[i].push_back(j);
    cand[j].push_back(i);
  }
  for (auto& c : cand) std::sort(c.begin(), c.end());
  return assemble(phi, cand, rb, vb, threads);
}

Partition partition_good_bad(const TrackSet& phi, const ForceParams& p, double sigma, unsigned threads) {
  if (phi.n != p.n()) throw ContractViolation("partition_good_bad: track count differs from params N");
  return partition_with_radii(phi, bad_radius(p.n(), sigma), bad_velocity(p.n(), sigma), threads);
}

Partition partition_good_bad_bruteforce(const TrackSet& phi, const ForceParams& p, double sigma,
                                        unsigned threads) {
  if (phi.n != p.n()) throw ContractViolation("partition_good_bad: track count differs from params N");
  check_tracks(phi, "partition");
  std::vector<std::vector<std::size_t>> all(phi.n);
  for (std::size_t i = 0; i < phi.n; ++i)
    for (std::size_t j = 0; j < phi.n; ++j)
      if (j != i) all[i].push_back(j);
  return assemble(phi, all, bad_radius(p.n(), sigma), bad_velocity(p.n(), sigma), threads);
}

std::string CoverClass::id() const {
  switch (family) {
    case CoverFamily::i: return "i";
    case CoverFamily::ii: return "ii_" + std::to_string(l);
    case CoverFamily::iii: return "iii";
    case CoverFamily::iv: return "iv_" + std::to_string(k);
    case CoverFamily::v: return "v_" + std::to_string(k) + "_" + std::to_string(l);
    case CoverFamily::vi: return "vi_" + std::to_string(k);
    case CoverFamily::vii: return "vii";
  }
  return "?";
}

bool CoverClass::contains(double dr, double dv) const {
  return r_lo <= dr && dr <= r_hi && v_lo <= dv && dv <= v_hi;
}

std::vector<CoverClass> cover_family(std::uint64_t n, double eta, double r_base, double v_base) {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw DomainError("cover_family: eta must be positive");
  if (!(r_base > 0.0) || !(v_base > 0.0) || !std::isfinite(r_base) || !std::isfinite(v_base))
    throw DomainError("cover_family: base radii must be positive and finite");
  if (n < 2) throw DomainError("cover_family: need N >= 2");
  const double inf = std::numeric_limits<double>::infinity();
  const double step = eta * std::log(static_cast<double>(n));
  auto bands = [&](double base) { return base < 1.0 ? static_cast<int>(std::ceil(std::log(1.0 / base) / step - 1e-9)) : -1; };
  const int kmax = bands(r_base), lmax = bands(v_base);
  const double r_top = std::exp(-step);  // N^-eta, where (vii) starts
  // exponent ratios are compared with a small slack so the class list does
  // not flicker with N through roundoff
  // bands stop at N^-eta in space and at 1 in velocity, so a far partner
  // lands in (vii) only and a fast one in the (iii)/(vi) rows only
  auto edge = [&](double base, int j, double top) { return std::min(top, base * std::exp(j * step)); };
  std::vector<int> ks, ls;
  for (int k = 0; k <= kmax; ++k)
    if (edge(r_base, k, r_top) < r_top * (1.0 - 1e-9)) ks.push_back(k);
  for (int l = 0; l <= lmax; ++l)
    if (edge(v_base, l, 1.0) < 1.0 - 1e-9) ls.push_back(l);

  std::vector<CoverClass> out;
  out.push_back({CoverFamily::i, -1, -1, 0.0, r_base, 0.0, v_base});
  for (int l : ls) out.push_back({CoverFamily::ii, -1, l, 0.0, r_base, edge(v_base, l, 1.0), edge(v_base, l + 1, 1.0)});
  out.push_back({CoverFamily::iii, -1, -1, 0.0, r_base, 1.0, inf});
  for (int k : ks)
    out.push_back({CoverFamily::iv, k, -1, edge(r_base, k, r_top), edge(r_base, k + 1, r_top), 0.0, v_base});
  for (int k : ks)
    for (int l : ls)
      out.push_back({CoverFamily::v, k, l, edge(r_base, k, r_top), edge(r_base, k + 1, r_top), edge(v_base, l, 1.0),
                     edge(v_base, l + 1, 1.0)});
  for (int k : ks)
    out.push_back({CoverFamily::vi, k, -1, edge(r_base, k, r_top), edge(r_base, k + 1, r_top), 1.0, inf});
  out.push_back({CoverFamily::vii, -1, -1, r_top, inf, 0.0, inf});
  return out;
}

CoverHistogram cover_histogram(const TrackSet& phi, std::size_t target, double eta, double r_base,
                               double v_base) {
  check_tracks(phi, "cover_histogram");
  if (target >= phi.n) throw ContractViolation("cover_histogram: target out of range");
  CoverHistogram h;
  h.target = target;
  h.classes = cover_family(std::max<std::size_t>(phi.n, 2), eta, r_base, v_base);
  h.counts.assign(h.classes.size(), 0);
  Track ti = track(phi, target);
  for (std::size_t j = 0; j < phi.n; ++j) {
    if (j == target) continue;
    ++h.partners;
    Encounter e = min_encounter(ti, track(phi, j));
    bool hit = false;
    for (std::size_t c = 0; c < h.classes.size(); ++c) {
      if (!h.classes[c].contains(e.dr, e.dv)) continue;
      ++h.counts[c];
      h.entries.push_back({j, c, e});
      hit = true;
    }
    if (!hit) ++h.uncovered;
  }
  return h;
}

double stopping_threshold(std::uint64_t n, double sigma) {
  if (!std::isfinite(sigma)) throw DomainError("sigma must be finite");
  return std::pow(static_cast<double>(n), -0.4 + 2.0 * sigma);
}

StoppingTime stopping_time(const TrajectoryPair& pair, double threshold) {
  if (std::isnan(threshold) || threshold < 0.0) throw DomainError("stopping_time: threshold must be >= 0");
  const auto& times = pair.times();
  if (times.empty()) throw ContractViolation("stopping_time: empty trajectory pair");
  StoppingTime st;
  st.threshold = threshold;
  st.snapshot = times.size() - 1;
  st.tau = times.back();
  for (std::size_t s = 0; s < times.size(); ++s) {
    for (std::size_t i = 0; i < pair.size(); ++i) {
      double d = std::max(norm(pair.psi.q_at(i, s) - pair.phi.q_at(i, s)),
                          norm(pair.psi.p_at(i, s) - pair.phi.p_at(i, s)));
      if (d > threshold) {
        st.trigger = i;
        st.snapshot = s == 0 ? 0 : s - 1;
        st.tau = times[st.snapshot];
        return st;
      }
    }
  }
  return st;
}

StoppingTime stopping_time(const TrajectoryPair& pair, const Partition& part, double sigma) {
  if (part.good.size() + part.bad.size() != pair.size())
    throw ContractViolation("stopping_time: partition does not match the trajectory pair");
  return stopping_time(pair, stopping_threshold(pair.params.n(), sigma));
}

namespace {
std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << std::setprecision(17);
  out << "particle,class_id,partner,t_min,dr,dv\n";
  return out;
}
}  // namespace

void write_partition_csv(const std::string& path, const Partition& part, std::size_t n) {
  auto out = open_csv(path);
  std::size_t b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (b < part.bad.size() && part.bad[b] == i) {
      const Witness& w = part.witness[b++];
      out << i << ",bad," << w.partner << ',' << w.encounter.t_min << ',' << w.encounter.dr << ','
          << w.encounter.dv << '\n';
    } else {
      out << i << ",good,,,,\n";
    }
  }
}

void write_cover_csv(const std::string& path, const CoverHistogram& hist) {
  auto out = open_csv(path);
  for (const auto& e : hist.entries)
    out << hist.target << ',' << hist.classes[e.cls].id() << ',' << e.partner << ',' << e.encounter.t_min << ','
        << e.encounter.dr << ',' << e.encounter.dv << '\n';
}

}  // namespace mflab
