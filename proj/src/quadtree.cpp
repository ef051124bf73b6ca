#include "quadtree.hpp"

#include <algorithm>
#include <limits>

namespace mflab::detail {

namespace {
constexpr int kMaxDepth = 48;
}

QuadTree::QuadTree(std::span<const Vec2> points, int order, std::size_t leaf_size)
    : points_(points), order_(order), leaf_size_(leaf_size) {
  if (points.empty()) return;
  index_.resize(points.size());
  for (std::uint32_t i = 0; i < index_.size(); ++i) index_[i] = i;
  double lo_x = std::numeric_limits<double>::infinity(), lo_y = lo_x;
  double hi_x = -lo_x, hi_y = -lo_x;
  for (Vec2 q : points) {
    lo_x = std::min(lo_x, q.x);
    lo_y = std::min(lo_y, q.y);
    hi_x = std::max(hi_x, q.x);
    hi_y = std::max(hi_y, q.y);
  }
  double half = 0.5 * std::max(hi_x - lo_x, hi_y - lo_y);
  half = half * (1.0 + 1e-12) + 1e-300;
  nodes_.reserve(2 * points.size() / leaf_size + 16);
  build({0.5 * (lo_x + hi_x), 0.5 * (lo_y + hi_y)}, half, 0,
        static_cast<std::uint32_t>(points.size()), 0);
  moments_.assign(nodes_.size() * (static_cast<std::size_t>(order_) + 1), {0.0, 0.0});
  compute_moments(0);
}

int QuadTree::build(Vec2 center, double half, std::uint32_t begin, std::uint32_t end,
                    int depth) {
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{center, half, begin, end, {-1, -1, -1, -1}});
  if (end - begin <= leaf_size_ || depth >= kMaxDepth) return id;

  // Partition [begin, end) into the four quadrants: (x<cx, y<cy), (x>=cx, y<cy), ...
  auto quadrant = [&](std::uint32_t i) {
    Vec2 q = points_[i];
    return (q.x >= center.x ? 1 : 0) + (q.y >= center.y ? 2 : 0);
  };
  std::uint32_t bounds[5];
  bounds[0] = begin;
  auto first = index_.begin() + begin;
  auto last = index_.begin() + end;
  auto south_end = std::stable_partition(first, last, [&](std::uint32_t i) { return quadrant(i) < 2; });
  auto sw_end = std::stable_partition(first, south_end, [&](std::uint32_t i) { return quadrant(i) == 0; });
  auto nw_end = std::stable_partition(south_end, last, [&](std::uint32_t i) { return quadrant(i) == 2; });
  bounds[1] = static_cast<std::uint32_t>(sw_end - index_.begin());
  bounds[2] = static_cast<std::uint32_t>(south_end - index_.begin());
  bounds[3] = static_cast<std::uint32_t>(nw_end - index_.begin());
  bounds[4] = end;

  double h = 0.5 * half;
  const Vec2 offsets[4] = {{-h, -h}, {h, -h}, {-h, h}, {h, h}};
  for (int c = 0; c < 4; ++c) {
    if (bounds[c] == bounds[c + 1]) continue;
    int child = build(center + offsets[c], h, bounds[c], bounds[c + 1], depth + 1);
    nodes_[id].child[c] = child;
  }
  return id;
}

void QuadTree::compute_moments(int id) {
  using cplx = std::complex<double>;
  const std::size_t stride = static_cast<std::size_t>(order_) + 1;
  Node node = nodes_[id];
  cplx* alpha = &moments_[static_cast<std::size_t>(id) * stride];
  if (node.leaf()) {
    for (std::uint32_t k = node.begin; k < node.end; ++k) {
      Vec2 d = points_[index_[k]] - node.center;
      cplx u(d.x, d.y);
      cplx pw(1.0, 0.0);
      for (int j = 0; j <= order_; ++j) {
        alpha[j] += pw;
        pw *= u;
      }
    }
    return;
  }
  // Shift child moments: (z - c) = (z - c') + (c' - c).
  std::vector<double> binom(stride * stride, 0.0);
  for (std::size_t k = 0; k < stride; ++k) {
    binom[k * stride] = 1.0;
    for (std::size_t l = 1; l <= k; ++l)
      binom[k * stride + l] = binom[(k - 1) * stride + l - 1] + (l < k ? binom[(k - 1) * stride + l] : 0.0);
  }
  for (int c = 0; c < 4; ++c) {
    int child = node.child[c];
    if (child < 0) continue;
    compute_moments(child);
    const cplx* beta = &moments_[static_cast<std::size_t>(child) * stride];
    Vec2 s = nodes_[child].center - node.center;
    cplx shift(s.x, s.y);
    std::vector<cplx> pw(stride);
    pw[0] = 1.0;
    for (std::size_t j = 1; j < stride; ++j) pw[j] = pw[j - 1] * shift;
    for (std::size_t k = 0; k < stride; ++k)
      for (std::size_t l = 0; l <= k; ++l) alpha[k] += binom[k * stride + l] * beta[l] * pw[k - l];
  }
}

}  // namespace mflab::detail
