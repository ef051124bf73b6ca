#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include "mflab/vec2.hpp"

namespace mflab::detail {

/// Quadtree over unit-weight sources carrying complex multipole moments
/// alpha_k = sum_m (z_m - c)^k about each cell centre c. The far field of
/// sum_m 1/(z - z_m) is sum_k alpha_k / (z - c)^(k+1).
class QuadTree {
 public:
  QuadTree(std::span<const Vec2> points, int order, std::size_t leaf_size = 8);

  /// Sum over sources i != self of the cut-off force f(z - z_i) / a, where
  /// cells farther than `exact_radius` from z (box distance) and passing the
  /// opening test size/dist < theta are replaced by their expansion of the
  /// un-cut kernel. `exact_pair(d)` returns f(d)/a for the near field.
  template <class ExactPair>
  Vec2 evaluate(Vec2 z, std::size_t self, double theta, double exact_radius,
                ExactPair&& exact_pair) const;

 private:
  struct Node {
    Vec2 center;
    double half = 0.0;
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::int32_t child[4] = {-1, -1, -1, -1};
    bool leaf() const { return child[0] < 0 && child[1] < 0 && child[2] < 0 && child[3] < 0; }
  };

  int build(Vec2 center, double half, std::uint32_t begin, std::uint32_t end, int depth);
  void compute_moments(int node);

  std::span<const Vec2> points_;
  int order_;
  std::size_t leaf_size_;
  std::vector<std::uint32_t> index_;
  std::vector<Node> nodes_;
  std::vector<std::complex<double>> moments_;  // (order+1) per node
};

template <class ExactPair>
Vec2 QuadTree::evaluate(Vec2 z, std::size_t self, double theta, double exact_radius,
                        ExactPair&& exact_pair) const {
  using cplx = std::complex<double>;
  Vec2 near{};
  cplx far{0.0, 0.0};
  if (nodes_.empty()) return near;
  int stack[256];
  int top = 0;
  stack[top++] = 0;
  const std::size_t stride = static_cast<std::size_t>(order_) + 1;
  while (top > 0) {
    const Node& node = nodes_[stack[--top]];
    if (node.begin == node.end) continue;
    Vec2 d = z - node.center;
    double dist = norm(d);
    double gap_x = std::abs(d.x) - node.half;
    double gap_y = std::abs(d.y) - node.half;
    double gx = gap_x > 0 ? gap_x : 0.0;
    double gy = gap_y > 0 ? gap_y : 0.0;
    double box_dist = std::sqrt(gx * gx + gy * gy);
    if (box_dist > exact_radius && 2.0 * node.half < theta * dist) {
      const cplx* alpha = &moments_[static_cast<std::size_t>(&node - nodes_.data()) * stride];
      cplx w = 1.0 / cplx(d.x, d.y);
      cplx acc = alpha[order_];
      for (int k = order_ - 1; k >= 0; --k) acc = alpha[k] + w * acc;
      far += w * acc;
      continue;
    }
    if (node.leaf()) {
      for (std::uint32_t k = node.begin; k < node.end; ++k) {
        std::uint32_t i = index_[k];
        if (i == self) continue;
        near += exact_pair(z - points_[i]);
      }
      continue;
    }
    for (int c = 0; c < 4; ++c)
      if (node.child[c] >= 0) stack[top++] = node.child[c];
  }
  // sum 1/(z - z_m) is the complex conjugate of sum (z - z_m)/|z - z_m|^2.
  return near + Vec2{far.real(), -far.imag()};
}

}  // namespace mflab::detail
