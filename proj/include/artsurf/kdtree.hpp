#pragma once

#include <algorithm>
#include <queue>
#include <vector>

#include "artsurf/core.hpp"

namespace artsurf {

// Median-split kd-tree for exact nearest-neighbour queries.
class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& points) : pts_(points) {
    idx_.resize(pts_.size());
    for (size_t i = 0; i < idx_.size(); ++i) idx_[i] = static_cast<int>(i);
    nodes_.reserve(pts_.size() * 2);
    if (!pts_.empty()) root_ = build(0, static_cast<int>(pts_.size()));
  }

  int nearest(const Vec3& q, double* dist2_out = nullptr) const {
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    search(root_, q, best, best_d2);
    if (dist2_out) *dist2_out = best_d2;
    return best;
  }

  void knearest(const Vec3& q, int k, std::vector<int>& out) const {
    // max-heap of (dist2, index)
    std::priority_queue<std::pair<double, int>> heap;
    ksearch(root_, q, k, heap);
    out.resize(heap.size());
    for (size_t i = out.size(); i-- > 0;) {
      out[i] = heap.top().second;
      heap.pop();
    }
  }

 private:
  struct Node {
    int axis = -1;       // -1: leaf
    double split = 0;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range into idx_
  };

  static constexpr int kLeaf = 16;

  int build(int begin, int end) {
    Node n;
    Bounds3 b;
    for (int i = begin; i < end; ++i) b.expand(pts_[idx_[i]]);
    if (end - begin <= kLeaf) {
      n.begin = begin;
      n.end = end;
      nodes_.push_back(n);
      return static_cast<int>(nodes_.size()) - 1;
    }
    Vec3 ext = b.extent();
    int axis = ext.x >= ext.y && ext.x >= ext.z ? 0 : (ext.y >= ext.z ? 1 : 2);
    int mid = (begin + end) / 2;
    std::nth_element(idx_.begin() + begin, idx_.begin() + mid, idx_.begin() + end,
                     [&](int a, int c) {
                       double va = pts_[a][axis], vc = pts_[c][axis];
                       return va != vc ? va < vc : a < c;
                     });
    n.axis = axis;
    n.split = pts_[idx_[mid]][axis];
    int self = static_cast<int>(nodes_.size());
    nodes_.push_back(n);
    int l = build(begin, mid);
    int r = build(mid, end);
    nodes_[self].left = l;
    nodes_[self].right = r;
    return self;
  }

  void search(int ni, const Vec3& q, int& best, double& best_d2) const {
    if (ni < 0) return;
    const Node& n = nodes_[ni];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        double d2 = norm2(pts_[idx_[i]] - q);
        if (d2 < best_d2 || (d2 == best_d2 && idx_[i] < best)) {
          best_d2 = d2;
          best = idx_[i];
        }
      }
      return;
    }
    double diff = q[n.axis] - n.split;
    int near = diff < 0 ? n.left : n.right;
    int far = diff < 0 ? n.right : n.left;
    search(near, q, best, best_d2);
    if (diff * diff <= best_d2) search(far, q, best, best_d2);
  }

  void ksearch(int ni, const Vec3& q, int k,
               std::priority_queue<std::pair<double, int>>& heap) const {
    if (ni < 0) return;
    const Node& n = nodes_[ni];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        double d2 = norm2(pts_[idx_[i]] - q);
        if (static_cast<int>(heap.size()) < k)
          heap.push({d2, idx_[i]});
        else if (d2 < heap.top().first) {
          heap.pop();
          heap.push({d2, idx_[i]});
        }
      }
      return;
    }
    double diff = q[n.axis] - n.split;
    int near = diff < 0 ? n.left : n.right;
    int far = diff < 0 ? n.right : n.left;
    ksearch(near, q, k, heap);
    if (static_cast<int>(heap.size()) < k || diff * diff <= heap.top().first)
      ksearch(far, q, k, heap);
  }

  std::vector<Vec3> pts_;
  std::vector<int> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace artsurf
