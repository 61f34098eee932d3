#include "ssdiff/knn.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <queue>

#include "ssdiff/error.hpp"

namespace ssdiff::knn {

KdTree::KdTree(PointMatrix points, Metric metric, int leaf_size)
    : points_(std::move(points)), metric_(metric), leaf_size_(std::max(1, leaf_size)) {
  if (points_.rows() == 0 || points_.cols() == 0) {
    throw Error(ErrorCode::InvalidInput, "kd-tree needs a non-empty point set");
  }
  index_.resize(static_cast<std::size_t>(points_.rows()));
  std::iota(index_.begin(), index_.end(), 0);
  nodes_.reserve(2 * index_.size() / leaf_size_ + 2);
  build(0, static_cast<int>(index_.size()));
}

int KdTree::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{});
  const int d = dim();
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(d, std::numeric_limits<double>::infinity());
  Eigen::VectorXd hi = -lo;
  for (int i = begin; i < end; ++i) {
    const auto row = points_.row(index_[i]).transpose();
    lo = lo.cwiseMin(row);
    hi = hi.cwiseMax(row);
  }
  Node node;
  node.begin = begin;
  node.end = end;
  if (end - begin > leaf_size_) {
    Eigen::Index axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] > lo[axis]) {
      const int mid = begin + (end - begin) / 2;
      std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                       [&](int a, int b) { return points_(a, axis) < points_(b, axis); });
      node.split_dim = static_cast<int>(axis);
      node.split = points_(index_[mid], axis);
      node.lo = std::move(lo);
      node.hi = std::move(hi);
      nodes_[id] = node;
      const int left = build(begin, mid);
      const int right = build(mid, end);
      nodes_[id].left = left;
      nodes_[id].right = right;
      return id;
    }
  }
  node.lo = std::move(lo);
  node.hi = std::move(hi);
  nodes_[id] = std::move(node);
  return id;
}

double KdTree::distance(const double* a, const double* b) const {
  const int d = dim();
  if (metric_ == Metric::Chebyshev) {
    double m = 0.0;
    for (int i = 0; i < d; ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
  }
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double KdTree::kth_distance(const double* q, int k, Eigen::Index exclude) const {
  if (k < 1 || k >= size() + (exclude < 0 ? 1 : 0)) {
    throw Error(ErrorCode::InvalidInput, "k must be in [1, N)");
  }
  std::priority_queue<double> best;
  const int d = dim();
  const auto box_gap = [&](const Node& n) {
    double m = 0.0;
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
      const double g = std::max({n.lo[i] - q[i], q[i] - n.hi[i], 0.0});
      m = std::max(m, g);
      s += g * g;
    }
    return metric_ == Metric::Chebyshev ? m : std::sqrt(s);
  };
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& n = nodes_[stack.back()];
    stack.pop_back();
    if (static_cast<int>(best.size()) == k && box_gap(n) > best.top()) continue;
    if (n.left < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int j = index_[i];
        if (j == exclude) continue;
        const double dist = distance(q, points_.row(j).data());
        if (static_cast<int>(best.size()) < k) {
          best.push(dist);
        } else if (dist < best.top()) {
          best.pop();
          best.push(dist);
        }
      }
      continue;
    }
    // Visit the nearer child last so it is popped first.
    const bool go_left = q[n.split_dim] < n.split;
    stack.push_back(go_left ? n.right : n.left);
    stack.push_back(go_left ? n.left : n.right);
  }
  return best.top();
}

long KdTree::count_within(const double* q, double r, bool strict, Eigen::Index exclude) const {
  const int d = dim();
  const auto inside = [&](double dist) { return strict ? dist < r : dist <= r; };
  long count = 0;
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& n = nodes_[stack.back()];
    stack.pop_back();
    double gap_max = 0.0, gap_sq = 0.0, far_max = 0.0, far_sq = 0.0;
    for (int i = 0; i < d; ++i) {
      const double g = std::max({n.lo[i] - q[i], q[i] - n.hi[i], 0.0});
      const double f = std::max(std::abs(q[i] - n.lo[i]), std::abs(q[i] - n.hi[i]));
      gap_max = std::max(gap_max, g);
      gap_sq += g * g;
      far_max = std::max(far_max, f);
      far_sq += f * f;
    }
    const double gap = metric_ == Metric::Chebyshev ? gap_max : std::sqrt(gap_sq);
    const double far = metric_ == Metric::Chebyshev ? far_max : std::sqrt(far_sq);
    if (!inside(gap)) continue;
    if (inside(far)) {
      count += n.end - n.begin;
      if (exclude >= 0) {
        for (int i = n.begin; i < n.end; ++i) {
          if (index_[i] == exclude) {
            --count;
            break;
          }
        }
      }
      continue;
    }
    if (n.left < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int j = index_[i];
        if (j != exclude && inside(distance(q, points_.row(j).data()))) ++count;
      }
      continue;
    }
    stack.push_back(n.left);
    stack.push_back(n.right);
  }
  return count;
}

}  // namespace ssdiff::knn
