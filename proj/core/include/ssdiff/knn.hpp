#pragma once

#include <vector>

#include <Eigen/Dense>

namespace ssdiff::knn {

enum class Metric { Chebyshev, Euclidean };

using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class KdTree {
 public:
  KdTree(PointMatrix points, Metric metric, int leaf_size = 16);

  // Distance from q to its k-th nearest point, skipping index `exclude` (-1 for none).
  [[nodiscard]] double kth_distance(const double* q, int k, Eigen::Index exclude = -1) const;
  // Number of points within distance r of q (strictly inside when `strict`), skipping `exclude`.
  [[nodiscard]] long count_within(const double* q, double r, bool strict,
                                  Eigen::Index exclude = -1) const;

  [[nodiscard]] Eigen::Index size() const { return points_.rows(); }
  [[nodiscard]] int dim() const { return static_cast<int>(points_.cols()); }
  [[nodiscard]] const PointMatrix& points() const { return points_; }

 private:
  struct Node {
    int begin = 0;
    int end = 0;
    int split_dim = -1;
    double split = 0.0;
    int left = -1;
    int right = -1;
    Eigen::VectorXd lo;
    Eigen::VectorXd hi;
  };

  int build(int begin, int end);
  [[nodiscard]] double distance(const double* a, const double* b) const;

  PointMatrix points_;
  Metric metric_;
  int leaf_size_;
  std::vector<int> index_;
  std::vector<Node> nodes_;
};

}  // namespace ssdiff::knn
