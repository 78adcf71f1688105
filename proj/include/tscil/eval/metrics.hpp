#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace tscil::eval {

/// a[i][j] = accuracy on task j's test set after training task i (0-based
/// storage, lower-triangular). A joint matrix holds only the final row, which
/// is how the Offline baseline is represented.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t tasks);
  static AccuracyMatrix joint(std::vector<double> final_row);

  std::size_t tasks() const { return tasks_; }
  bool is_joint() const { return joint_; }
  bool defined(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j) const;
  void set(std::size_t i, std::size_t j, double value);
  /// Entries of row i (j <= i).
  std::vector<double> row(std::size_t i) const;
  /// True once every defined entry is set.
  bool complete() const;

  std::string to_csv() const;
  static AccuracyMatrix from_csv(const std::string& text);
  nlohmann::json to_json() const;

 private:
  std::size_t tasks_ = 0;
  bool joint_ = false;
  std::vector<std::optional<double>> cells_;  // tasks x tasks
};

/// Mean of row i (1-based, as in the metric definitions).
double avg_accuracy(const AccuracyMatrix& m, std::size_t i);
/// F_i for i >= 2 (1-based); nullopt for i = 1 and for joint matrices.
std::optional<double> avg_forgetting(const AccuracyMatrix& m, std::size_t i);
/// Diagonal mean; nullopt for joint matrices.
std::optional<double> avg_learning_accuracy(const AccuracyMatrix& m);

struct RunMetrics {
  double A_T = 0.0;
  std::optional<double> F_T;
  std::optional<double> A_cur;
  std::vector<double> A_curve;  // A_1..A_T

  nlohmann::json to_json() const;
};

RunMetrics compute_metrics(const AccuracyMatrix& m);

struct Summary {
  double mean = 0.0;
  std::optional<double> ci95;  // half-width, Student-t; needs >= 2 values
  std::size_t n = 0;

  nlohmann::json to_json() const;
};

Summary summarize(std::span<const double> values);

struct MetricsReport {
  std::optional<Summary> A_T, F_T, A_cur;
  std::vector<Summary> A_curve;
  std::size_t runs = 0;
  std::size_t failures = 0;

  nlohmann::json to_json() const;
};

MetricsReport aggregate(const std::vector<RunMetrics>& runs, std::size_t failures = 0);

}  // namespace tscil::eval
