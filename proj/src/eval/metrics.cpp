#include "tscil/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "tscil/core/errors.hpp"

namespace tscil::eval {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) : tasks_(tasks), cells_(tasks * tasks) {}

AccuracyMatrix AccuracyMatrix::joint(std::vector<double> final_row) {
  AccuracyMatrix m(final_row.size());
  m.joint_ = true;
  for (std::size_t j = 0; j < final_row.size(); ++j) m.set(m.tasks_ - 1, j, final_row[j]);
  return m;
}

bool AccuracyMatrix::defined(std::size_t i, std::size_t j) const {
  if (i >= tasks_ || j > i) return false;
  return !joint_ || i + 1 == tasks_;
}

double AccuracyMatrix::at(std::size_t i, std::size_t j) const {
  if (!defined(i, j) || !cells_[i * tasks_ + j]) {
    throw std::out_of_range("accuracy entry (" + std::to_string(i) + "," + std::to_string(j) + ") is undefined");
  }
  return *cells_[i * tasks_ + j];
}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double value) {
  if (!defined(i, j)) throw std::out_of_range("accuracy entry outside the lower triangle");
  if (!(value >= 0.0 && value <= 1.0)) throw ContractError("accuracy must lie in [0, 1]");
  cells_[i * tasks_ + j] = value;
}

std::vector<double> AccuracyMatrix::row(std::size_t i) const {
  std::vector<double> r;
  for (std::size_t j = 0; j <= i; ++j) r.push_back(at(i, j));
  return r;
}

bool AccuracyMatrix::complete() const {
  for (std::size_t i = 0; i < tasks_; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (defined(i, j) && !cells_[i * tasks_ + j]) return false;
    }
  }
  return tasks_ > 0;
}

std::string AccuracyMatrix::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t j = 0; j < tasks_; ++j) os << (j ? "," : "") << "task_" << (j + 1);
  os << "\n";
  for (std::size_t i = 0; i < tasks_; ++i) {
    if (joint_ && i + 1 != tasks_) continue;
    for (std::size_t j = 0; j < tasks_; ++j) {
      if (j) os << ",";
      if (defined(i, j) && cells_[i * tasks_ + j]) os << *cells_[i * tasks_ + j];
    }
    os << "\n";
  }
  return os.str();
}

AccuracyMatrix AccuracyMatrix::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("empty accuracy matrix file");
  const std::size_t tasks = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  std::vector<std::vector<std::optional<double>>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::optional<double>> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell.empty() ? std::nullopt : std::optional<double>(std::stod(cell)));
    row.resize(tasks);
    rows.push_back(std::move(row));
  }
  if (rows.size() == 1 && tasks > 1) {
    std::vector<double> r;
    for (const auto& c : rows[0]) {
      if (!c) throw ValidationError("joint accuracy row has gaps");
      r.push_back(*c);
    }
    return joint(r);
  }
  if (rows.size() != tasks) throw ValidationError("accuracy matrix has " + std::to_string(rows.size()) + " rows for " + std::to_string(tasks) + " tasks");
  AccuracyMatrix m(tasks);
  for (std::size_t i = 0; i < tasks; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (rows[i][j]) m.set(i, j, *rows[i][j]);
    }
  }
  return m;
}

nlohmann::json AccuracyMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < tasks_; ++i) {
    if (joint_ && i + 1 != tasks_) continue;
    rows.push_back(row(i));
  }
  return {{"tasks", tasks_}, {"joint", joint_}, {"rows", rows}};
}

double avg_accuracy(const AccuracyMatrix& m, std::size_t i) {
  if (i < 1 || i > m.tasks()) throw std::out_of_range("avg_accuracy: task index out of range");
  const auto r = m.row(i - 1);
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(r.size());
}

std::optional<double> avg_forgetting(const AccuracyMatrix& m, std::size_t i) {
  if (i < 1 || i > m.tasks()) throw std::out_of_range("avg_forgetting: task index out of range");
  if (i == 1 || m.is_joint()) return std::nullopt;
  double s = 0.0;
  for (std::size_t j = 0; j + 1 < i; ++j) {
    double best = m.at(j, j);
    for (std::size_t k = j + 1; k + 1 < i; ++k) best = std::max(best, m.at(k, j));
    s += best - m.at(i - 1, j);
  }
  return s / static_cast<double>(i - 1);
}

std::optional<double> avg_learning_accuracy(const AccuracyMatrix& m) {
  if (m.is_joint() || m.tasks() == 0) return std::nullopt;
  double s = 0.0;
  for (std::size_t i = 0; i < m.tasks(); ++i) s += m.at(i, i);
  return s / static_cast<double>(m.tasks());
}

nlohmann::json RunMetrics::to_json() const {
  nlohmann::json j = {{"A_T", A_T}, {"A_curve", A_curve}};
  j["F_T"] = F_T ? nlohmann::json(*F_T) : nlohmann::json(nullptr);
  j["A_cur"] = A_cur ? nlohmann::json(*A_cur) : nlohmann::json(nullptr);
  return j;
}

RunMetrics compute_metrics(const AccuracyMatrix& m) {
  RunMetrics r;
  const std::size_t t = m.tasks();
  r.A_T = avg_accuracy(m, t);
  r.F_T = avg_forgetting(m, t);
  r.A_cur = avg_learning_accuracy(m);
  if (m.is_joint()) {
    r.A_curve = {r.A_T};
  } else {
    for (std::size_t i = 1; i <= t; ++i) r.A_curve.push_back(avg_accuracy(m, i));
  }
  return r;
}

nlohmann::json Summary::to_json() const {
  nlohmann::json j = {{"mean", mean}, {"n", n}};
  j["ci95"] = ci95 ? nlohmann::json(*ci95) : nlohmann::json(nullptr);
  return j;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  if (s.n >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    boost::math::students_t dist(static_cast<double>(s.n - 1));
    s.ci95 = boost::math::quantile(boost::math::complement(dist, 0.025)) * sd / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

nlohmann::json MetricsReport::to_json() const {
  auto opt = [](const std::optional<Summary>& s) { return s ? s->to_json() : nlohmann::json(nullptr); };
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& s : A_curve) curve.push_back(s.to_json());
  return {{"A_T", opt(A_T)},     {"F_T", opt(F_T)},   {"A_cur", opt(A_cur)}, {"A_curve", curve},
          {"runs", runs},        {"failures", failures}, {"ci", "95% Student-t over seeds"}};
}

MetricsReport aggregate(const std::vector<RunMetrics>& runs, std::size_t failures) {
  MetricsReport r;
  r.runs = runs.size();
  r.failures = failures;
  if (runs.empty()) return r;
  std::vector<double> at, ft, ac;
  for (const auto& m : runs) {
    at.push_back(m.A_T);
    if (m.F_T) ft.push_back(*m.F_T);
    if (m.A_cur) ac.push_back(*m.A_cur);
  }
  r.A_T = summarize(at);
  if (ft.size() == runs.size()) r.F_T = summarize(ft);
  if (ac.size() == runs.size()) r.A_cur = summarize(ac);
  std::size_t len = runs.front().A_curve.size();
  for (const auto& m : runs) len = std::min(len, m.A_curve.size());
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> v;
    for (const auto& m : runs) v.push_back(m.A_curve[i]);
    r.A_curve.push_back(summarize(v));
  }
  return r;
}

}  // namespace tscil::eval
