#include "mirror/rna_select.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mirror/errors.hpp"

namespace mirror {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not a number '" + s + "'");
  }
}

int n_classes_of(const std::vector<int>& y) {
  int mx = -1;
  for (int v : y) {
    if (v < 0) throw ValidationError("labels must be non-negative class indices");
    mx = std::max(mx, v);
  }
  return mx + 1;
}

}  // namespace

const char* to_string(GeneSource s) {
  switch (s) {
    case GeneSource::rfe:
      return "rfe";
    case GeneSource::curated:
      return "curated";
    case GeneSource::both:
      return "both";
  }
  return "unknown";
}

std::vector<std::string> RfeTrace::elimination_order() const {
  std::vector<std::string> out;
  out.reserve(eliminated.size());
  for (const auto& e : eliminated) out.push_back(e.gene);
  return out;
}

ImportanceModel fit_importance(const Eigen::MatrixXd& x, const std::vector<int>& y, double reg,
                               const SolverOptions& opts) {
  ImportanceModel m;
  m.classifier = fit_linear_classifier(x, y, std::max(2, n_classes_of(y)), reg, opts);
  m.importance = m.classifier.importance();
  return m;
}

RfeTrace rfe(const Eigen::MatrixXd& x, const std::vector<int>& y, const std::vector<std::string>& gene_ids,
             const RfeOptions& opts) {
  const int d = static_cast<int>(x.cols());
  if (static_cast<int>(gene_ids.size()) != d) throw ValidationError("rfe: gene id count differs from column count");
  if (opts.k_target < 1 || opts.k_target >= d)
    throw ValidationError("rfe: k_target must satisfy 1 <= k_target < " + std::to_string(d));
  if (opts.step < 0) throw ValidationError("rfe: step must be >= 1 (or 0 for chunked)");

  std::vector<int> alive(static_cast<std::size_t>(d));
  std::iota(alive.begin(), alive.end(), 0);
  RfeTrace trace;
  int round = 0;
  while (static_cast<int>(alive.size()) > opts.k_target) {
    const int current = static_cast<int>(alive.size());
    const ImportanceModel model = fit_importance(select_cols(x, alive), y, opts.reg, opts.solver);
    int step = opts.step > 0 ? opts.step : std::max(1, current / 10);
    step = std::min(step, current - opts.k_target);
    // Stable ascending order keeps the lower column first among ties.
    std::vector<int> order(static_cast<std::size_t>(current));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return model.importance(a) < model.importance(b); });
    std::vector<char> drop(static_cast<std::size_t>(current), 0);
    for (int k = 0; k < step; ++k) {
      const int pos = order[static_cast<std::size_t>(k)];
      drop[static_cast<std::size_t>(pos)] = 1;
      trace.eliminated.push_back(
          {round, gene_ids[static_cast<std::size_t>(alive[static_cast<std::size_t>(pos)])], model.importance(pos)});
    }
    std::vector<int> next;
    for (int k = 0; k < current; ++k)
      if (!drop[static_cast<std::size_t>(k)]) next.push_back(alive[static_cast<std::size_t>(k)]);
    alive = std::move(next);
    ++round;
  }
  for (int c : alive) trace.survivors.push_back(gene_ids[static_cast<std::size_t>(c)]);
  return trace;
}

RfeCvResult rfe_cv(const Eigen::MatrixXd& x, const std::vector<int>& y, const std::vector<std::string>& gene_ids,
                   const RfeOptions& opts, int folds, std::uint64_t seed) {
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw ValidationError("rfe_cv: label count mismatch");
  const std::vector<int> assignment = stratified_folds(y, folds, seed);
  const int n_classes = std::max(2, n_classes_of(y));
  std::map<std::string, int> column;
  for (std::size_t j = 0; j < gene_ids.size(); ++j) column[gene_ids[j]] = static_cast<int>(j);

  RfeCvResult result;
  double best = -1.0;
  for (int f = 0; f < folds; ++f) {
    std::vector<int> train, test;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      (assignment[i] == f ? test : train).push_back(static_cast<int>(i));
    std::vector<int> y_train, y_test;
    for (int i : train) y_train.push_back(y[static_cast<std::size_t>(i)]);
    for (int i : test) y_test.push_back(y[static_cast<std::size_t>(i)]);
    if (std::set<int>(y_train.begin(), y_train.end()).size() < 2)
      throw ValidationError("rfe_cv: fold " + std::to_string(f) + " training split has a single class");
    const Eigen::MatrixXd x_train = select_rows(x, train);
    RfeTrace trace = rfe(x_train, y_train, gene_ids, opts);
    std::vector<int> cols;
    for (const auto& g : trace.survivors) cols.push_back(column.at(g));
    const LinearClassifier clf =
        fit_linear_classifier(select_cols(x_train, cols), y_train, n_classes, opts.reg, opts.solver);
    const double acc = accuracy(y_test, clf.predict(select_cols(select_rows(x, test), cols)));
    result.trace.cv_scores.emplace_back(opts.k_target, acc);
    if (acc > best) {
      best = acc;
      result.best_fold = f;
      result.trace.eliminated = std::move(trace.eliminated);
      result.trace.survivors = std::move(trace.survivors);
    }
  }
  result.panel.gene_ids = result.trace.survivors;
  result.panel.provenance.assign(result.panel.gene_ids.size(), GeneSource::rfe);
  return result;
}

GenePanel merge_panel(const GenePanel& rfe_panel, const std::vector<std::string>& curated,
                      const std::vector<std::string>& universe) {
  const std::set<std::string> known(universe.begin(), universe.end());
  for (const auto& g : curated)
    if (!known.count(g)) throw ValidationError("curated gene '" + g + "' is not in the dataset gene universe");
  GenePanel out = rfe_panel;
  if (out.provenance.size() != out.gene_ids.size()) out.provenance.assign(out.gene_ids.size(), GeneSource::rfe);
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < out.gene_ids.size(); ++i) position[out.gene_ids[i]] = i;
  for (const auto& g : curated) {
    auto it = position.find(g);
    if (it != position.end()) {
      if (out.provenance[it->second] == GeneSource::rfe) out.provenance[it->second] = GeneSource::both;
      continue;
    }
    position[g] = out.gene_ids.size();
    out.gene_ids.push_back(g);
    out.provenance.push_back(GeneSource::curated);
  }
  if (out.gene_ids.empty()) throw ValidationError("gene panel is empty");
  return out;
}

ExpressionTable read_expression_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  ExpressionTable t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  auto header = split_csv_line(line);
  if (header.size() < 2) throw FormatError(path.string() + ": header needs sample_id and at least one gene");
  t.gene_ids.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    t.sample_ids.push_back(cells[0]);
    std::vector<double> r;
    for (std::size_t j = 1; j < cells.size(); ++j)
      r.push_back(parse_double(cells[j], path.string() + ":" + std::to_string(line_no)));
    rows.push_back(std::move(r));
  }
  t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.gene_ids.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  if (!t.values.allFinite()) throw ValidationError(path.string() + ": non-finite expression value");
  return t;
}

void write_expression_csv(const ExpressionTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "sample_id";
  for (const auto& g : table.gene_ids) out << ',' << g;
  out << '\n';
  out.precision(9);
  for (std::size_t i = 0; i < table.sample_ids.size(); ++i) {
    out << table.sample_ids[i];
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) out << ',' << table.values(static_cast<Eigen::Index>(i), j);
    out << '\n';
  }
}

std::vector<int> read_labels_csv(const std::filesystem::path& path, const std::vector<std::string>& sample_ids) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, int> by_id;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 2) throw FormatError(path.string() + ": expected 'sample_id,label' rows");
    if (cells[0] == "sample_id") continue;
    try {
      by_id[cells[0]] = std::stoi(cells[1]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad label '" + cells[1] + "'");
    }
  }
  std::vector<int> y;
  for (const auto& id : sample_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("no label for sample '" + id + "'");
    y.push_back(it->second);
  }
  return y;
}

std::vector<std::string> read_gene_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const std::string g = trim(line);
    if (g.empty() || g[0] == '#') continue;
    out.push_back(g);
  }
  return out;
}

void write_panel_json(const GenePanel& panel, const std::filesystem::path& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < panel.gene_ids.size(); ++i)
    j.push_back({{"gene_id", panel.gene_ids[i]}, {"provenance", to_string(panel.provenance[i])}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

GenePanel read_panel_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  GenePanel p;
  try {
    for (const auto& e : nlohmann::json::parse(in)) {
      p.gene_ids.push_back(e.at("gene_id").get<std::string>());
      const auto s = e.at("provenance").get<std::string>();
      if (s == "rfe") p.provenance.push_back(GeneSource::rfe);
      else if (s == "curated") p.provenance.push_back(GeneSource::curated);
      else if (s == "both") p.provenance.push_back(GeneSource::both);
      else throw FormatError(path.string() + ": unknown provenance '" + s + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return p;
}

void write_trace_csv(const RfeTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "round,eliminated_gene,importance\n";
  out.precision(17);
  for (const auto& e : trace.eliminated) out << e.round << ',' << e.gene << ',' << e.importance << '\n';
}

}  // namespace mirror
