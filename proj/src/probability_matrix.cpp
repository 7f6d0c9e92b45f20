#include "killchain/probability_matrix.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "killchain/error.hpp"

namespace killchain {

namespace {

std::string format_sum(double sum) {
  std::ostringstream os;
  os.precision(10);
  os << sum;
  return os.str();
}

}  // namespace

ProbabilityMatrix::ProbabilityMatrix(std::vector<std::string> sample_ids, std::vector<std::string> labels,
                                     std::vector<double> values)
    : sample_ids_(std::move(sample_ids)), labels_(std::move(labels)), values_(std::move(values)) {
  if (values_.size() != sample_ids_.size() * labels_.size()) {
    fail(ErrorKind::Contract, "probability matrix: value count does not match rows x labels");
  }
  if (std::set<std::string>(labels_.begin(), labels_.end()).size() != labels_.size()) {
    fail(ErrorKind::Validation, "probability matrix: duplicate label");
  }
  if (std::set<std::string>(sample_ids_.begin(), sample_ids_.end()).size() != sample_ids_.size()) {
    fail(ErrorKind::Validation, "probability matrix: duplicate sample id");
  }
  if (labels_.empty() && !sample_ids_.empty()) fail(ErrorKind::Validation, "probability matrix: no labels");
  for (std::size_t r = 0; r < rows(); ++r) {
    double sum = 0.0;
    for (double p : row(r)) {
      if (!(p >= 0.0 && p <= 1.0)) {
        fail(ErrorKind::Validation, "probability matrix: entry outside [0, 1] in row '" + sample_ids_[r] + "'");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowSumTolerance) {
      fail(ErrorKind::Validation, "probability matrix: row '" + sample_ids_[r] + "' sums to " + format_sum(sum));
    }
  }
}

std::optional<std::size_t> ProbabilityMatrix::label_index(std::string_view label) const {
  for (std::size_t c = 0; c < labels_.size(); ++c) {
    if (labels_[c] == label) return c;
  }
  return std::nullopt;
}

std::size_t argmax_with_ties(std::span<const double> row, const std::vector<std::string>& labels) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best] || (row[c] == row[best] && labels[c] < labels[best])) best = c;
  }
  return best;
}

std::size_t ProbabilityMatrix::argmax(std::size_t r) const { return argmax_with_ties(row(r), labels_); }

std::vector<std::string> ProbabilityMatrix::argmax_labels() const {
  std::vector<std::string> out;
  out.reserve(rows());
  for (std::size_t r = 0; r < rows(); ++r) out.push_back(labels_[argmax(r)]);
  return out;
}

std::string write_probability_matrix(const ProbabilityMatrix& matrix, Phase phase) {
  std::string out;
  nlohmann::ordered_json header;
  header["labels"] = matrix.labels();
  header["phase"] = std::string(phase_name(phase));
  out += header.dump();
  out.push_back('\n');
  for (std::size_t r = 0; r < matrix.rows(); ++r) {
    nlohmann::ordered_json line;
    line["sample_id"] = matrix.sample_ids()[r];
    auto& probs = line["probs"] = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < matrix.cols(); ++c) probs[matrix.labels()[c]] = matrix.at(r, c);
    out += line.dump();
    out.push_back('\n');
  }
  return out;
}

ProbabilityMatrix parse_probability_matrix(std::string_view jsonl,
                                           const std::vector<std::string>& expected_labels,
                                           const std::vector<std::string>& expected_sample_ids) {
  std::map<std::string, std::size_t> label_pos;
  for (std::size_t c = 0; c < expected_labels.size(); ++c) label_pos[expected_labels[c]] = c;
  std::map<std::string, std::size_t> id_pos;
  for (std::size_t r = 0; r < expected_sample_ids.size(); ++r) id_pos[expected_sample_ids[r]] = r;

  const std::size_t cols = expected_labels.size();
  std::vector<double> values(expected_sample_ids.size() * cols, 0.0);
  std::vector<bool> covered(expected_sample_ids.size(), false);

  std::size_t line_no = 0;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos < jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto where = [&] { return "probability matrix line " + std::to_string(line_no) + ": "; };
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::Parse, where() + e.what());
    }
    if (!header_seen) {
      if (!obj.is_object() || !obj.contains("labels") || !obj["labels"].is_array()) {
        fail(ErrorKind::Format, where() + "expected header {\"labels\": [...], \"phase\": ...}");
      }
      std::set<std::string> header_labels;
      for (const auto& l : obj["labels"]) {
        if (!l.is_string()) fail(ErrorKind::Format, where() + "header labels must be strings");
        header_labels.insert(l.get<std::string>());
      }
      for (const auto& l : header_labels) {
        if (!label_pos.contains(l)) fail(ErrorKind::Format, where() + "unknown label '" + l + "' in header");
      }
      if (header_labels.size() != expected_labels.size()) {
        fail(ErrorKind::Format, where() + "header label set differs from the expected labels");
      }
      header_seen = true;
      continue;
    }
    if (!obj.is_object() || !obj.contains("sample_id") || !obj["sample_id"].is_string() ||
        !obj.contains("probs") || !obj["probs"].is_object()) {
      fail(ErrorKind::Format, where() + "expected {\"sample_id\": string, \"probs\": {...}}");
    }
    std::string id = obj["sample_id"].get<std::string>();
    auto row_it = id_pos.find(id);
    if (row_it == id_pos.end()) fail(ErrorKind::Validation, where() + "unexpected sample id '" + id + "'");
    std::size_t r = row_it->second;
    if (covered[r]) fail(ErrorKind::Validation, where() + "duplicate sample id '" + id + "'");
    std::vector<bool> seen(cols, false);
    double sum = 0.0;
    for (const auto& [label, p] : obj["probs"].items()) {
      auto col_it = label_pos.find(label);
      if (col_it == label_pos.end()) fail(ErrorKind::Format, where() + "unknown label '" + label + "'");
      if (!p.is_number()) fail(ErrorKind::Format, where() + "probability for '" + label + "' is not a number");
      double v = p.get<double>();
      if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::Validation, where() + "probability outside [0, 1]");
      values[r * cols + col_it->second] = v;
      seen[col_it->second] = true;
      sum += v;
    }
    for (std::size_t c = 0; c < cols; ++c) {
      if (!seen[c]) fail(ErrorKind::Format, where() + "row '" + id + "' is missing label '" + expected_labels[c] + "'");
    }
    if (std::abs(sum - 1.0) > kRowSumTolerance) {
      fail(ErrorKind::Validation, where() + "row '" + id + "' sums to " + format_sum(sum));
    }
    covered[r] = true;
  }
  if (!header_seen && !expected_sample_ids.empty()) fail(ErrorKind::Format, "probability matrix: missing header line");

  std::string missing;
  for (std::size_t r = 0; r < covered.size(); ++r) {
    if (!covered[r]) missing += (missing.empty() ? "" : ", ") + expected_sample_ids[r];
  }
  if (!missing.empty()) fail(ErrorKind::Validation, "probability matrix does not cover samples: " + missing);
  return ProbabilityMatrix(expected_sample_ids, expected_labels, std::move(values));
}

ProbabilityMatrix load_probability_matrix(const std::filesystem::path& file,
                                          const std::vector<std::string>& expected_labels,
                                          const std::vector<std::string>& expected_sample_ids) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open probability matrix " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_probability_matrix(buf.str(), expected_labels, expected_sample_ids);
}

}  // namespace killchain
