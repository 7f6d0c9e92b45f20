#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "killchain/chain_graph.hpp"
#include "killchain/embedding.hpp"
#include "killchain/ensemble.hpp"
#include "killchain/error.hpp"
#include "killchain/gbdt.hpp"
#include "killchain/narrative.hpp"
#include "killchain/phase.hpp"
#include "killchain/probability_matrix.hpp"
#include "killchain/scorers.hpp"
#include "killchain/text.hpp"

namespace py = pybind11;
using namespace killchain;
using nlohmann::json;

namespace {

PyObject* g_error_type = nullptr;

py::object to_python(const nlohmann::ordered_json& doc) {
  return py::module_::import("json").attr("loads")(doc.dump());
}

json from_python(const py::object& obj) {
  if (obj.is_none()) return json::object();
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

TrainingData training_data(std::vector<EmbeddingVector> features, std::vector<std::string> labels) {
  return {std::move(features), std::move(labels)};
}

}  // namespace

PYBIND11_MODULE(_killchain, m) {
  m.doc() = "Phase-aware kill-chain inference engine";

  g_error_type = PyErr_NewException("killchain.KillchainError", PyExc_RuntimeError, nullptr);
  m.add_object("KillchainError", py::handle(g_error_type));
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object inst = py::reinterpret_borrow<py::object>(g_error_type)(e.what());
      inst.attr("kind") = std::string(to_string(e.kind()));
      PyErr_SetObject(g_error_type, inst.ptr());
    }
  });

  py::enum_<Phase>(m, "Phase")
      .value("Reconnaissance", Phase::Reconnaissance)
      .value("Weaponization", Phase::Weaponization)
      .value("Delivery", Phase::Delivery)
      .value("Exploitation", Phase::Exploitation)
      .value("Installation", Phase::Installation)
      .value("CommandAndControl", Phase::CommandAndControl)
      .value("ActionsOnObjectives", Phase::ActionsOnObjectives);
  m.def("phase_name", [](Phase p) { return std::string(phase_name(p)); });
  m.def("parse_phase", [](const std::string& name) { return parse_phase(name); });
  m.def("all_phases", [] { return std::vector<Phase>(kAllPhases.begin(), kAllPhases.end()); });

  m.def("preprocess", [](const std::string& s) { return preprocess(s); });
  m.def("tokenize", [](const std::string& s) { return tokenize(s); });
  m.def("segment", [](const std::string& s) { return segment(s); }, "Split a narrative into cleaned clauses.");

  py::class_<TfidfModel>(m, "TfidfModel")
      .def_property_readonly("dim", &TfidfModel::dim)
      .def_property_readonly("vocabulary_size", &TfidfModel::vocabulary_size)
      .def("embed", [](const TfidfModel& t, const std::string& s) { return t.embed(s); })
      .def("idf", [](const TfidfModel& t, const std::string& token) { return t.idf(token); })
      .def("to_json", [](const TfidfModel& t) { return to_python(t.to_json()); });
  m.def("fit_tfidf", [](const std::vector<std::string>& corpus, std::size_t dim) { return fit_tfidf(corpus, dim); },
        py::arg("corpus"), py::arg("dim"));
  m.def("cosine_similarity",
        [](const std::vector<double>& u, const std::vector<double>& v) { return cosine_similarity(u, v); });

  py::class_<ProbabilityMatrix>(m, "ProbabilityMatrix")
      .def(py::init<std::vector<std::string>, std::vector<std::string>, std::vector<double>>(), py::arg("sample_ids"),
           py::arg("labels"), py::arg("values"))
      .def_property_readonly("sample_ids", &ProbabilityMatrix::sample_ids)
      .def_property_readonly("labels", &ProbabilityMatrix::labels)
      .def_property_readonly("values", &ProbabilityMatrix::values)
      .def_property_readonly("shape", [](const ProbabilityMatrix& p) { return py::make_tuple(p.rows(), p.cols()); })
      .def("row", [](const ProbabilityMatrix& p, std::size_t r) {
        if (r >= p.rows()) throw py::index_error("row out of range");
        auto row = p.row(r);
        return std::vector<double>(row.begin(), row.end());
      })
      .def("argmax_labels", &ProbabilityMatrix::argmax_labels)
      .def("to_jsonl", [](const ProbabilityMatrix& p, Phase phase) { return write_probability_matrix(p, phase); })
      .def("__eq__", [](const ProbabilityMatrix& a, const ProbabilityMatrix& b) { return a == b; });
  m.def("parse_probability_matrix",
        [](const std::string& text, const std::vector<std::string>& labels, const std::vector<std::string>& ids) {
          return parse_probability_matrix(text, labels, ids);
        },
        py::arg("text"), py::arg("labels"), py::arg("sample_ids"));

  m.def("multiclass_log_loss",
        [](const ProbabilityMatrix& p, const std::vector<std::string>& truth,
           std::optional<std::vector<double>> weights) {
          if (weights) return multiclass_log_loss(p, truth, std::span<const double>(*weights));
          return multiclass_log_loss(p, truth);
        },
        py::arg("probabilities"), py::arg("truth"), py::arg("weights") = py::none());
  m.def("evaluate",
        [](const std::vector<std::string>& pred, const std::vector<std::string>& truth,
           const std::vector<std::string>& labels) { return to_python(evaluate(pred, truth, labels).to_json()); },
        py::arg("predictions"), py::arg("truth"), py::arg("label_set"));
  m.def("fit_weights_from_f1",
        [](Phase phase, const std::map<std::string, double>& f1) { return fit_weights_from_f1(phase, f1).weights; },
        py::arg("phase"), py::arg("f1"));
  m.def("soft_vote",
        [](const std::map<std::string, ProbabilityMatrix>& matrices, const std::map<std::string, double>& weights) {
          EnsembleWeights w;
          w.weights = weights;
          VoteResult r = soft_vote(matrices, w);
          return py::make_tuple(r.fused, r.predictions);
        },
        py::arg("matrices"), py::arg("weights"), "Weighted average of scorer matrices; returns (fused, predictions).");

  py::class_<GbdtModel>(m, "GbdtModel")
      .def_property_readonly("classes", &GbdtModel::classes)
      .def_property_readonly("best_round", &GbdtModel::best_round)
      .def("predict_proba", [](const GbdtModel& g, const std::vector<double>& x) { return g.predict_proba(x); })
      .def("to_json", [](const GbdtModel& g) { return to_python(g.to_json()); });
  m.def("train_gbdt",
        [](std::vector<EmbeddingVector> features, std::vector<std::string> labels, const py::object& config,
           std::optional<std::vector<EmbeddingVector>> valid_features,
           std::optional<std::vector<std::string>> valid_labels) {
          GbdtConfig cfg = GbdtConfig::from_json(from_python(config));
          TrainingData train = training_data(std::move(features), std::move(labels));
          std::optional<TrainingData> valid;
          if (valid_features && valid_labels) valid = training_data(*valid_features, *valid_labels);
          GbdtResult r = train_gbdt(train, cfg, valid ? &*valid : nullptr);
          return py::make_tuple(r.model, to_python(r.report.to_json()));
        },
        py::arg("features"), py::arg("labels"), py::arg("config") = py::none(),
        py::arg("valid_features") = py::none(), py::arg("valid_labels") = py::none(),
        "Returns (model, report).");

  py::class_<SoftmaxRegressionModel>(m, "SoftmaxRegressionModel")
      .def_readonly("classes", &SoftmaxRegressionModel::classes)
      .def_readonly("loss_trace", &SoftmaxRegressionModel::loss_trace)
      .def("predict_proba",
           [](const SoftmaxRegressionModel& s, const std::vector<double>& x) { return s.predict_proba(x); })
      .def("to_json", [](const SoftmaxRegressionModel& s) { return to_python(s.to_json()); });
  m.def("train_softmax_regression",
        [](std::vector<EmbeddingVector> features, std::vector<std::string> labels, const py::object& config) {
          return train_softmax_regression(training_data(std::move(features), std::move(labels)),
                                          SoftmaxConfig::from_json(from_python(config)));
        },
        py::arg("features"), py::arg("labels"), py::arg("config") = py::none());

  py::class_<ChainNode>(m, "ChainNode")
      .def(py::init([](Phase phase, std::string label, std::vector<double> embedding, std::string description) {
             return ChainNode{phase, std::move(label), std::move(description), std::move(embedding)};
           }),
           py::arg("phase"), py::arg("label"), py::arg("embedding"), py::arg("description") = "")
      .def_readonly("phase", &ChainNode::phase)
      .def_readonly("label", &ChainNode::label)
      .def_readonly("description", &ChainNode::description)
      .def_readonly("embedding", &ChainNode::embedding);
  py::class_<ChainEdge>(m, "ChainEdge")
      .def_readonly("source", &ChainEdge::source)
      .def_readonly("target", &ChainEdge::target)
      .def_readonly("similarity", &ChainEdge::similarity);
  py::class_<AttackPath>(m, "AttackPath")
      .def_readonly("nodes", &AttackPath::nodes)
      .def_readonly("score", &AttackPath::score)
      .def_readonly("start_phase", &AttackPath::start_phase)
      .def_readonly("end_phase", &AttackPath::end_phase);
  py::class_<ChainGraph>(m, "ChainGraph")
      .def_readonly("nodes", &ChainGraph::nodes)
      .def_readonly("edges", &ChainGraph::edges)
      .def_readonly("tau", &ChainGraph::tau)
      .def("layer", &ChainGraph::layer);
  m.def("build_semantic_graph",
        [](std::vector<ChainNode> nodes, double tau) { return build_semantic_graph(std::move(nodes), tau); },
        py::arg("nodes"), py::arg("tau") = kDefaultTau);
  m.def("extract_paths", &extract_paths, py::arg("graph"), py::arg("k"));
  m.def("export_dot",
        [](const ChainGraph& g, std::optional<AttackPath> highlight) {
          return export_dot(g, highlight ? &*highlight : nullptr);
        },
        py::arg("graph"), py::arg("highlight") = py::none());
  m.def("export_json", &export_json, py::arg("graph"), py::arg("paths"));
}
