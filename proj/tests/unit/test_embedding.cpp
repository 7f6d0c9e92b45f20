#include "doctest.h"

#include <cmath>

#include "fixtures.hpp"
#include "killchain/embedding.hpp"
#include "killchain/error.hpp"
#include "killchain/probability_matrix.hpp"

using namespace killchain;
using doctest::Approx;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected killchain::Error");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("cosine similarity") {
  std::vector<double> a{1.0, 1.0}, b{1.0, 0.0};
  CHECK(cosine_similarity(a, b) == Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(cosine_similarity(a, a) == Approx(1.0));
  std::vector<double> zero{0.0, 0.0}, three{1.0, 2.0, 3.0};
  CHECK(kind_of([&] { cosine_similarity(a, zero); }) == ErrorKind::Degenerate);
  CHECK(kind_of([&] { cosine_similarity(a, three); }) == ErrorKind::Contract);
}

TEST_CASE("tf-idf smooth idf and normalized vectors") {
  std::vector<std::string> corpus = {"a b", "a"};
  TfidfModel m = fit_tfidf(corpus, 4);
  CHECK(m.idf("a") == Approx(1.0).epsilon(1e-15));
  CHECK(m.idf("b") == Approx(1.4054651081081644).epsilon(1e-15));
  CHECK(m.term("a").slot == 0);  // highest df ranks first
  CHECK(m.term("b").slot == 1);
  EmbeddingVector v = m.embed("a b b");
  CHECK(v[0] == Approx(0.33517574332792605).epsilon(1e-14));
  CHECK(v[1] == Approx(0.9421556246632359).epsilon(1e-14));
  CHECK(v[2] == 0.0);
  CHECK(l2_norm(v) == Approx(1.0).epsilon(1e-15));
  CHECK(kind_of([&] { m.embed("zzz"); }) == ErrorKind::Degenerate);
}

TEST_CASE("tf-idf document frequencies on a five-document fixture") {
  std::vector<std::string> corpus = {"attack scan host", "scan host port", "phish email link", "email link attach",
                                     "scan email"};
  TfidfModel m = fit_tfidf(corpus, 8);
  const std::pair<const char*, double> expected[] = {
      {"attach", 2.09861228866811},      {"attack", 2.09861228866811}, {"email", 1.4054651081081644},
      {"host", 1.6931471805599454},      {"link", 1.6931471805599454}, {"phish", 2.09861228866811},
      {"port", 2.09861228866811},        {"scan", 1.4054651081081644},
  };
  for (auto [token, idf] : expected) CHECK(m.idf(token) == Approx(idf).epsilon(1e-14));
  CHECK(m.term("email").slot == 0);
  CHECK(m.term("scan").slot == 1);
  CHECK(m.term("host").slot == 2);
  CHECK(m.term("link").slot == 3);
  CHECK(m.term("attach").slot == 4);

  // recompute an embedding by hand from the df table
  auto idf = [&](double df) { return std::log((1.0 + 5.0) / (1.0 + df)) + 1.0; };
  EmbeddingVector v = m.embed("scan scan host");
  double s = 2.0 * idf(3), h = idf(2), n = std::sqrt(s * s + h * h);
  CHECK(v[1] == Approx(s / n).epsilon(1e-14));
  CHECK(v[2] == Approx(h / n).epsilon(1e-14));
}

TEST_CASE("tf-idf folds overflow tokens by hash") {
  std::vector<std::string> corpus = {"a b c d e"};
  TfidfModel m = fit_tfidf(corpus, 2);
  CHECK(m.term("a").slot == 0);
  CHECK(m.term("b").slot == 1);
  for (const char* t : {"c", "d", "e"}) CHECK(m.term(t).slot == fnv1a64(t) % 2);
  TfidfModel back = TfidfModel::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  CHECK(back.embed("a c e") == m.embed("a c e"));
}

TEST_CASE("embedding table parsing") {
  EmbeddingTable t = parse_embedding_table(
      "{\"key\":\"T1566\",\"vector\":[1,0]}\n\n{\"key\":\"T1595\",\"vector\":[0.5,0.5]}\n", "mem");
  CHECK(t.dim() == 2);
  CHECK(t.size() == 2);
  CHECK(t.at("T1595")[1] == 0.5);
  CHECK(kind_of([&] { t.at("T9999"); }) == ErrorKind::Lookup);
  CHECK(parse_embedding_table(write_embedding_table(t)).entries() == t.entries());

  CHECK(kind_of([] { parse_embedding_table("{\"key\":\"a\",\"vector\":[1]}\n{\"key\":\"b\",\"vector\":[1,2]}"); }) ==
        ErrorKind::Format);
  CHECK(kind_of([] { parse_embedding_table("{\"key\":\"a\",\"vector\":[1]}\n{\"key\":\"a\",\"vector\":[2]}"); }) ==
        ErrorKind::Format);
  CHECK(kind_of([] { parse_embedding_table("{bad"); }) == ErrorKind::Parse);
  CHECK(kind_of([] { parse_embedding_table("\n"); }) == ErrorKind::Format);
  try {
    parse_embedding_table("{\"key\":\"a\",\"vector\":[1]}\n{\"key\":\"b\"}");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("embedding providers") {
  EmbeddingTable t(2, "mem");
  t.insert("T1566", {1.0, 0.0});
  t.insert(content_key("phish email"), {0.0, 1.0});
  EmbeddingProvider table = t;
  CHECK(embed(table, {"T1566", "ignored"}) == EmbeddingVector{1.0, 0.0});
  CHECK(embed(table, {"", "phish email"}) == EmbeddingVector{0.0, 1.0});
  CHECK(embed_text(table, "phish email") == EmbeddingVector{0.0, 1.0});
  CHECK(kind_of([&] { embed(table, {"T0000", "nothing"}); }) == ErrorKind::Lookup);

  std::vector<std::string> corpus = {"phish email", "scan"};
  EmbeddingProvider tfidf = fit_tfidf(corpus, 4);
  CHECK(embed(tfidf, {"T1566", "phish email"}).size() == 4);
  CHECK(content_key("x").rfind("sha:", 0) == 0);
}

TEST_CASE("probability matrix validation") {
  ProbabilityMatrix m({"s1", "s2"}, {"a", "b"}, {0.25, 0.75, 0.5, 0.5});
  CHECK(m.argmax(0) == 1);
  CHECK(m.argmax(1) == 0);  // exact tie goes to the smaller label
  CHECK(m.argmax_labels() == std::vector<std::string>{"b", "a"});

  CHECK(kind_of([] { ProbabilityMatrix({"s"}, {"a", "b"}, {0.5, 0.6}); }) == ErrorKind::Validation);
  CHECK(kind_of([] { ProbabilityMatrix({"s"}, {"a", "b"}, {1.5, -0.5}); }) == ErrorKind::Validation);
  CHECK(kind_of([] { ProbabilityMatrix({"s", "s"}, {"a"}, {1.0, 1.0}); }) == ErrorKind::Validation);
  // inside the tolerance is accepted unchanged
  ProbabilityMatrix near({"s"}, {"a", "b"}, {0.5, 0.5 + 5e-7});
  CHECK(near.at(0, 1) == 0.5 + 5e-7);
}

TEST_CASE("probability matrix jsonl round-trip and reordering") {
  ProbabilityMatrix m({"s1", "s2"}, {"a", "b", "c"}, {0.2, 0.3, 0.5, 0.1, 0.1, 0.8});
  std::string text = write_probability_matrix(m, Phase::Delivery);
  CHECK(text.rfind(R"({"labels":["a","b","c"],"phase":"Delivery"})", 0) == 0);
  CHECK(parse_probability_matrix(text, {"a", "b", "c"}, {"s1", "s2"}) == m);

  ProbabilityMatrix r = parse_probability_matrix(text, {"c", "a", "b"}, {"s2", "s1"});
  CHECK(r.at(0, 0) == 0.8);
  CHECK(r.at(1, 1) == 0.2);

  CHECK(kind_of([&] { parse_probability_matrix(text, {"a", "b", "c"}, {"s1", "s2", "s3"}); }) ==
        ErrorKind::Validation);
  CHECK(kind_of([&] { parse_probability_matrix(text, {"a", "b", "d"}, {"s1", "s2"}); }) == ErrorKind::Format);

  std::string bad = "{\"labels\":[\"a\",\"b\"],\"phase\":\"Delivery\"}\n{\"sample_id\":\"s\",\"probs\":{\"a\":0.5,\"b\":0.6}}\n";
  try {
    parse_probability_matrix(bad, {"a", "b"}, {"s"});
    FAIL("expected a validation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Validation);
    CHECK(std::string(e.what()).find("1.1") != std::string::npos);
  }
}

TEST_CASE("argmax tie rule is label-lexicographic, not positional") {
  std::vector<double> row{0.4, 0.4, 0.2};
  CHECK(argmax_with_ties(row, {"zeta", "alpha", "mid"}) == 1);
}
