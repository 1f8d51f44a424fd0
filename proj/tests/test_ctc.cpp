#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "helpers.hpp"
#include "tcen/ctc.hpp"

using namespace tcen;

namespace {

// Independent oracle: -log sum over enumerated legal paths of the product
// of per-frame probabilities, in shifted log space.
double oracle_nll(const Tensor& log_probs, const LabelSequence& y, int vocab_size) {
  auto paths = enumerate_legal_paths(y, log_probs.rows(), vocab_size);
  if (paths.empty()) return std::numeric_limits<double>::infinity();
  std::vector<double> scores;
  scores.reserve(paths.size());
  for (const CtcPath& p : paths) {
    double s = 0.0;
    for (int t = 0; t < log_probs.rows(); ++t) s += log_probs.at(t, p.ids[t]);
    scores.push_back(s);
  }
  double m = *std::max_element(scores.begin(), scores.end());
  double acc = 0.0;
  for (double s : scores) acc += std::exp(s - m);
  return -(m + std::log(acc));
}

Tensor random_log_dist(int T, int vocab_size, std::mt19937_64& rng) {
  Tensor logits = tt::rand_mat(T, vocab_size + 1, rng, -2.0, 2.0);
  for (int t = 0; t < T; ++t) {
    double mx = logits.at(t, 0);
    for (int c = 1; c <= vocab_size; ++c) mx = std::max(mx, logits.at(t, c));
    double s = 0.0;
    for (int c = 0; c <= vocab_size; ++c) s += std::exp(logits.at(t, c) - mx);
    double lse = mx + std::log(s);
    for (int c = 0; c <= vocab_size; ++c) logits.at(t, c) -= lse;
  }
  return logits;
}

// Table-style fixture: ids over {we, were, not, v, @en, @ge, @ful, at, all}.
enum Tok { kWe, kWere, kNot, kV, kEn, kGe, kFul, kAt, kAll, kBlankTok };

CtcPath table_path() {
  auto rep = [](int id, int n, std::vector<int>& out) { out.insert(out.end(), n, id); };
  std::vector<int> ids;
  rep(kBlankTok, 11, ids);
  rep(kWe, 2, ids);
  rep(kBlankTok, 3, ids);
  rep(kWere, 1, ids);
  rep(kBlankTok, 3, ids);
  rep(kNot, 1, ids);
  rep(kBlankTok, 4, ids);
  rep(kV, 1, ids);
  rep(kEn, 2, ids);
  rep(kGe, 1, ids);
  rep(kBlankTok, 1, ids);
  rep(kFul, 1, ids);
  rep(kBlankTok, 8, ids);
  rep(kAt, 2, ids);
  rep(kBlankTok, 3, ids);
  rep(kAll, 1, ids);
  rep(kBlankTok, 10, ids);
  return CtcPath{ids};
}

}  // namespace

TEST_CASE("collapse merges repeats then strips blanks", "[ctc]") {
  const int blank = 2;
  CHECK(collapse(CtcPath{{0, 0, blank, 1}}, blank) == LabelSequence{{0, 1}});
  CHECK(collapse(CtcPath{{blank, blank, blank}}, blank).ids.empty());
  CHECK(collapse(CtcPath{{0, blank, 0}}, blank) == LabelSequence{{0, 0}});
}

TEST_CASE("collapse of the transcript example path", "[ctc]") {
  CtcPath pi1 = table_path();
  CHECK(pi1.ids.size() == 55);
  LabelSequence expect{{kWe, kWere, kNot, kV, kEn, kGe, kFul, kAt, kAll}};
  CHECK(collapse(pi1, kBlankTok) == expect);
}

TEST_CASE("legal path enumeration matches hand-derived sets", "[ctc]") {
  // y=(a,b), T=3 over {a,b}: aab, abb, ab-, a-b, -ab
  auto paths = enumerate_legal_paths(LabelSequence{{0, 1}}, 3, 2);
  std::set<std::vector<int>> got;
  for (const auto& p : paths) got.insert(p.ids);
  std::set<std::vector<int>> expect = {
      {0, 0, 1}, {0, 1, 1}, {0, 1, 2}, {0, 2, 1}, {2, 0, 1}};
  CHECK(got == expect);
  CHECK(paths.size() == 5);

  CHECK(enumerate_legal_paths(LabelSequence{{0}}, 1, 1).size() == 1);
  CHECK(enumerate_legal_paths(LabelSequence{{0, 0}}, 2, 1).empty());
  CHECK(enumerate_legal_paths(LabelSequence{{0, 0}}, 3, 1).size() == 1);  // a-a
  CHECK_THROWS_AS(enumerate_legal_paths(LabelSequence{{0}}, 9, 9), UsageError);
}

TEST_CASE("ctc_loss on the single-frame uniform case is ln 2", "[ctc]") {
  Tape t;
  Var lp = t.leaf(tt::row({std::log(0.5), std::log(0.5)}));
  auto res = ctc_loss(lp, LabelSequence{{0}}, 1);
  REQUIRE(res.feasible);
  CHECK(cvalue_of(res.loss).item() == Catch::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("ctc_loss equals the enumeration oracle", "[ctc]") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 60; ++trial) {
    int vocab = 1 + static_cast<int>(rng() % 3);
    int T = 2 + static_cast<int>(rng() % 4);
    int len = 1 + static_cast<int>(rng() % 2);
    LabelSequence y;
    for (int i = 0; i < len; ++i) y.ids.push_back(static_cast<int>(rng() % vocab));
    Tensor lp = random_log_dist(T, vocab, rng);
    Tape t;
    auto res = ctc_loss(t.leaf(lp), y, vocab);
    double expect = oracle_nll(lp, y, vocab);
    if (std::isinf(expect)) {
      CHECK_FALSE(res.feasible);
      CHECK(std::isinf(cvalue_of(res.loss).item()));
      CHECK_FALSE(std::isnan(cvalue_of(res.loss).item()));
    } else {
      REQUIRE(res.feasible);
      CHECK(std::abs(cvalue_of(res.loss).item() - expect) < 1e-9);
    }
  }
}

TEST_CASE("infeasible targets give the +inf sentinel, never NaN", "[ctc]") {
  std::mt19937_64 rng(5);
  Tensor lp = random_log_dist(2, 1, rng);
  Tape t;
  auto res = ctc_loss(t.leaf(lp), LabelSequence{{0, 0}}, 1);
  CHECK_FALSE(res.feasible);
  CHECK(std::isinf(cvalue_of(res.loss).item()));
  CHECK_THROWS_AS(ctc_loss(t.leaf(lp), LabelSequence{{}}, 1), DataError);
}

TEST_CASE("ctc_loss gradients pass central differences", "[ctc]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    int vocab = 2;
    int T = 4;
    LabelSequence y{{static_cast<int>(rng() % vocab), static_cast<int>(rng() % vocab)}};
    Parameter logits("logits", tt::rand_mat(T, vocab + 1, rng, -1.5, 1.5));
    auto build = [&](Tape& t) {
      Var lp = log_softmax(t.param(logits));
      auto res = ctc_loss(lp, y, vocab);
      REQUIRE(res.feasible);
      return res.loss;
    };
    CHECK(grad_check(build, logits) < 1e-4);
  }
}

TEST_CASE("frames beyond a masked length get zero gradient", "[ctc]") {
  std::mt19937_64 rng(9);
  const int vocab = 2, T_full = 6, T_used = 4;
  Parameter logits("logits", tt::rand_mat(T_full, vocab + 1, rng));
  LabelSequence y{{0, 1}};
  logits.zero_grad();
  Tape t;
  Var lp = log_softmax(t.param(logits));
  auto res = ctc_loss(slice_rows(lp, 0, T_used), y, vocab);
  t.backward(res.loss);
  for (int r = T_used; r < T_full; ++r)
    for (int c = 0; c <= vocab; ++c) CHECK(logits.grad.at(r, c) == 0.0);

  // and the T_used-column lattice equals the loss on the truncated input
  Tape t2;
  Tensor trunc = Tensor::zeros({T_used, vocab + 1});
  {
    Tape tmp;
    Tensor full = cvalue_of(log_softmax(tmp.param(logits)));
    for (int r = 0; r < T_used; ++r)
      for (int c = 0; c <= vocab; ++c) trunc.at(r, c) = full.at(r, c);
  }
  auto res2 = ctc_loss(t2.leaf(trunc), y, vocab);
  CHECK(cvalue_of(res2.loss).item() == Catch::Approx(cvalue_of(res.loss).item()).epsilon(1e-14));
}

TEST_CASE("more mass on a legal path never raises the loss", "[ctc]") {
  // directional finite differences at the uniform distribution
  struct Case { LabelSequence y; int T; int vocab; };
  std::vector<Case> cases = {{LabelSequence{{0, 1}}, 3, 2}, {LabelSequence{{0}}, 2, 2},
                             {LabelSequence{{1, 0}}, 4, 2}};
  for (const auto& c : cases) {
    double u = -std::log(static_cast<double>(c.vocab + 1));
    Tensor uniform = Tensor::full({c.T, c.vocab + 1}, u);
    Tape t0;
    double base = cvalue_of(ctc_loss(t0.leaf(uniform), c.y, c.vocab).loss).item();
    const double eps = 1e-3;
    for (const CtcPath& p : enumerate_legal_paths(c.y, c.T, c.vocab)) {
      Tensor logits = Tensor::full({c.T, c.vocab + 1}, u);
      for (int t = 0; t < c.T; ++t) logits.at(t, p.ids[t]) += eps;
      // renormalize rows
      for (int t = 0; t < c.T; ++t) {
        double s = 0.0;
        for (int k = 0; k <= c.vocab; ++k) s += std::exp(logits.at(t, k));
        for (int k = 0; k <= c.vocab; ++k) logits.at(t, k) -= std::log(s);
      }
      Tape t1;
      double bumped = cvalue_of(ctc_loss(t1.leaf(logits), c.y, c.vocab).loss).item();
      CHECK(bumped <= base + 1e-10);
    }
  }
}

TEST_CASE("greedy decoding takes the frame argmax with low-id ties", "[ctc]") {
  Tensor lp = tt::mat(4, 3, {
      -0.1, -2.0, -3.0,   // a
      -0.2, -1.0, -4.0,   // a
      -5.0, -6.0, -0.1,   // blank
      -7.0, -0.3, -2.0,   // b
  });
  CtcPath got = greedy_decode(lp);
  CHECK(got.ids == std::vector<int>{0, 0, 2, 1});
  CHECK(collapse(got, 2) == LabelSequence{{0, 1}});

  Tensor uniform = Tensor::full({3, 4}, -std::log(4.0));
  CHECK(greedy_decode(uniform).ids == std::vector<int>{0, 0, 0});
}

TEST_CASE("greedy decoding round-trips a one-hot encoded path", "[ctc]") {
  CtcPath pi1 = table_path();
  const int cols = kBlankTok + 1;
  Tensor lp = Tensor::full({static_cast<int>(pi1.ids.size()), cols}, -20.0);
  for (std::size_t t = 0; t < pi1.ids.size(); ++t) lp.at(static_cast<int>(t), pi1.ids[t]) = -0.01;
  CHECK(greedy_decode(lp) == pi1);
}
