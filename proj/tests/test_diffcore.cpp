#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <vector>

#include "rd/common.hpp"
#include "rd/diffcore.hpp"
#include "rd/tensor.hpp"
#include "testutil.hpp"

using namespace rd;
using diff::Act;
using diff::MLPSpec;
using diff::OutAct;
using diff::Tape;
using diff::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0,
                     double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

TEST(MlpForward, ZeroWeightsGiveZeroOutput) {
  MLPSpec spec{{3, 4, 2}, Act::Linear, OutAct::Linear};
  diff::ParamStore ps;
  Rng rng(1);
  diff::init_mlp_params(ps, "net", spec, rng);
  for (auto& [name, t] : ps.all_mut())
    for (double& x : t.data) x = 0.0;
  Tensor x = Tensor::matrix(2, 3, {1, -2, 3, 0.5, 0.25, -1});
  Tensor y = diff::mlp_eval(spec, ps, "net", x);
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(MlpForward, IdentityWeightsPassInputThrough) {
  MLPSpec spec{{3, 3}, Act::Linear, OutAct::Linear};
  diff::ParamStore ps;
  ps.insert("net.W0", Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  ps.insert("net.b0", Tensor::zeros({3}));
  Tensor x = Tensor::matrix(2, 3, {1.5, -2.25, 3.0, 0.0, 7.0, -0.125});
  Tensor y = diff::mlp_eval(spec, ps, "net", x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data[i], x.data[i]);
}

// 1-2-1 net against an independent straight-line re-evaluation.
TEST(MlpForward, SmallNetMatchesHandEvaluation) {
  MLPSpec spec{{1, 2, 1}, Act::Softplus, OutAct::Linear};
  diff::ParamStore ps;
  Rng rng(7);
  diff::init_mlp_params(ps, "net", spec, rng);
  double w00 = ps.at("net.W0").data[0], w01 = ps.at("net.W0").data[1];
  double b00 = ps.at("net.b0").data[0], b01 = ps.at("net.b0").data[1];
  double w10 = ps.at("net.W1").data[0], w11 = ps.at("net.W1").data[1];
  double b1 = ps.at("net.b1").data[0];

  double x = 0.37;
  double h0 = std::log1p(std::exp(w00 * x + b00));
  double h1 = std::log1p(std::exp(w01 * x + b01));
  double expected = w10 * h0 + w11 * h1 + b1;

  Tensor in = Tensor::matrix(1, 1, {x});
  Tensor out = diff::mlp_eval(spec, ps, "net", in);
  EXPECT_NEAR(out.data[0], expected, 1e-12);

  // Tape forward agrees with the frozen path.
  Tape tape;
  diff::TapeParams tp = diff::TapeParams::bind(tape, ps);
  Var y = diff::mlp_forward(tape, spec, tp, "net", tape.constant(in));
  EXPECT_NEAR(tape.val(y).data[0], expected, 1e-12);
}

TEST(MlpForward, ShapeMismatchNamesTheLayer) {
  MLPSpec spec{{3, 4, 2}, Act::Selu, OutAct::Linear};
  diff::ParamStore ps;
  Rng rng(3);
  diff::init_mlp_params(ps, "net", spec, rng);
  Tensor bad = Tensor::matrix(2, 5, std::vector<double>(10, 0.0));
  try {
    diff::mlp_eval(spec, ps, "net", bad);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST(Backward, SquareGradient) {
  Tape tape;
  Var w = tape.leaf(Tensor::scalar(3.0));
  Var loss = tape.square(w);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(tape.grad(w).data[0], 6.0);
}

TEST(Backward, LogSumExpGradientIsSoftmax) {
  Tape tape;
  Tensor v = Tensor::row({1.0, 2.0, 0.5});
  Var x = tape.leaf(v);
  Var loss = tape.logsumexp(x);
  tape.backward(loss);
  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(0.5);
  EXPECT_NEAR(tape.grad(x).data[0], std::exp(1.0) / denom, 1e-12);
  EXPECT_NEAR(tape.grad(x).data[1], std::exp(2.0) / denom, 1e-12);
  EXPECT_NEAR(tape.grad(x).data[2], std::exp(0.5) / denom, 1e-12);
}

TEST(Backward, NonScalarLossIsAnError) {
  Tape tape;
  Var x = tape.leaf(Tensor::row({1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  MLPSpec spec{{3, 5, 2}, Act::Softplus, OutAct::Linear};
  diff::ParamStore ps;
  Rng rng(11);
  diff::init_mlp_params(ps, "net", spec, rng);
  Rng drng(12);
  Tensor batch = random_tensor({4, 3}, drng);

  auto loss_value = [&](const diff::ParamStore& store) {
    Tensor y = diff::mlp_eval(spec, store, "net", batch);
    double acc = 0.0;
    for (double v : y.data) acc += v * v;
    return acc / static_cast<double>(y.numel());
  };

  Tape tape;
  diff::TapeParams tp = diff::TapeParams::bind(tape, ps);
  Var y = diff::mlp_forward(tape, spec, tp, "net", tape.constant(batch));
  Var loss = tape.mean_all(tape.square(y));
  tape.backward(loss);
  double err = rdtest::max_grad_rel_error(ps, loss_value, tp.gradients(tape));
  EXPECT_LT(err, 1e-5);
}

// Every registered primitive against central finite differences, > 100
// random configurations in total.
TEST(Backward, PrimitiveGradientSuite) {
  Rng rng(2024);
  int configs = 0;
  double worst = 0.0;

  using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;
  struct Case {
    std::string name;
    std::size_t arity;
    bool positive_only;
    Builder build;
  };
  std::vector<Case> cases = {
      {"add", 2, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.add(xs[0], xs[1]); }},
      {"sub", 2, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.sub(xs[0], xs[1]); }},
      {"mul", 2, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.mul(xs[0], xs[1]); }},
      {"exp", 1, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.exp_(xs[0]); }},
      {"log", 1, true,
       [](Tape& t, const std::vector<Var>& xs) { return t.log_(xs[0]); }},
      {"tanh", 1, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.tanh_(xs[0]); }},
      {"square", 1, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.square(xs[0]); }},
      {"softplus", 1, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.softplus(xs[0]); }},
      {"selu", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.activation(xs[0], Act::Selu);
       }},
      {"leaky", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.activation(xs[0], Act::LeakyRelu);
       }},
      {"add_scalar", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.add_scalar(xs[0], 0.7);
       }},
      {"mul_scalar", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.mul_scalar(xs[0], -1.3);
       }},
      {"logsumexp", 1, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.logsumexp(xs[0]); }},
      {"row_logsumexp", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.row_logsumexp(xs[0]);
       }},
      {"row_sum", 1, false,
       [](Tape& t, const std::vector<Var>& xs) { return t.row_sum(xs[0]); }},
      {"slice_cols", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.slice_cols(xs[0], 1, 3);
       }},
      {"slice_rows", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.slice_rows(xs[0], 0, 2);
       }},
      {"concat_cols", 2, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.concat_cols(xs[0], xs[1]);
       }},
      {"clamp", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.clamp(xs[0], -10.0, 10.0);
       }},
      {"reshape", 1, false,
       [](Tape& t, const std::vector<Var>& xs) {
         return t.reshape(xs[0], {12});
       }},
      {"matmul", 2, false, nullptr},      // special shapes below
      {"add_rowvec", 2, false, nullptr},  // special shapes below
      {"mul_rowvec", 2, false, nullptr},
  };

  for (const Case& c : cases) {
    for (int rep = 0; rep < 6; ++rep) {
      ++configs;
      diff::ParamStore ps;
      std::vector<std::vector<std::size_t>> shapes;
      if (c.name == "matmul") {
        shapes = {{3, 4}, {4, 2}};
      } else if (c.name == "add_rowvec" || c.name == "mul_rowvec") {
        shapes = {{3, 4}, {4}};
      } else {
        for (std::size_t i = 0; i < c.arity; ++i) shapes.push_back({3, 4});
      }
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        Tensor t = random_tensor(shapes[i], rng,
                                 c.positive_only ? 0.3 : -2.0, 2.5);
        // Keep kinked activations away from their corner.
        if (c.name == "selu" || c.name == "leaky")
          for (double& x : t.data)
            if (std::abs(x) < 5e-3) x += 0.01;
        ps.insert("x" + std::to_string(i), t);
      }

      auto make_loss = [&](Tape& tape, const diff::TapeParams& tp) {
        std::vector<Var> xs;
        for (std::size_t i = 0; i < shapes.size(); ++i)
          xs.push_back(tp.at("x" + std::to_string(i)));
        Var out;
        if (c.name == "matmul")
          out = tape.matmul(xs[0], xs[1]);
        else if (c.name == "add_rowvec")
          out = tape.add_rowvec(xs[0], xs[1]);
        else if (c.name == "mul_rowvec")
          out = tape.mul_rowvec(xs[0], xs[1]);
        else
          out = c.build(tape, xs);
        // Weighted sum keeps the loss scalar but exercises all outputs.
        Var sq = tape.mul_scalar(tape.square(out), 0.5);
        return tape.add(tape.sum_all(sq), tape.mean_all(out));
      };

      auto loss_value = [&](const diff::ParamStore& store) {
        Tape tape;
        diff::TapeParams tp = diff::TapeParams::bind(tape, store);
        return tape.scalar_val(make_loss(tape, tp));
      };

      Tape tape;
      diff::TapeParams tp = diff::TapeParams::bind(tape, ps);
      Var loss = make_loss(tape, tp);
      tape.backward(loss);
      double err = rdtest::max_grad_rel_error(ps, loss_value, tp.gradients(tape));
      EXPECT_LT(err, 1e-5) << c.name << " rep " << rep;
      worst = std::max(worst, err);
    }
  }
  EXPECT_GE(configs, 100);
}

// ---------------------------------------------------------------------------
// adam
// ---------------------------------------------------------------------------

TEST(Adam, FirstStepMovesByLrTimesSign) {
  diff::ParamStore ps;
  ps.insert("w", Tensor::row({1.0, -2.0}));
  diff::ParamStore::GradMap g;
  g["w"] = Tensor::row({0.3, -400.0});
  diff::AdamConfig cfg;
  cfg.lr = 0.01;
  ps.adam_step(g, cfg);
  // After bias correction the first update is lr * g / (|g| + eps').
  EXPECT_NEAR(ps.at("w").data[0], 1.0 - 0.01, 1e-6);
  EXPECT_NEAR(ps.at("w").data[1], -2.0 + 0.01, 1e-6);
  EXPECT_EQ(ps.step_count(), 1);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  diff::ParamStore ps;
  ps.insert("w", Tensor::row({0.5, -0.25, 3.0}));
  Tensor before = ps.at("w");
  diff::ParamStore::GradMap g;
  g["w"] = Tensor::zeros({3});
  for (int i = 0; i < 50; ++i) ps.adam_step(g, {});
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(ps.at("w").data[i], before.data[i]);
}

// Three steps on f(w) = w^2 from w=1 against a hand-rolled scalar trace.
TEST(Adam, MatchesHandRolledScalarTrace) {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w = 1.0, m = 0.0, v = 0.0;
  std::vector<double> expected;
  for (int t = 1; t <= 3; ++t) {
    double g = 2.0 * w;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    double mhat = m / (1 - std::pow(b1, t));
    double vhat = v / (1 - std::pow(b2, t));
    w -= lr * mhat / (std::sqrt(vhat) + eps);
    expected.push_back(w);
  }

  diff::ParamStore ps;
  ps.insert("w", Tensor::scalar(1.0));
  diff::AdamConfig cfg;
  cfg.lr = lr;
  for (int t = 0; t < 3; ++t) {
    Tape tape;
    diff::TapeParams tp = diff::TapeParams::bind(tape, ps);
    Var loss = tape.square(tp.at("w"));
    tape.backward(loss);
    ps.adam_step(tp.gradients(tape), cfg);
    EXPECT_NEAR(ps.at("w").data[0], expected[t], 1e-12);
  }
}

TEST(Adam, MissingGradientKeyIsAnError) {
  diff::ParamStore ps;
  ps.insert("a", Tensor::scalar(1.0));
  ps.insert("b", Tensor::scalar(2.0));
  diff::ParamStore::GradMap g;
  g["a"] = Tensor::scalar(0.1);
  EXPECT_THROW(ps.adam_step(g, {}), UsageError);
  g["b"] = Tensor::scalar(0.1);
  g["c"] = Tensor::scalar(0.1);
  EXPECT_THROW(ps.adam_step(g, {}), UsageError);
}

// ---------------------------------------------------------------------------
// logsumexp
// ---------------------------------------------------------------------------

TEST(LogSumExp, SingleElementIsExact) {
  Tape tape;
  Var x = tape.constant(Tensor::row({-3.25}));
  EXPECT_DOUBLE_EQ(tape.scalar_val(tape.logsumexp(x)), -3.25);
}

TEST(LogSumExp, TwoZerosGiveLn2) {
  Tape tape;
  Var x = tape.constant(Tensor::row({0.0, 0.0}));
  EXPECT_NEAR(tape.scalar_val(tape.logsumexp(x)), std::log(2.0), 1e-15);
}

TEST(LogSumExp, LargeValuesDoNotOverflow) {
  Tape tape;
  Var x = tape.constant(Tensor::row({1000.0, 1000.0}));
  EXPECT_NEAR(tape.scalar_val(tape.logsumexp(x)), 1000.0 + std::log(2.0),
              1e-12);
}

TEST(LogSumExp, EmptyAxisIsAnError) {
  Tape tape;
  Var x = tape.constant(Tensor({0}, {}));
  EXPECT_THROW(tape.logsumexp(x), ShapeError);
  EXPECT_THROW(rd::logsumexp(std::vector<double>{}), ShapeError);
}

// logsumexp(v) in [max(v), max(v) + ln(len(v))] over random vectors.
TEST(LogSumExp, BoundProperty) {
  Rng rng(99);
  for (int rep = 0; rep < 200; ++rep) {
    std::size_t n = 1 + static_cast<std::size_t>(rng.uniform(0, 8));
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-50.0, 50.0);
    double m = *std::max_element(v.begin(), v.end());
    double lse = rd::logsumexp(v);
    EXPECT_GE(lse + 1e-12, m);
    EXPECT_LE(lse, m + std::log(static_cast<double>(n)) + 1e-12);
  }
}

// ---------------------------------------------------------------------------
// determinism and checkpoints
// ---------------------------------------------------------------------------

TEST(Determinism, SameSeedSameOpsBitIdenticalParams) {
  auto run = [](std::uint64_t seed) {
    MLPSpec spec{{2, 8, 1}, Act::Selu, OutAct::Linear};
    diff::ParamStore ps;
    Rng rng(seed);
    diff::init_mlp_params(ps, "net", spec, rng);
    Rng data(seed + 1);
    diff::AdamConfig cfg;
    for (int step = 0; step < 25; ++step) {
      Tensor batch = random_tensor({8, 2}, data);
      Tape tape;
      diff::TapeParams tp = diff::TapeParams::bind(tape, ps);
      Var y = diff::mlp_forward(tape, spec, tp, "net", tape.constant(batch));
      Var loss = tape.mean_all(tape.square(y));
      tape.backward(loss);
      ps.adam_step(tp.gradients(tape), cfg);
    }
    return ps;
  };
  diff::ParamStore a = run(123), b = run(123);
  for (const auto& [name, t] : a.all()) {
    const Tensor& u = b.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i)
      EXPECT_EQ(t.data[i], u.data[i]) << name;
  }
}

TEST(Checkpoint, RoundTripsBitExactly) {
  MLPSpec spec{{3, 7, 2}, Act::Softplus, OutAct::Softplus};
  diff::ParamStore ps;
  Rng rng(31337);
  diff::init_mlp_params(ps, "net", spec, rng);
  std::string path = testing::TempDir() + "/rd_ckpt.json";
  diff::save_params(ps, path);
  diff::ParamStore loaded = diff::load_params(path);
  for (const auto& [name, t] : ps.all()) {
    const Tensor& u = loaded.at(name);
    ASSERT_EQ(t.shape, u.shape) << name;
    for (std::size_t i = 0; i < t.numel(); ++i)
      EXPECT_EQ(t.data[i], u.data[i]) << name;
  }
}

TEST(Tensor, ShapeInvariantEnforced) {
  EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), ShapeError);
}
