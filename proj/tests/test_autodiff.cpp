#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "sosp/model.hpp"
#include "sosp/network.hpp"
#include "sosp/params.hpp"
#include "sosp/rng.hpp"
#include "test_util.hpp"

using namespace sosp;
using namespace testutil;

TEST_CASE("identity dense layer passes its input through") {
  ModelSpec spec;
  spec.name = "linear2";
  spec.in_channels = 2;
  spec.output_dim = 2;
  spec.layers.push_back(dense_layer(2, 2, false));
  validate_model(spec);
  Network net(spec);
  std::vector<double> params = {1, 0, 0, 1};  // row-major [out][in]
  std::vector<double> state, out;
  const double x[] = {1.0, 2.0};
  net.forward(params, state, x, 1, out);
  CHECK(out[0] == 1.0);
  CHECK(out[1] == 2.0);
}

TEST_CASE("zero-weight relu mlp maps everything to zero") {
  ModelSpec spec = mlp_spec(4, {6}, 3, true);
  Network net(spec);
  std::vector<double> params(net.param_count(), 0.0), state(net.state_size(), 0.0), out;
  Rng rng(3);
  std::vector<double> x = random_vec(4 * 5, rng);
  net.forward(params, state, x.data(), 5, out);
  for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("two-layer forward matches a hand evaluation") {
  ModelSpec spec = mlp_spec(2, {2}, 2, true);
  Network net(spec);
  // W1 = [[1,-1],[0.5,2]], b1 = (0.25,-0.5); W2 = [[1,1],[-1,1]], b2 = 0
  std::vector<double> params = {1, -1, 0.5, 2, 0.25, -0.5, 1, 1, -1, 1, 0, 0};
  REQUIRE(params.size() == net.param_count());
  std::vector<double> state, out;
  const double x[] = {0.6, -0.2};
  // pre1 = (1.05, -0.6), relu -> (1.05, 0), out = (1.05, -1.05)
  net.forward(params, state, x, 1, out);
  CHECK(rel_err(out[0], 1.05) < 1e-15);
  CHECK(rel_err(out[1], -1.05) < 1e-15);
}

TEST_CASE("loss values match hand computations") {
  const double equal[] = {0.3, -0.7};
  CHECK(loss_value(equal, 2, LossKind::squared, 0, equal) == 0.0);

  const double unit[] = {1.0, 0.0};
  const double zero[] = {0.0, 0.0};
  CHECK(loss_value(unit, 2, LossKind::squared, 0, zero) == doctest::Approx(0.5).epsilon(1e-15));

  const double logits[] = {0.0, 0.0};
  CHECK(loss_value(logits, 2, LossKind::cross_entropy, 1, nullptr) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));

  // squared loss without explicit targets falls back to the one-hot label
  const double out2[] = {1.0, 0.0};
  CHECK(loss_value(out2, 2, LossKind::squared, 0, nullptr) == 0.0);
}

TEST_CASE("loss_grad agrees with finite differences of loss_value") {
  Rng rng(17);
  for (LossKind kind : {LossKind::squared, LossKind::cross_entropy}) {
    std::vector<double> out = random_vec(5, rng);
    std::vector<double> tgt = random_vec(5, rng);
    const double* target = kind == LossKind::squared ? tgt.data() : nullptr;
    std::vector<double> g(5);
    double l = loss_grad(out.data(), 5, kind, 2, target, g.data());
    CHECK(rel_err(l, loss_value(out.data(), 5, kind, 2, target)) < 1e-14);
    for (int j = 0; j < 5; ++j) {
      std::vector<double> pert = out;
      const double h = 1e-6;
      pert[j] += h;
      double up = loss_value(pert.data(), 5, kind, 2, target);
      pert[j] -= 2 * h;
      double dn = loss_value(pert.data(), 5, kind, 2, target);
      CHECK(std::fabs(g[j] - (up - dn) / (2 * h)) < 1e-7);
    }
  }
}

TEST_CASE("gradient is zero at a stationary point") {
  ModelSpec spec;
  spec.name = "lin";
  spec.in_channels = 3;
  spec.output_dim = 2;
  spec.layers.push_back(dense_layer(3, 2, false));
  validate_model(spec);
  Network net(spec);
  std::vector<double> params(net.param_count(), 0.0), state;
  Rng rng(5);
  std::vector<double> x = random_vec(3 * 4, rng);
  std::vector<double> targets(2 * 4, 0.0);
  std::vector<int> labels = {0, 0, 0, 0};
  Batch b;
  b.x = x.data();
  b.label = labels.data();
  b.target = targets.data();
  b.count = 4;
  std::vector<double> grad;
  double loss = net.gradient(params, state, b, LossKind::squared, grad);
  CHECK(loss == 0.0);
  for (double g : grad) CHECK(g == 0.0);
}

TEST_CASE("gradient matches central finite differences on tiny mlps") {
  for (LossKind kind : {LossKind::squared, LossKind::cross_entropy}) {
    ModelSpec spec = mlp_spec(5, {7}, 3, true);
    Network net(spec);
    std::vector<double> params, state;
    init_params(spec, net.layout(), 91, params, state);
    BatchData data = random_batch(net, 8, 3, 92);
    Batch b = data.batch(kind == LossKind::squared);

    std::vector<double> grad;
    net.gradient(params, state, b, kind, grad);
    std::vector<double> fd = fd_gradient(net, params, state, b, kind, 1e-5);
    CHECK(vec_rel_err(grad, fd) < 1e-5);
  }
}

TEST_CASE("gradient matches finite differences on every zoo family") {
  struct Case {
    const char* name;
    ModelSpec spec;
  };
  ZooOptions small;
  small.in_height = small.in_width = 8;
  std::vector<Case> cases;
  cases.push_back({"mlp-toy", make_model("mlp-toy", 8, 4, small)});
  cases.push_back({"convnet-toy", make_model("convnet-toy", 0, 4, small)});
  ZooOptions narrow = small;
  narrow.channels = {4, 4, 4, 4};
  cases.push_back({"restoy", make_model("restoy", 0, 4, narrow)});
  cases.push_back({"wide-mlp-x1", make_model("wide-mlp-x1", 16, 4, small)});

  for (const Case& c : cases) {
    CAPTURE(c.name);
    Network net(c.spec);
    REQUIRE(net.param_count() <= 5000);
    std::vector<double> params, state;
    init_params(c.spec, net.layout(), 7, params, state);
    jitter_state(net, state, 8);
    BatchData data = random_batch(net, 2, 4, 9);
    Batch b = data.batch();

    std::vector<double> grad;
    net.gradient(params, state, b, LossKind::cross_entropy, grad);

    // spot-check a deterministic stride of coordinates against central
    // differences; full-vector sweeps run in the acceptance binary
    std::size_t step = std::max<std::size_t>(1, params.size() / 60);
    double worst = 0.0, gnorm = 0.0;
    for (double g : grad) gnorm = std::max(gnorm, std::fabs(g));
    for (std::size_t i = 0; i < params.size(); i += step) {
      double fd = fd_partial(net, params, state, b, LossKind::cross_entropy, i, 1e-5);
      worst = std::max(worst, std::fabs(grad[i] - fd));
    }
    CHECK(worst / std::max(gnorm, 1e-12) < 1e-5);
  }
}

TEST_CASE("frozen layers receive zero gradient") {
  ModelSpec spec = mlp_spec(4, {5}, 3, true);
  spec.layers[0].trainable = false;
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 13, params, state);
  BatchData data = random_batch(net, 6, 3, 14);
  std::vector<double> grad;
  net.gradient(params, state, data.batch(), LossKind::cross_entropy, grad);

  const LayerParamInfo& frozen = net.layout().layer[0];
  for (std::size_t i = 0; i < frozen.count; ++i) CHECK(grad[frozen.offset + i] == 0.0);
  double tail = 0.0;
  for (std::size_t i = frozen.count; i < grad.size(); ++i) tail += std::fabs(grad[i]);
  CHECK(tail > 0.0);
}

TEST_CASE("hvp of the zero vector is zero") {
  ModelSpec spec = mlp_spec(4, {6}, 3, true);
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 21, params, state);
  BatchData data = random_batch(net, 5, 3, 22);
  std::vector<double> v(net.param_count(), 0.0), out;
  net.hvp(params, state, data.batch(), LossKind::cross_entropy, v, out);
  for (double x : out) CHECK(x == 0.0);
}

TEST_CASE("hvp is a linear operator") {
  ModelSpec spec = mlp_spec(4, {6}, 3, true);
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 23, params, state);
  BatchData data = random_batch(net, 5, 3, 24);
  Batch b = data.batch();

  Rng rng(25);
  std::vector<double> u = random_vec(net.param_count(), rng);
  std::vector<double> w = random_vec(net.param_count(), rng);
  std::vector<double> combo(net.param_count());
  const double a = 1.7, c = -0.4;
  for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = a * u[i] + c * w[i];

  std::vector<double> hu, hw, hc;
  net.hvp(params, state, b, LossKind::cross_entropy, u, hu);
  net.hvp(params, state, b, LossKind::cross_entropy, w, hw);
  net.hvp(params, state, b, LossKind::cross_entropy, combo, hc);
  std::vector<double> expect(combo.size());
  for (std::size_t i = 0; i < combo.size(); ++i) expect[i] = a * hu[i] + c * hw[i];
  CHECK(vec_rel_err(hc, expect) < 1e-10);
}

TEST_CASE("hvp matches an explicit finite-difference Hessian") {
  struct Case {
    LossKind kind;
    bool with_targets;
  };
  for (Case c : {Case{LossKind::squared, true}, Case{LossKind::cross_entropy, false}}) {
    ModelSpec spec = mlp_spec(6, {8}, 4, true);  // P = 92
    Network net(spec);
    REQUIRE(net.param_count() <= 200);
    std::vector<double> params, state;
    init_params(spec, net.layout(), 31, params, state);
    BatchData data = random_batch(net, 16, 4, 32);
    Batch b = data.batch(c.with_targets);

    std::vector<double> hess = fd_hessian(net, params, state, b, c.kind, 1e-4);
    Rng rng(33);
    const std::size_t p = net.param_count();
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> v = random_vec(p, rng), hv;
      net.hvp(params, state, b, c.kind, v, hv);
      std::vector<double> want(p, 0.0);
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j) want[i] += hess[i * p + j] * v[j];
      CHECK(vec_rel_err(hv, want) < 1e-6);
    }
  }
}

TEST_CASE("hvp through eval-mode batch norm matches finite differences") {
  ZooOptions opts;
  opts.in_height = opts.in_width = 4;
  opts.channels = {2, 2, 2, 2, 2, 2};
  ModelSpec spec = make_model("convnet-toy", 0, 3, opts);
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 41, params, state);
  jitter_state(net, state, 42);
  BatchData data = random_batch(net, 3, 3, 43);
  Batch b = data.batch();

  std::vector<double> hess = fd_hessian(net, params, state, b, LossKind::cross_entropy, 1e-4);
  Rng rng(44);
  const std::size_t p = net.param_count();
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> v = random_vec(p, rng), hv;
    net.hvp(params, state, b, LossKind::cross_entropy, v, hv);
    std::vector<double> want(p, 0.0);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) want[i] += hess[i * p + j] * v[j];
    CHECK(vec_rel_err(hv, want) < 1e-6);
  }
}

TEST_CASE("hvp is symmetric as a bilinear form") {
  ModelSpec spec = mlp_spec(5, {6}, 3, true);
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 51, params, state);
  BatchData data = random_batch(net, 7, 3, 52);
  Batch b = data.batch();

  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> u = random_vec(net.param_count(), rng);
    std::vector<double> w = random_vec(net.param_count(), rng);
    std::vector<double> hu, hw;
    net.hvp(params, state, b, LossKind::cross_entropy, u, hu);
    net.hvp(params, state, b, LossKind::cross_entropy, w, hw);
    double uhw = 0.0, whu = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      uhw += u[i] * hw[i];
      whu += w[i] * hu[i];
    }
    CHECK(rel_err(uhw, whu) < 1e-10);
  }
}

TEST_CASE("jacobian of a linear map embeds the input per output row") {
  ModelSpec spec;
  spec.name = "lin";
  spec.in_channels = 3;
  spec.output_dim = 2;
  spec.layers.push_back(dense_layer(3, 2, false));
  validate_model(spec);
  Network net(spec);
  Rng rng(61);
  std::vector<double> params = random_vec(net.param_count(), rng), state;
  const double x[] = {0.5, -1.5, 2.0};
  std::vector<double> jac;
  net.jacobian(params, state, x, jac);
  // row j holds x in the positions of W's row j, zeros elsewhere
  REQUIRE(jac.size() == 2 * net.param_count());
  for (int j = 0; j < 2; ++j)
    for (int k = 0; k < 3; ++k) {
      CHECK(jac[j * 6 + j * 3 + k] == x[k]);
      CHECK(jac[j * 6 + (1 - j) * 3 + k] == 0.0);
    }
}

TEST_CASE("jacobian matches finite differences of the forward pass") {
  ZooOptions opts;
  opts.in_height = opts.in_width = 4;
  opts.channels = {2, 3, 2, 3, 2, 3};
  ModelSpec spec = make_model("convnet-toy", 0, 3, opts);
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 71, params, state);
  jitter_state(net, state, 72);
  Rng rng(73);
  std::vector<double> x = random_vec(net.input_size(), rng);

  std::vector<double> jac;
  net.jacobian(params, state, x.data(), jac);

  const std::size_t p = net.param_count();
  const int d = net.output_dim();
  std::vector<double> theta = params, up, dn;
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t step = std::max<std::size_t>(1, p / 80);
  for (std::size_t i = 0; i < p; i += step) {
    theta[i] += h;
    net.forward(theta, state, x.data(), 1, up);
    theta[i] -= 2 * h;
    net.forward(theta, state, x.data(), 1, dn);
    theta[i] += h;
    for (int j = 0; j < d; ++j)
      worst = std::max(worst, std::fabs(jac[std::size_t(j) * p + i] - (up[j] - dn[j]) / (2 * h)));
  }
  double scale = 0.0;
  for (double v : jac) scale = std::max(scale, std::fabs(v));
  CHECK(worst / std::max(scale, 1e-12) < 1e-5);
}

TEST_CASE("gradient and hvp are deterministic across calls") {
  ModelSpec spec = mlp_spec(5, {9}, 4, true);
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 81, params, state);
  BatchData data = random_batch(net, 6, 4, 82);
  Batch b = data.batch();

  std::vector<double> g1, g2;
  net.gradient(params, state, b, LossKind::cross_entropy, g1);
  net.gradient(params, state, b, LossKind::cross_entropy, g2);
  CHECK(g1 == g2);

  Rng rng(83);
  std::vector<double> v = random_vec(net.param_count(), rng), h1, h2;
  net.hvp(params, state, b, LossKind::cross_entropy, v, h1);
  net.hvp(params, state, b, LossKind::cross_entropy, v, h2);
  CHECK(h1 == h2);
}

TEST_CASE("train_gradient equals eval gradient on nets without batch norm") {
  ModelSpec spec = mlp_spec(6, {8}, 3, true);
  Network net(spec);
  std::vector<double> params, state;
  init_params(spec, net.layout(), 85, params, state);
  BatchData data = random_batch(net, 10, 3, 86);
  Batch b = data.batch();

  std::vector<double> ge, gt;
  double le = net.gradient(params, state, b, LossKind::cross_entropy, ge);
  double lt = net.train_gradient(params, state, b, LossKind::cross_entropy, true, gt);
  CHECK(le == lt);
  CHECK(ge == gt);
}

TEST_CASE("running statistics blend batch statistics at momentum 0.1") {
  // 1x1 conv so the pre-normalization activations are hand-computable
  ModelSpec spec;
  spec.name = "bn-probe";
  spec.in_channels = 1;
  spec.in_height = spec.in_width = 2;
  spec.output_dim = 2;
  LayerSpec c;
  c.type = LayerType::conv;
  c.in = 1;
  c.out = 2;
  c.kh = c.kw = 1;
  spec.layers.push_back(c);
  spec.layers.push_back({LayerType::batchnorm, 2, 2});
  spec.layers.push_back(relu_layer());
  LayerSpec gp;
  gp.type = LayerType::avgpool;
  gp.kh = gp.kw = 2;
  gp.stride = 2;
  spec.layers.push_back(gp);
  spec.layers.push_back(dense_layer(2, 2, true));
  validate_model(spec);
  Network net(spec);

  std::vector<double> params(net.param_count(), 0.0);
  params[0] = 2.0;   // channel 0 doubles the input
  params[1] = -1.0;  // channel 1 negates it
  const LayerParamInfo& bn = net.layout().layer[1];
  params[bn.offset + 0] = params[bn.offset + 1] = 1.0;  // gamma
  std::vector<double> state(net.state_size(), 0.0);
  state[bn.state_offset + 2] = state[bn.state_offset + 3] = 1.0;  // running var

  std::vector<double> x = {1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0};
  std::vector<int> y = {0, 1};
  Batch b;
  b.x = x.data();
  b.label = y.data();
  b.count = 2;

  std::vector<double> grad;
  net.train_gradient(params, state, b, LossKind::cross_entropy, true, grad);

  // channel 0 sees 2*x over both samples: values 2,4,6,8,-2,0,2,4
  const double m0 = (2 + 4 + 6 + 8 - 2 + 0 + 2 + 4) / 8.0;  // 3.0
  double v0 = 0.0;
  for (double t : {2, 4, 6, 8, -2, 0, 2, 4}) v0 += (t - m0) * (t - m0);
  v0 /= 8.0;
  CHECK(rel_err(state[bn.state_offset + 0], 0.9 * 0.0 + 0.1 * m0) < 1e-14);
  CHECK(rel_err(state[bn.state_offset + 2], 0.9 * 1.0 + 0.1 * v0) < 1e-14);

  // channel 1 sees -x: mean -1.5, same variance as x
  const double m1 = -(1 + 2 + 3 + 4 - 1 + 0 + 1 + 2) / 8.0;
  CHECK(rel_err(state[bn.state_offset + 1], 0.1 * m1) < 1e-14);
}
