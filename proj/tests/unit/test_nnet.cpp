#include <cmath>
#include <limits>

#include <doctest.h>

#include "generators.hpp"
#include "ssdiff/error.hpp"
#include "ssdiff/nnet.hpp"

using namespace ssdiff;
using namespace ssdiff::nnet;

namespace {

MlpConfig small_config(int in = 3, int out = 2) {
  MlpConfig c;
  c.input_dim = in;
  c.output_dim = out;
  c.width = 16;
  c.hidden_layers = 3;
  c.time_dim = 8;
  return c;
}

Matrix random_matrix(int r, int c, Rng& rng) {
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = standard_normal(rng);
  return m;
}

// The zero-initialized output layer blocks gradients to the hidden layers.
void randomize_output_layer(Mlp& net, Rng& rng) {
  auto& ps = net.params();
  for (std::size_t i = ps.size() - 2; i < ps.size(); ++i) {
    ps[i].value = 0.3 * random_matrix(static_cast<int>(ps[i].value.rows()), static_cast<int>(ps[i].value.cols()), rng);
  }
}

// 0.5 * sum(out^2) as a custom tape node.
Tape::Id half_square(Tape& tape, Tape::Id out) {
  const Matrix v = tape.value(out);
  return tape.sum(tape.custom(out, 0.5 * v.array().square().matrix(),
                              [v](const Matrix& up) { return Matrix(up.cwiseProduct(v)); }, "half_square"));
}

double half_square_loss(const Mlp& net, const Matrix& g, const Matrix& te) {
  return 0.5 * net.predict(g, te).squaredNorm();
}

}  // namespace

TEST_SUITE("nnet") {
  TEST_CASE("time embedding") {
    const Vector e0 = time_embedding(0.0, 100, 32);
    CHECK(e0.head(16).cwiseAbs().maxCoeff() == 0.0);
    CHECK((e0.tail(16).array() == 1.0).all());
    for (int t : {1, 17, 50, 100}) CHECK(time_embedding(t, 100, 32).norm() == doctest::Approx(4.0).epsilon(1e-14));
    double worst = -1.0;
    for (int a = 1; a <= 100; ++a) {
      const Vector ea = time_embedding(a, 100, 32);
      for (int b = a + 1; b <= 100; ++b) {
        const Vector eb = time_embedding(b, 100, 32);
        worst = std::max(worst, ea.dot(eb) / (ea.norm() * eb.norm()));
      }
    }
    CHECK(worst < 1.0 - 1e-6);
    CHECK_THROWS_AS((void)time_embedding(1.0, 100, 7), Error);
  }

  TEST_CASE("forward at init and purity") {
    Rng rng = make_stream(51, 0);
    const Mlp net(small_config(), rng);
    const Matrix g = random_matrix(5, 3, rng);
    const std::vector<int> ts{1, 2, 3, 4, 5};
    const Matrix te = time_embedding(ts, 10, 8);
    CHECK(net.predict(g, te).cwiseAbs().maxCoeff() == 0.0);

    Mlp moved = net;
    randomize_output_layer(moved, rng);
    Matrix same(4, 3);
    for (int i = 0; i < 4; ++i) same.row(i) = g.row(0);
    const std::vector<int> t4(4, 3);
    const Matrix out = moved.predict(same, time_embedding(t4, 10, 8));
    for (int i = 1; i < 4; ++i) CHECK((out.row(i) - out.row(0)).norm() == 0.0);

    Tape tape;
    const Tape::Id id = moved.forward(tape, g, te);
    CHECK((tape.value(id) - moved.predict(g, te)).norm() == 0.0);
  }

  TEST_CASE("parameter count follows the config") {
    Rng a = make_stream(52, 0), b = make_stream(52, 1);
    const MlpConfig c = small_config(3, 2);
    const Mlp n1(c, a), n2(c, b);
    const std::size_t in = 3 + 8, w = 16;
    CHECK(n1.parameter_count() == in * w + w + 2 * (w * w + w) + w * 2 + 2);
    CHECK(n1.parameter_count() == n2.parameter_count());
    CHECK(static_cast<std::size_t>(n1.flat_values().size()) == n1.parameter_count());
  }

  TEST_CASE("non-finite activations are reported") {
    Rng rng = make_stream(53, 0);
    Mlp net(small_config(), rng);
    Matrix g = Matrix::Zero(2, 3);
    g(1, 2) = std::numeric_limits<double>::quiet_NaN();
    const std::vector<int> ts{1, 2};
    Tape tape;
    try {
      (void)net.forward(tape, g, time_embedding(ts, 10, 8));
      FAIL("expected NumericalOverflow");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NumericalOverflow);
    }
  }

  TEST_CASE("input Jacobian-vector product") {
    Rng rng = make_stream(54, 0);
    Mlp net(small_config(3, 1), rng);
    randomize_output_layer(net, rng);
    const Matrix x = random_matrix(1, 3, rng), v = random_matrix(1, 3, rng);
    const std::vector<int> ts{4};
    const Matrix te = time_embedding(ts, 10, 8);

    // The network does not expose its input node, so the Jacobian oracle is a
    // fine central difference; its error is far below the O(eps^2) residual.
    Matrix jac(1, 3);
    for (int k = 0; k < 3; ++k) {
      Matrix xp = x, xm = x;
      xp(0, k) += 1e-6;
      xm(0, k) -= 1e-6;
      jac(0, k) = (net.predict(xp, te)(0, 0) - net.predict(xm, te)(0, 0)) / 2e-6;
    }
    const double jv = (jac * v.transpose())(0, 0);
    const double f0 = net.predict(x, te)(0, 0);
    const auto residual = [&](double eps) { return std::abs(net.predict(x + eps * v, te)(0, 0) - f0 - eps * jv); };
    const double r3 = residual(1e-3), r4 = residual(1e-4);
    CHECK(r3 < 1e-4);
    CHECK(r4 < r3 / 20.0);
  }

  TEST_CASE("gradients match central differences") {
    Rng rng = make_stream(55, 0);
    Mlp net(small_config(), rng);
    randomize_output_layer(net, rng);
    const Matrix g = random_matrix(6, 3, rng);
    const std::vector<int> ts{1, 3, 5, 7, 9, 10};
    const Matrix te = time_embedding(ts, 10, 8);

    net.zero_grad();
    Tape tape;
    tape.backward(half_square(tape, net.forward(tape, g, te)));

    auto& ps = net.params();
    double worst = 0.0;
    int probes = 0;
    for (std::size_t layer = 0; probes < 200; layer = (layer + 1) % ps.size()) {
      Parameter& p = ps[layer];
      const auto r = static_cast<Eigen::Index>(uniform01(rng) * p.value.rows()) % p.value.rows();
      const auto c = static_cast<Eigen::Index>(uniform01(rng) * p.value.cols()) % p.value.cols();
      const double keep = p.value(r, c), h = 1e-4;
      p.value(r, c) = keep + h;
      const double up = half_square_loss(net, g, te);
      p.value(r, c) = keep - h;
      const double down = half_square_loss(net, g, te);
      p.value(r, c) = keep;
      const double fd = (up - down) / (2 * h), an = p.grad(r, c);
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++probes;
    }
    CHECK(worst <= 1e-4);
  }

  TEST_CASE("output bias gradient of half squared norm") {
    Rng rng = make_stream(56, 0);
    Mlp net(small_config(), rng);
    randomize_output_layer(net, rng);
    const Matrix g = random_matrix(1, 3, rng);
    const std::vector<int> ts{2};
    const Matrix te = time_embedding(ts, 10, 8);
    net.zero_grad();
    Tape tape;
    const Tape::Id out = net.forward(tape, g, te);
    tape.backward(half_square(tape, out));
    CHECK((net.params().back().grad - tape.value(out)).norm() <= 1e-15);
  }

  TEST_CASE("constant loss and graph integrity") {
    Rng rng = make_stream(57, 0);
    Mlp net(small_config(), rng);
    randomize_output_layer(net, rng);
    const Matrix g = random_matrix(2, 3, rng);
    const std::vector<int> ts{1, 2};
    const Matrix te = time_embedding(ts, 10, 8);
    net.zero_grad();
    Tape tape;
    const Tape::Id out = net.forward(tape, g, te);
    tape.backward(tape.add(tape.scale(tape.sum(out), 0.0), tape.constant(Matrix::Constant(1, 1, 2.5))));
    for (const Parameter& p : net.params()) CHECK(p.grad.norm() == 0.0);

    Parameter stray{"stray", Matrix::Ones(1, 1), Matrix::Zero(1, 1)};
    Tape t2;
    (void)t2.parameter(stray);
    const Tape::Id loss = t2.sum(t2.constant(Matrix::Ones(2, 2)));
    try {
      t2.backward(loss);
      FAIL("expected GraphIntegrity");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::GraphIntegrity);
    }
    CHECK_NOTHROW(t2.backward(loss, false));
  }

  TEST_CASE("Adam with zero gradients") {
    std::vector<Parameter> ps{{"w", Matrix::Constant(2, 2, 0.7), Matrix::Zero(2, 2)}};
    OptimState opt = make_optimizer(ps, AdamConfig{});
    opt.ema[0] = Matrix::Zero(2, 2);
    for (int i = 0; i < 10; ++i) {
      CHECK(adam_step(opt, ps));
      ema_update(opt, ps);
    }
    CHECK((ps[0].value.array() == 0.7).all());
    CHECK(opt.step == 10);
    CHECK((opt.ema[0] - ps[0].value).norm() < (Matrix::Constant(2, 2, 0.7)).norm());
  }

  TEST_CASE("Adam converges on a quadratic") {
    std::vector<Parameter> ps{{"p", Matrix::Constant(1, 1, -2.0), Matrix::Zero(1, 1)}};
    AdamConfig cfg;
    cfg.lr = 1e-2;
    cfg.clip_norm = 0.0;
    OptimState opt = make_optimizer(ps, cfg);
    int steps = 0;
    while (steps < 5000 && std::abs(ps[0].value(0, 0) - 3.0) > 1e-6) {
      ps[0].grad(0, 0) = 2.0 * (ps[0].value(0, 0) - 3.0);
      REQUIRE(adam_step(opt, ps));
      ++steps;
    }
    CHECK(std::abs(ps[0].value(0, 0) - 3.0) <= 1e-6);
    CHECK(steps <= 5000);
  }

  TEST_CASE("global norm clipping") {
    std::vector<Parameter> ps{{"a", Matrix::Zero(1, 2), Matrix(1, 2)}, {"b", Matrix::Zero(1, 1), Matrix(1, 1)}};
    ps[0].grad << 6.0, 0.0;
    ps[1].grad << 8.0;
    CHECK(clip_gradients(ps, 1.0) == 10.0);
    CHECK(global_grad_norm(ps) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(ps[0].grad(0, 0) / ps[1].grad(0, 0) == doctest::Approx(0.75));
    CHECK(clip_gradients(ps, 5.0) == doctest::Approx(1.0));
    CHECK(global_grad_norm(ps) == doctest::Approx(1.0));
  }

  TEST_CASE("non-finite gradients are rejected") {
    std::vector<Parameter> ps{{"w", Matrix::Constant(1, 3, 0.5), Matrix::Constant(1, 3, 0.1)}};
    OptimState opt = make_optimizer(ps, AdamConfig{});
    REQUIRE(adam_step(opt, ps));
    const Matrix before = ps[0].value;
    ps[0].grad(0, 1) = std::numeric_limits<double>::infinity();
    CHECK_FALSE(adam_step(opt, ps));
    CHECK(opt.step == 1);
    CHECK((ps[0].value - before).norm() == 0.0);
  }

  TEST_CASE("EMA contract with frozen params") {
    Rng rng = make_stream(58, 0);
    std::vector<Parameter> ps{{"w", random_matrix(3, 3, rng), Matrix::Zero(3, 3)}};
    AdamConfig cfg;
    cfg.ema_decay = 0.9;
    for (bool warmup : {false, true}) {
      cfg.ema_warmup = warmup;
      OptimState opt = make_optimizer(ps, cfg);
      opt.ema[0] = random_matrix(3, 3, rng);
      const double d0 = (opt.ema[0] - ps[0].value).norm();
      for (int n = 1; n <= 50; ++n) {
        ema_update(opt, ps);
        ++opt.step;
        CHECK((opt.ema[0] - ps[0].value).norm() <= std::pow(0.9, n) * d0 * (1 + 1e-12));
      }
    }
    OptimState opt = make_optimizer(ps, cfg);
    std::vector<Parameter> copy = ps;
    copy[0].value.setZero();
    load_ema(opt, copy);
    CHECK((copy[0].value - ps[0].value).norm() == 0.0);
  }

  TEST_CASE("training is deterministic and checkpoints round trip") {
    const auto run = [](int seed) {
      Rng rng = make_stream(seed, 0);
      Mlp net(small_config(), rng);
      OptimState opt = make_optimizer(net.params(), AdamConfig{1e-3});
      for (int step = 0; step < 20; ++step) {
        const Matrix g = random_matrix(8, 3, rng);
        std::vector<int> ts(8);
        for (int& t : ts) t = 1 + static_cast<int>(uniform01(rng) * 10) % 10;
        const Matrix target = random_matrix(8, 2, rng);
        net.zero_grad();
        Tape tape;
        const Tape::Id out = net.forward(tape, g, time_embedding(ts, 10, 8));
        const Tape::Id diff = tape.add(out, tape.constant(-target));
        tape.backward(half_square(tape, diff));
        clip_gradients(net.params(), opt.config.clip_norm);
        adam_step(opt, net.params());
        ema_update(opt, net.params());
      }
      return std::pair{net, opt};
    };
    const auto [a, opt_a] = run(59);
    const auto [b, opt_b] = run(59);
    CHECK((a.flat_values() - b.flat_values()).norm() == 0.0);
    CHECK(a.flat_values().norm() > 0.0);

    Checkpoint ck;
    ck.config_json = R"({"experiment":"unit"})";
    ck.mlp = a.config();
    ck.net = a;
    ck.opt = opt_a;
    ck.schedule_hash = 0x1234abcdULL;
    ck.normalizer_hash = 0xfeedULL;
    ck.normalizer_json = "{}";
    const Checkpoint back = checkpoint_from_json(checkpoint_to_json(ck));
    CHECK((back.net.flat_values() - a.flat_values()).norm() == 0.0);
    CHECK(back.opt.step == opt_a.step);
    for (std::size_t i = 0; i < opt_a.ema.size(); ++i) {
      CHECK((back.opt.ema[i] - opt_a.ema[i]).norm() == 0.0);
      CHECK((back.opt.m[i] - opt_a.m[i]).norm() == 0.0);
      CHECK((back.opt.v[i] - opt_a.v[i]).norm() == 0.0);
    }
    CHECK(back.schedule_hash == ck.schedule_hash);
    CHECK(back.normalizer_hash == ck.normalizer_hash);
    CHECK(back.config_json == ck.config_json);
    CHECK(checkpoint_to_json(back) == checkpoint_to_json(ck));
  }
}
