#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "dlbl/architectures.hpp"
#include "dlbl/gradcheck.hpp"
#include "dlbl/network.hpp"
#include "oracles.hpp"

using namespace dlbl;
namespace fs = std::filesystem;

namespace {

Network<double> toy_net() {
  Network<double> net("toy");
  net.add(std::make_unique<Conv2d<double>>("c1", 2, 3, ConvGeometry{3, 1, 1}));
  net.add(std::make_unique<LeakyRelu<double>>("r1", 0.1));
  net.add(std::make_unique<Pool2d<double>>("p1", PoolGeometry{3, 2, 1, PoolMode::average}));
  net.add(std::make_unique<FullyConnected<double>>("fc", Shape{1, 3, 3, 3}, 4));
  return net;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("dlbl_test_" + name);
}

}  // namespace

TEST_CASE("duplicate layer names are rejected") {
  Network<float> net;
  net.add(std::make_unique<LeakyRelu<float>>("a", 0.1f));
  CHECK_THROWS_AS(net.add(std::make_unique<LeakyRelu<float>>("a", 0.1f)), ConfigError);
}

TEST_CASE("shape errors name the layer") {
  Network<double> net = toy_net();
  try {
    net.shape_chain({1, 5, 5, 5});
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("c1") != std::string::npos);
  }
}

TEST_CASE("end-to-end finite differences on a toy network") {
  Network<double> net = toy_net();
  Rng rng(1);
  net.init_weights(rng);
  std::mt19937_64 gen(2);
  // redraw until no pre-activation sits within a step of the leaky ReLU kink
  auto x = oracle::random_tensor<double>({2, 2, 5, 5}, gen);
  auto clear_of_kink = [&] {
    ForwardContext ctx{Mode::eval, nullptr, false};
    for (double v : net.layer(0).forward(x, ctx).values())
      if (std::abs(v) < 0.02) return false;
    return true;
  };
  while (!clear_of_kink()) x = oracle::random_tensor<double>({2, 2, 5, 5}, gen);
  const auto y = net.forward(x);
  const auto r = oracle::random_tensor<double>(y.shape(), gen);
  net.zero_grad();
  const auto dx = net.backward(r);
  auto f = [&] { return dot(net.forward(x), r); };

  std::vector<double> num(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double k = x[i];
    x[i] = k + 1e-3;
    const double fp = f();
    x[i] = k - 1e-3;
    const double fm = f();
    x[i] = k;
    num[i] = (fp - fm) / 2e-3;
  }
  CHECK(normwise_relative_error({dx.values().begin(), dx.values().end()}, num) < 1e-4);

  for (auto* p : net.params()) {
    std::vector<double> pn(p->value.size());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double k = p->value[i];
      p->value[i] = k + 1e-3;
      const double fp = f();
      p->value[i] = k - 1e-3;
      const double fm = f();
      p->value[i] = k;
      pn[i] = (fp - fm) / 2e-3;
    }
    INFO(p->name);
    CHECK(normwise_relative_error({p->grad.values().begin(), p->grad.values().end()}, pn) <
          1e-4);
  }
}

TEST_CASE("gradients accumulate and zero loss gradient gives zero gradients") {
  ArchSpec spec;
  spec.tag = ArchTag::SPL;
  spec = spec.thinned(16);
  Network<float> net = build(spec);
  Rng rng(3);
  net.init_weights(rng);
  std::mt19937_64 gen(4);
  const auto x = oracle::random_tensor<float>({2, 4, 65, 65}, gen);

  net.seed(7);
  const auto y = net.forward(x);
  net.zero_grad();
  net.backward(Tensor4(y.shape()));
  for (auto* p : net.params())
    for (float g : p->grad.values()) CHECK(g == 0.f);

  const auto dy = oracle::random_tensor<float>(y.shape(), gen);
  net.zero_grad();
  net.backward(dy);
  std::vector<Tensor4> once;
  for (auto* p : net.params()) once.push_back(p->grad);
  net.backward(dy);
  std::size_t k = 0;
  for (auto* p : net.params()) {
    const Tensor4& a = once[k++];
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(p->grad[i] == 2.f * a[i]);
  }
}

TEST_CASE("eval mode is deterministic and leaves running stats alone") {
  ArchSpec spec = ArchSpec{}.thinned(16);
  Network<float> net = build(spec);
  Rng rng(5);
  net.init_weights(rng);
  std::mt19937_64 gen(6);
  const auto x = oracle::random_tensor<float>({2, 4, 33, 33}, gen);
  net.forward(x);  // train-mode pass moves the running stats
  net.set_mode(Mode::eval);
  const Checkpoint before = make_checkpoint(net);
  const auto a = net.forward(x);
  const auto b = net.forward(x);
  CHECK(a == b);
  CHECK(net.infer(x) == a);
  const Checkpoint after = make_checkpoint(net);
  for (std::size_t i = 0; i < before.tensors.size(); ++i)
    CHECK(before.tensors[i].second.data == after.tensors[i].second.data);
}

TEST_CASE("copies are deep") {
  Network<float> net = build(ArchSpec{}.thinned(16));
  Rng rng(1);
  net.init_weights(rng);
  Network<float> copy = net;
  copy.params()[0]->value[0] += 1.f;
  CHECK(copy.params()[0]->value[0] != net.params()[0]->value[0]);
}

TEST_CASE("checkpoint round trip") {
  ArchSpec spec = ArchSpec{}.thinned(16);
  Network<float> net = build(spec);
  Rng rng(8);
  net.init_weights(rng);
  std::mt19937_64 gen(9);
  const auto x = oracle::random_tensor<float>({1, 4, 65, 65}, gen);
  net.forward(x);
  net.set_mode(Mode::eval);
  const auto ref = net.forward(x);

  Checkpoint ck = make_checkpoint(net);
  ck.set_meta("epoch", 12);
  const fs::path p1 = temp_file("a.ckpt"), p2 = temp_file("b.ckpt");
  write_checkpoint(ck, p1);
  const Checkpoint back = read_checkpoint(p1);
  CHECK(back.meta_value("epoch") == 12u);
  write_checkpoint(back, p2);
  CHECK(slurp(p1) == slurp(p2));

  Network<float> loaded = load_network(p1);
  CHECK(loaded.forward(x) == ref);
  CHECK(load_network(p1, spec).arch_tag() == spec.tag_string());

  ArchSpec other = spec;
  other.tag = ArchTag::SPL;
  CHECK_THROWS_AS(load_network(p1, other), DataError);
  Network<float> wrong = build(other);
  CHECK_THROWS_AS(load_into(wrong, back), Error);

  {
    std::ofstream bad(p2, std::ios::binary);
    bad << "NOPE0000";
  }
  CHECK_THROWS_AS(read_checkpoint(p2), DataError);
  std::string bytes = slurp(p1);
  bytes[4] = 9;  // version
  {
    std::ofstream bad(p2, std::ios::binary);
    bad << bytes;
  }
  CHECK_THROWS_AS(read_checkpoint(p2), DataError);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("warm start from a patch classifier checkpoint") {
  ArchSpec pc_spec = ArchSpec{}.thinned(16);
  pc_spec.tag = ArchTag::PC;
  Network<float> pc = build(pc_spec);
  Rng rng(10);
  pc.init_weights(rng);
  const Checkpoint ck = make_checkpoint(pc);

  for (ArchTag tag : {ArchTag::SPL, ArchTag::FPL}) {
    ArchSpec spec = pc_spec;
    spec.tag = tag;
    Network<float> net = build(spec);
    Rng r2(11);
    net.init_weights(r2);
    const auto rep = warm_start(net, ck, pc_warm_start_map());
    // four blocks: conv weight/bias, bn gamma/beta/mean/var
    CHECK(rep.loaded.size() == 24);
    for (const auto& name : rep.loaded) CHECK(name.rfind("block", 0) == 0);
    for (const auto& name : rep.skipped) CHECK(name.rfind("block", 0) != 0);
    CHECK(net.find("block2.conv.weight")->value ==
          from_record(*ck.find("block2.conv.weight")));
    if (tag == ArchTag::FPL) CHECK(rep.skipped.size() == 3 * 6 + 2);
    else CHECK(rep.skipped.size() == 2);

    const auto none = warm_start(net, ck, {});
    CHECK(none.loaded.empty());
    CHECK(none.skipped.size() == net.params().size() + net.buffers().size());
  }
}
