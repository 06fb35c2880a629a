#include <doctest.h>

#include <set>

#include "dlbl/architectures.hpp"
#include "dlbl/optimizer.hpp"

using namespace dlbl;

namespace {

Param<float> scalar_param(const std::string& name, float w, float g, bool decay) {
  Param<float> p{name, Tensor4(1, 1, 1, 1, w), Tensor4(1, 1, 1, 1, g), decay};
  return p;
}

}  // namespace

TEST_CASE("single momentum step") {
  SgdMomentum opt({0.9, 0.0});
  auto p = scalar_param("w", 1.f, 0.5f, true);
  opt.step({&p}, 0.1);
  CHECK(opt.velocities().at("w")[0] == doctest::Approx(-0.05f));
  CHECK(p.value[0] == doctest::Approx(0.95f));
  CHECK(p.grad[0] == 0.f);

  auto q = scalar_param("q", 2.f, 0.f, true);
  SgdMomentum still({0.9, 0.0});
  still.step({&q}, 0.1);
  CHECK(q.value[0] == 2.f);
}

TEST_CASE("decay applies only to eligible tensors") {
  SgdMomentum opt({0.0, 0.01});
  auto w = scalar_param("w", 1.f, 0.f, true);
  auto b = scalar_param("b", 1.f, 0.f, false);
  opt.step({&w, &b}, 0.1);
  CHECK(w.value[0] == doctest::Approx(1.f - 0.1f * 0.01f));
  CHECK(b.value[0] == 1.f);

  for (ArchTag tag : {ArchTag::PC, ArchTag::SPL, ArchTag::FPL}) {
    ArchSpec spec = ArchSpec{}.thinned(16);
    spec.tag = tag;
    Network<float> net = build(spec);
    for (std::size_t i = 0; i < net.size(); ++i) {
      const std::string kind = net.layer(i).kind();
      for (auto* p : net.layer(i).params()) {
        const bool weight = p->name.size() > 7 &&
                            p->name.compare(p->name.size() - 7, 7, ".weight") == 0;
        const bool filter = kind == "conv" || kind == "deconv" || kind == "fc";
        CHECK(p->decay == (weight && filter));
      }
    }
  }
}

TEST_CASE("monotone descent on a convex quadratic") {
  // f(w) = 0.5 * sum a_i (w_i - t_i)^2
  const std::vector<float> a{1.f, 3.f, 0.5f, 2.f}, t{1.f, -2.f, 0.5f, 4.f};
  Param<float> p{"w", Tensor4(1, 4, 1, 1), Tensor4(1, 4, 1, 1), true};
  SgdMomentum opt({0.0, 0.0});
  auto loss = [&] {
    double f = 0;
    for (int i = 0; i < 4; ++i) f += 0.5 * a[i] * std::pow(p.value[i] - t[i], 2);
    return f;
  };
  double prev = loss();
  for (int step = 0; step < 100; ++step) {
    for (int i = 0; i < 4; ++i) p.grad[i] = a[i] * (p.value[i] - t[i]);
    opt.step({&p}, 0.1);
    const double f = loss();
    CHECK(f <= prev);
    prev = f;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("velocity change is linear in the gradient") {
  for (float c : {0.5f, 2.f, -3.f}) {
    SgdMomentum a({0.9, 0.0}), b({0.9, 0.0});
    auto pa = scalar_param("w", 1.f, 0.25f, true);
    auto pb = scalar_param("w", 1.f, 0.25f * c, true);
    a.step({&pa}, 0.01);
    b.step({&pb}, 0.01);
    CHECK(b.velocities().at("w")[0] == doctest::Approx(c * a.velocities().at("w")[0]));
  }
}

TEST_CASE("optimizer state round trips through a checkpoint") {
  SgdMomentum opt;
  auto p = scalar_param("w", 1.f, 0.5f, true);
  opt.step({&p}, 0.1);
  Checkpoint ck;
  opt.save_state(ck);
  CHECK(ck.find("opt.velocity.w") != nullptr);
  SgdMomentum other;
  other.load_state(ck);
  CHECK(other.velocities().at("w") == opt.velocities().at("w"));
}

TEST_CASE("learning-rate schedules") {
  CHECK(schedule_lr(ArchTag::PC, 1) == 1e-3);
  CHECK(schedule_lr(ArchTag::PC, 100) == 1e-3);
  CHECK(schedule_lr(ArchTag::PC, 101) == 5e-4);
  CHECK(schedule_lr(ArchTag::PC, 250) == 2.5e-4);
  CHECK(schedule_lr(ArchTag::PC, 350) == 1e-5);
  CHECK(schedule_lr(ArchTag::SPL, 1) == doctest::Approx(1e-4));
  CHECK(schedule_lr(ArchTag::SPL, 350) == doctest::Approx(1e-6));
  CHECK(schedule_lr(ArchTag::FPL, 150) == 5e-4);
  CHECK(schedule_lr(ArchTag::FPL, 250) == 1e-4);
  CHECK(schedule_lr(ArchTag::FPL, 600) == 1e-5);
  CHECK(Schedule::default_epochs(ArchTag::FPL) == 600);
  CHECK(Schedule::default_epochs(ArchTag::PC) == 400);
  CHECK_THROWS_AS(schedule_lr(ArchTag::PC, 0), ConfigError);
  CHECK_THROWS_AS(schedule_lr(ArchTag::PC, 401), ConfigError);

  // contiguous, non-overlapping, covering [1, total]
  for (ArchTag tag : {ArchTag::PC, ArchTag::SPL, ArchTag::FPL}) {
    for (int total : {0, 50, 150, 1000}) {
      const Schedule s = Schedule::for_arch(tag, total);
      CHECK(s.phases().front().first_epoch == 1);
      for (std::size_t i = 1; i < s.phases().size(); ++i)
        CHECK(s.phases()[i].first_epoch == s.phases()[i - 1].last_epoch + 1);
      CHECK(s.total_epochs() == (total ? total : Schedule::default_epochs(tag)));
    }
  }
  CHECK_THROWS_AS(Schedule({{1, 10, 1e-3}, {12, 20, 1e-4}}), ConfigError);
}
