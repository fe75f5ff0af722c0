#include <doctest.h>

#include <set>

#include "retro/errors.hpp"
#include "retro/nn.hpp"
#include "support.hpp"

using namespace retro;
using namespace testsupport;
using nn::BnMode;

namespace {

nn::Network small_teacher(std::uint64_t seed = 7) {
  return nn::Network::build(nn::EncoderConfig{{8, 16}, {2, 2}, {2, 2}, 3}, std::nullopt, {0, 12, 10}, seed);
}

const nn::EncoderConfig kSmallStudent{{4, 6}, {2, 2}, {2, 2}, 3};

std::set<std::string> names(const nn::Network& net) {
  std::set<std::string> out;
  for (const Parameter* p : net.parameters()) out.insert(p->name());
  return out;
}

bool same_values(const Parameter& a, const Parameter& b) { return bit_identical(a.tensor(), b.tensor()); }

bool heads_identical(const nn::ProjectionHead& a, const nn::ProjectionHead& b) {
  return same_values(a.linear1.weight, b.linear1.weight) && same_values(a.linear1.bias, b.linear1.bias) &&
         same_values(a.linear2.weight, b.linear2.weight) && same_values(a.linear2.bias, b.linear2.bias);
}

double max_row_norm_error(const Tensor& e) {
  double worst = 0.0;
  const std::size_t d = e.dim(1);
  for (std::size_t r = 0; r < e.dim(0); ++r) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) n2 += double(e.data()[r * d + c]) * e.data()[r * d + c];
    worst = std::max(worst, std::abs(std::sqrt(n2) - 1.0));
  }
  return worst;
}

}  // namespace

TEST_CASE("desk encoders map 32x32 input to a 4x4 feature map") {
  const auto student = nn::EncoderConfig::desk_student();
  CHECK(student.widths.size() == 3);
  CHECK(student.feature_shape({5, 3, 32, 32}) == Shape{5, 64, 4, 4});
  CHECK(student.representation_dim() == 64);
  CHECK(nn::EncoderConfig::desk_teacher().representation_dim() == 128);

  std::mt19937_64 rng(1), data_rng(2);
  nn::Encoder enc(student, rng);
  Tape tape = Tape::no_grad();
  CHECK(enc.forward(tape, randn({2, 3, 32, 32}, data_rng), BnMode::kTrain).shape() == Shape{2, 64, 4, 4});
}

TEST_CASE("encoder config errors") {
  CHECK_THROWS_AS((nn::EncoderConfig{{4, 8}, {1}, {3, 3}, 3}.validate()), ConfigError);
  CHECK_THROWS_AS((nn::EncoderConfig{{}, {}, {}, 3}.validate()), ConfigError);
  CHECK_THROWS_AS((nn::EncoderConfig{{4}, {0}, {3}, 3}.validate()), ConfigError);
}

TEST_CASE("initialization is a function of the seed") {
  const auto a = nn::Network::build(kSmallStudent, 16, {0, 12, 10}, 3);
  const auto b = nn::Network::build(kSmallStudent, 16, {0, 12, 10}, 3);
  const auto c = nn::Network::build(kSmallStudent, 16, {0, 12, 10}, 4);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(same_values(*pa[i], *pb[i]));
    if (!pa[i]->is_buffer() && !same_values(*pa[i], *pc[i])) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("weights use fan-in uniform bounds, batchnorm starts at identity") {
  const auto net = nn::Network::build(kSmallStudent, std::nullopt, {0, 12, 10}, 3);
  for (const Parameter* p : net.parameters()) {
    if (p->name().find("bn.gamma") != std::string::npos) {
      for (float v : p->values()) CHECK(v == 1.0f);
    } else if (p->name().find("bn.beta") != std::string::npos) {
      for (float v : p->values()) CHECK(v == 0.0f);
    } else if (p->name() == "head.linear1.weight") {
      const double bound = 1.0 / std::sqrt(6.0);
      for (float v : p->values()) CHECK(std::abs(v) <= bound);
    }
  }
}

TEST_CASE("student, teacher and mean embeddings are unit rows") {
  auto assembly = nn::ModelAssembly::retro(small_teacher(), kSmallStudent, 9);
  std::mt19937_64 rng(4);
  const Tensor v = randn({4, 3, 8, 8}, rng);
  Tape tape;
  const Tensor e_s = assembly.forward_student(tape, v);
  CHECK(e_s.shape() == Shape{4, 10});
  CHECK(max_row_norm_error(e_s) < 1e-6);
  CHECK(max_row_norm_error(assembly.forward_teacher(v)) < 1e-6);
  CHECK(max_row_norm_error(assembly.forward_mean(v)) < 1e-6);
}

TEST_CASE("teacher forward is deterministic and leaves the teacher untouched") {
  auto assembly = nn::ModelAssembly::retro(small_teacher(), kSmallStudent, 9);
  const nn::Network before = assembly.teacher();
  std::mt19937_64 rng(4);
  const Tensor v = randn({3, 3, 8, 8}, rng);
  const Tensor a = assembly.forward_teacher(v);
  const Tensor b = assembly.forward_teacher(v);
  CHECK(bit_identical(a, b));
  CHECK_FALSE(a.requires_grad());
  const auto now = assembly.teacher().parameters();
  const auto then = before.parameters();
  for (std::size_t i = 0; i < now.size(); ++i) CHECK(same_values(*now[i], *then[i]));
}

TEST_CASE("mean student equals the student before any EMA step") {
  auto assembly = nn::ModelAssembly::retro(small_teacher(), kSmallStudent, 9);
  std::mt19937_64 rng(5);
  const Tensor v = randn({4, 3, 8, 8}, rng);
  const Tensor e_m = assembly.forward_mean(v);
  Tape tape;
  CHECK(bit_identical(assembly.forward_student(tape, v), e_m));
  CHECK(names(assembly.student()) == names(assembly.mean_student()));
}

TEST_CASE("identity adapter reduces to the head over pooled features") {
  // student and teacher widths agree; adapter conv = identity, batchnorm at
  // its initial running statistics in eval mode
  const nn::EncoderConfig enc{{4, 6}, {2, 2}, {2, 2}, 3};
  auto net = nn::Network::build(enc, 6, {0, 5, 4}, 2);
  auto w = net.adapter()->conv.weight.mutable_values();
  std::fill(w.begin(), w.end(), 0.0f);
  for (std::size_t c = 0; c < 6; ++c) w[c * 6 + c] = 1.0f;

  std::mt19937_64 rng(6);
  const Tensor v = randn({3, 3, 8, 8}, rng);
  Tape tape = Tape::no_grad();
  const Tensor with_adapter = net.embed(tape, v, BnMode::kEval);
  const Tensor pooled = net.representation(tape, v, BnMode::kEval);
  const Tensor direct = ops::l2_normalize(tape, net.head().forward(tape, pooled));
  CHECK(max_abs_diff(with_adapter, direct) < 1e-5);
}

TEST_CASE("frozen head receives no gradient, encoder and adapter do") {
  auto assembly = nn::ModelAssembly::retro(small_teacher(), kSmallStudent, 9);
  REQUIRE(assembly.head_frozen());
  std::mt19937_64 rng(8);
  const Tensor v = randn({4, 3, 8, 8}, rng);
  Tape tape;
  const Tensor e_s = assembly.forward_student(tape, v);
  tape.backward(ops::sum(tape, ops::mul(tape, e_s, randn(e_s.shape(), rng))));
  for (const Parameter* p : assembly.student().parameters()) {
    INFO(p->name());
    if (p->name().rfind("head.", 0) == 0 || p->is_buffer()) {
      CHECK_FALSE(p->tensor().has_grad());
    } else {
      CHECK(p->tensor().has_grad());
    }
  }
}

TEST_CASE("transplant copies the teacher head exactly and is idempotent") {
  const nn::Network teacher = small_teacher();
  auto student = nn::Network::build(kSmallStudent, 16, {0, 3, 10}, 1);
  CHECK_FALSE(heads_identical(student.head(), teacher.head()));
  nn::transplant_head(teacher, student);
  CHECK(heads_identical(student.head(), teacher.head()));
  CHECK_FALSE(student.head().trainable());
  nn::transplant_head(teacher, student);
  CHECK(heads_identical(student.head(), teacher.head()));

  auto assembly = nn::ModelAssembly::retro(small_teacher(), kSmallStudent, 9);
  CHECK(heads_identical(assembly.student().head(), assembly.teacher().head()));
  CHECK(heads_identical(assembly.mean_student().head(), assembly.teacher().head()));
  assembly.transplant_head();
  CHECK(heads_identical(assembly.mean_student().head(), assembly.teacher().head()));
}

TEST_CASE("transplant without a matching adapter is a dimension error") {
  const nn::Network teacher = small_teacher();
  auto plain = nn::Network::build(kSmallStudent, std::nullopt, {0, 3, 10}, 1);
  CHECK_THROWS_AS(nn::transplant_head(teacher, plain), DimensionError);
  auto narrow = nn::Network::build(kSmallStudent, 8, {0, 3, 10}, 1);
  CHECK_THROWS_AS(nn::transplant_head(teacher, narrow), DimensionError);
  // a head that does not fit the pre-pool map fails at assembly time
  std::mt19937_64 rng(1);
  nn::Encoder enc(kSmallStudent, rng);
  nn::ProjectionHead head({16, 4, 4}, rng);
  CHECK_THROWS_AS(nn::Network(enc, std::nullopt, head), DimensionError);
}

TEST_CASE("RETRO trains exactly one head fewer than DisCo") {
  const nn::Network teacher = small_teacher();
  auto retro_mode = nn::ModelAssembly::retro(teacher, kSmallStudent, 3);
  auto disco_mode = nn::ModelAssembly::disco(teacher, kSmallStudent, teacher.head().linear1.out_dim(), 3);
  const std::size_t head = teacher.head().parameter_count();
  CHECK(head == 16 * 12 + 12 + 12 * 10 + 10);
  CHECK(retro_mode.student().trainable_parameter_count() + head ==
        disco_mode.student().trainable_parameter_count());
  CHECK(retro_mode.teacher().trainable_parameter_count() == 0);
  CHECK(retro_mode.mean_student().trainable_parameter_count() == 0);
  retro_mode.set_head_frozen(false);
  CHECK(retro_mode.student().trainable_parameter_count() == disco_mode.student().trainable_parameter_count());
}

TEST_CASE("full embedding path gradients match finite differences away from relu kinks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto net = std::make_shared<nn::Network>(
        nn::Network::build(nn::EncoderConfig{{3, 4}, {2, 1}, {2, 3}, 2}, 5, {0, 4, 3}, seed));
    std::mt19937_64 rng(seed + 100);
    const Tensor x = randn({3, 2, 4, 4}, rng);
    const Tensor w = randn({3, 3}, rng);
    std::vector<Tensor> params;
    for (Parameter* p : net->parameters()) {
      if (p->trainable()) params.push_back(p->tensor());
    }
    const GradCheck r = gradcheck(
        [&](Tape& t, const std::vector<Tensor>&) {
          return ops::sum(t, ops::mul(t, net->embed(t, x, BnMode::kTrainNoUpdate), w));
        },
        params, 1e-3, 1e-6, true);
    INFO("seed " << seed << " skipped " << r.skipped_kinks << " of " << r.checked_elements);
    CHECK(r.skipped_kinks * 10 < r.checked_elements);
    // Eleven chained f32 ops put the difference noise above the per-op 1e-3 bound.
    CHECK(r.rel_error < 5e-3);
  }
}
