#include <doctest.h>

#include <json.hpp>

#include "retro/errors.hpp"
#include "retro/eval.hpp"
#include "scenarios.hpp"

using namespace retro;
using namespace testsupport;

namespace {

const nn::EncoderConfig kSmallEncoder{{8, 16}, {2, 2}, {4, 4}, 3};

nn::Network random_network(std::uint64_t seed) {
  return nn::Network::build(kSmallEncoder, std::nullopt, {0, 16, 16}, seed);
}

// Brute force: sort every train row by (similarity desc, index asc), vote,
// smallest class wins a tied vote.
std::vector<int> knn_oracle(const Tensor& train, const std::vector<int>& labels, const Tensor& query,
                            std::size_t classes, std::size_t k) {
  const std::size_t d = train.dim(1);
  auto unit = [d](const Tensor& t, std::size_t r) {
    std::vector<long double> v(d);
    long double n2 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      v[j] = t.data()[r * d + j];
      n2 += v[j] * v[j];
    }
    for (auto& x : v) x = n2 > 0 ? x / std::sqrt(n2) : 0;
    return v;
  };
  std::vector<int> out;
  for (std::size_t q = 0; q < query.dim(0); ++q) {
    const auto qv = unit(query, q);
    std::vector<std::pair<long double, std::size_t>> sims;
    for (std::size_t i = 0; i < train.dim(0); ++i) {
      const auto tv = unit(train, i);
      long double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += qv[j] * tv[j];
      sims.emplace_back(-s, i);
    }
    std::sort(sims.begin(), sims.end());
    std::vector<int> votes(classes, 0);
    for (std::size_t i = 0; i < k; ++i) ++votes[labels[sims[i].second]];
    int best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (votes[c] > votes[best]) best = static_cast<int>(c);
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST_CASE("probe on a random encoder beats chance and leaves the encoder alone") {
  const auto train = data::generate_synthetic(10, 40, 16, 1);
  const auto test = data::generate_synthetic(10, 20, 16, 2);
  // random features are small (rms ~0.05), hence the default lr of 3
  auto net = nn::Network::build({{32, 64}, {2, 1}, {4, 3}, 3}, std::nullopt, {0, 16, 16}, 3);
  const nn::Network before = net;
  eval::ProbeConfig cfg;
  cfg.batch_size = 64;
  const auto report = eval::linear_probe(net.encoder(), train, test, cfg);
  MESSAGE("random encoder probe top1 " << report.top1 << " top5 " << report.top5);
  CHECK(report.kind == "linear_probe");
  CHECK(report.test_size == 200);
  CHECK(report.top1 > 0.15);  // chance is 0.1
  CHECK(report.top5 >= report.top1);
  CHECK(report.per_class.size() == 10);
  CHECK(params_identical(std::as_const(net).parameters(), before.parameters()));

  const auto again = eval::linear_probe(net.encoder(), train, test, cfg);
  CHECK(again.top1 == report.top1);
  CHECK(again.per_class == report.per_class);
}

TEST_CASE("score_logits ranks with ties to the smaller class") {
  // row 0: true class 2 ties class 0 and loses; row 1: true class 1 wins outright
  const Tensor logits({2, 3}, {1, 0, 1, 0, 5, 1});
  const auto r = eval::score_logits(logits, {2, 1}, 3);
  CHECK(r.top1 == 0.5);
  CHECK(r.top5 == 1.0);
  CHECK(r.per_class == std::vector<double>{0.0, 1.0, 0.0});
  CHECK_THROWS_AS(eval::score_logits(logits, {2}, 3), DimensionError);
  CHECK_THROWS_AS(eval::score_logits(logits, {2, 3}, 3), ContractError);
}

TEST_CASE("probe and finetune schedules") {
  eval::ProbeConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 1.0;
  CHECK(cfg.lr_at_epoch(0) == 1.0);
  CHECK(cfg.lr_at_epoch(5) == 1.0);
  CHECK(cfg.lr_at_epoch(6) == doctest::Approx(0.1));
  CHECK(cfg.lr_at_epoch(8) == doctest::Approx(0.01));
  cfg.milestones = {0.8, 0.6};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.milestones = {0.5};
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  eval::FinetuneConfig ft;
  ft.momentum = 1.0;
  CHECK_THROWS_AS(ft.validate(), ConfigError);
}

TEST_CASE("knn with k=1 on its own train set is exact") {
  const auto ds = data::generate_synthetic(5, 10, 16, 4);
  auto net = random_network(5);
  const auto report = eval::knn_eval(net.encoder(), ds, ds, 1);
  CHECK(report.kind == "knn");
  CHECK(report.top1 == 1.0);
}

TEST_CASE("knn matches a brute-force oracle") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 20 + 9 * static_cast<std::size_t>(trial);  // up to 191
    const std::size_t classes = 2 + trial % 5;
    Tensor train = randn({n, 6}, rng);
    Tensor query = randn({30, 6}, rng);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(rng() % classes);
    for (std::size_t k : {std::size_t{1}, std::size_t{4}, std::size_t{7}, n}) {
      CHECK(eval::knn_predict(train, labels, query, classes, k) ==
            knn_oracle(train, labels, query, classes, k));
    }
  }
}

TEST_CASE("knn tie-breaking") {
  const Tensor train({3, 2}, {1, 0, 1, 0, 0, 1});
  const Tensor query({1, 2}, {2, 0});
  // equal similarity: lower train index is nearer
  CHECK(eval::knn_predict(train, {1, 0, 2}, query, 3, 1) == std::vector<int>{1});
  CHECK(eval::knn_predict(train, {0, 1, 2}, query, 3, 1) == std::vector<int>{0});
  // equal votes: smaller class
  CHECK(eval::knn_predict(train, {2, 1, 0}, query, 3, 2) == std::vector<int>{1});
  CHECK_THROWS_AS(eval::knn_predict(train, {0, 1, 2}, query, 3, 4), ConfigError);
  CHECK_THROWS_AS(eval::knn_predict(train, {0, 1, 2}, query, 3, 0), ConfigError);
  CHECK_THROWS_AS(eval::knn_predict(train, {0, 1, 2}, Tensor({1, 3}, {1, 0, 0}), 3, 1), DimensionError);
}

TEST_CASE("class-count mismatch between splits is refused") {
  const auto train = data::generate_synthetic(4, 5, 8, 1);
  const auto test = data::generate_synthetic(3, 5, 8, 2);
  auto net = random_network(1);
  CHECK_THROWS_AS(eval::linear_probe(net.encoder(), train, test, {}), ConfigError);
  CHECK_THROWS_AS(eval::knn_eval(net.encoder(), train, test, 1), ConfigError);
  CHECK_THROWS_AS(eval::semi_supervised_finetune(net.encoder(), train, test, 1.0, {}), ConfigError);
}

TEST_CASE("fine-tuning: more labels help, subsets are reproducible") {
  const auto train = data::generate_synthetic(10, 100, 16, 11);
  const auto test = data::generate_synthetic(10, 20, 16, 12);
  eval::FinetuneConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 32;
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto net = random_network(100 + seed);
    const nn::Network before = net;
    cfg.seed = seed;
    const auto one = eval::semi_supervised_finetune(net.encoder(), train, test, 0.01, cfg);
    const auto ten = eval::semi_supervised_finetune(net.encoder(), train, test, 0.1, cfg);
    MESSAGE("seed " << seed << " 1% " << one.top1 << " 10% " << ten.top1);
    wins += ten.top1 >= one.top1;
    CHECK(one.subset_hash != ten.subset_hash);
    CHECK(ten.label_fraction == 0.1);
    CHECK(params_identical(std::as_const(net).parameters(), before.parameters()));
  }
  CHECK(wins >= 4);

  cfg.seed = 3;
  auto net = random_network(9);
  const auto a = eval::semi_supervised_finetune(net.encoder(), train, test, 0.1, cfg);
  const auto b = eval::semi_supervised_finetune(net.encoder(), train, test, 0.1, cfg);
  CHECK(a.subset_hash == b.subset_hash);
  CHECK(a.top1 == b.top1);
  std::vector<std::size_t> idx;
  data::label_fraction_subset(train, 0.1, 3, &idx);
  CHECK(eval::subset_hash(idx) == a.subset_hash);

  const auto full = eval::semi_supervised_finetune(net.encoder(), train, test, 1.0, cfg);
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  CHECK(full.subset_hash == eval::subset_hash(all));
  CHECK(full.test_size == test.size());
}

TEST_CASE("subset hash is FNV-1a over little-endian 64-bit indices") {
  // oracle: byte-wise FNV-1a written out directly
  auto fnv = [](const std::vector<std::size_t>& v) {
    std::uint64_t h = 14695981039346656037ULL;
    for (std::uint64_t x : v) {
      unsigned char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(x >> (8 * i));
      for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
  };
  CHECK(eval::subset_hash({}) == "cbf29ce484222325");
  CHECK(eval::subset_hash({1, 5, 300}) == fnv({1, 5, 300}));
  CHECK(eval::subset_hash({1, 5}) != eval::subset_hash({5, 1}));
}

TEST_CASE("eval report csv and json round trip") {
  const auto dir = temp_dir("evalcsv");
  eval::EvalReport r;
  r.kind = "finetune";
  r.top1 = 0.123456789;
  r.top5 = 0.5;
  r.per_class = {0.25, 0.75};
  r.test_size = 40;
  r.fingerprint = "abcd";
  r.subset_hash = "00ff";
  r.label_fraction = 0.1;
  eval::write_eval_report(r, dir, "ft");
  const auto back = eval::parse_eval_csv(dir / "ft.csv");
  CHECK(back.kind == r.kind);
  CHECK(back.top1 == r.top1);
  CHECK(back.top5 == r.top5);
  CHECK(back.test_size == r.test_size);
  CHECK(back.label_fraction == r.label_fraction);
  CHECK(back.fingerprint == r.fingerprint);
  CHECK(back.subset_hash == r.subset_hash);
  const auto j = nlohmann::json::parse(read_file(dir / "ft.json"));
  CHECK(j["per_class"].get<std::vector<double>>() == r.per_class);
  CHECK(j["kind"] == "finetune");

  // empty trailing field survives
  r.subset_hash.clear();
  eval::write_eval_report(r, dir, "probe");
  CHECK(eval::parse_eval_csv(dir / "probe.csv").subset_hash.empty());

  write_file(dir / "bad.csv", "kind,top1\nx,1\n");
  CHECK_THROWS_AS(eval::parse_eval_csv(dir / "bad.csv"), FormatError);
  write_file(dir / "short.csv", eval::eval_csv_header() + "\nknn,0.5,0.5\n");
  CHECK_THROWS_AS(eval::parse_eval_csv(dir / "short.csv"), FormatError);
  write_file(dir / "nan.csv", eval::eval_csv_header() + "\nknn,x,0.5,1,1,f,\n");
  CHECK_THROWS_AS(eval::parse_eval_csv(dir / "nan.csv"), FormatError);
  CHECK_THROWS_AS(eval::parse_eval_csv(dir / "none.csv"), FormatError);
  std::filesystem::remove_all(dir);
}
