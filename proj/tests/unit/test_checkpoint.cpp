#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "slpmt/checkpoint.hpp"

using namespace slpmt;
using namespace slpmt::test;
namespace fs = std::filesystem;

namespace {

Checkpoint trained_checkpoint(std::uint64_t seed) {
  ModelParams p = tiny_params(seed);
  TrainConfig cfg;
  cfg.warmup_steps = 1;
  Optimizer opt(cfg);
  Rng rng(seed);
  for (std::size_t i = 0; i < 3; ++i) stage1_step(p, opt, tiny_batch(i, 2, 5, 4, seed * 10 + i), cfg, rng);
  return Checkpoint::capture(p, &opt, opt.steps(), "1");
}

Checkpoint constant_checkpoint(double value) {
  Checkpoint ck = Checkpoint::capture(tiny_params(1), nullptr, 0, "1");
  for (auto& a : ck.params) std::fill(a.values.begin(), a.values.end(), value);
  return ck;
}

}  // namespace

TEST_CASE("checkpoint round-trip") {
  const Checkpoint ck = trained_checkpoint(1);
  const std::string bytes = ck.serialize();
  CHECK(bytes.rfind("SLPMTCKP", 0) == 0);
  const Checkpoint back = Checkpoint::deserialize(bytes);
  CHECK(back.serialize() == bytes);
  CHECK(back.config == ck.config);
  CHECK(back.step == 3);
  CHECK(back.stage == "1");
  CHECK(back.params == ck.params);

  const fs::path f = fs::temp_directory_path() / "slpmt-test-ck.ckpt";
  ck.save(f);
  const Checkpoint loaded = Checkpoint::load(f);
  const fs::path g = fs::temp_directory_path() / "slpmt-test-ck2.ckpt";
  loaded.save(g);
  std::ifstream a(f, std::ios::binary), b(g, std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
}

TEST_CASE("checkpoint names partition the parameters") {
  const ModelParams p = tiny_params(2);
  const Checkpoint ck = Checkpoint::capture(p, nullptr, 0, "1");
  std::set<std::string> names;
  for (const auto& n : p.named()) names.insert(n.name);
  std::set<std::string> stored;
  for (const auto& a : ck.params) CHECK(stored.insert(a.name).second);
  CHECK(names == stored);
  for (std::size_t i = 1; i < ck.params.size(); ++i) CHECK(ck.params[i - 1].name < ck.params[i].name);

  const ModelParams back = ck.to_params();
  const auto pn = p.named(), bn = back.named();
  REQUIRE(pn.size() == bn.size());
  for (std::size_t i = 0; i < pn.size(); ++i) {
    CHECK(pn[i].name == bn[i].name);
    CHECK(max_abs_diff(pn[i].tensor.values(), bn[i].tensor.values()) == 0.0);
  }
}

TEST_CASE("optimizer state survives a checkpoint") {
  const Checkpoint ck = trained_checkpoint(3);
  TrainConfig cfg;
  Optimizer opt(cfg);
  Checkpoint::deserialize(ck.serialize()).restore_optimizer(opt);
  CHECK(opt.steps() == 3);
  CHECK(opt.moments().size() == ck.moments.size());
  for (const auto& [name, m] : ck.moments) {
    const auto& r = opt.moments().at(name);
    CHECK(r.first == m.first);
    CHECK(r.second == m.second);
    CHECK(r.updates == m.updates);
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  std::string bytes = trained_checkpoint(4).serialize();
  CHECK_THROWS(Checkpoint::deserialize(bytes.substr(0, bytes.size() / 2)));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS(Checkpoint::deserialize(bad_magic));
  CHECK_THROWS(Checkpoint::deserialize(bytes + "junk"));
  CHECK_THROWS(Checkpoint::load(fs::temp_directory_path() / "slpmt-no-such.ckpt"));
}

TEST_CASE("checkpoint averaging") {
  SUBCASE("identical inputs") {
    const Checkpoint ck = trained_checkpoint(5);
    const Checkpoint avg = average_checkpoints({ck, ck, ck, ck, ck});
    CHECK(avg.params == ck.params);
  }
  SUBCASE("zeros and twos") {
    const Checkpoint avg = average_checkpoints({constant_checkpoint(0.0), constant_checkpoint(2.0)});
    for (const auto& a : avg.params)
      for (double v : a.values) CHECK(v == 1.0);
  }
  SUBCASE("scalar-loop oracle; moments from the last input") {
    std::vector<Checkpoint> cks{trained_checkpoint(6), trained_checkpoint(7), trained_checkpoint(8)};
    const Checkpoint avg = average_checkpoints(cks);
    for (std::size_t a = 0; a < avg.params.size(); ++a)
      for (std::size_t i = 0; i < avg.params[a].values.size(); ++i) {
        double s = 0.0;
        for (const auto& c : cks) s += c.params[a].values[i];
        CHECK(std::abs(avg.params[a].values[i] - s / 3.0) <= 1e-14 * std::max(1.0, std::abs(s)));
      }
    CHECK(avg.moments.begin()->second.first == cks.back().moments.begin()->second.first);
    CHECK(avg.step == cks.back().step);
  }
  SUBCASE("config mismatch") {
    Checkpoint other = Checkpoint::capture(tiny_params(1, 2), nullptr, 0, "1");
    CHECK_THROWS(average_checkpoints({constant_checkpoint(1.0), other}));
    CHECK_THROWS(average_checkpoints({}));
  }
}

TEST_CASE("model config JSON") {
  const ModelConfig c = tiny_config();
  CHECK(model_config_from_json(model_config_to_json(c)) == c);
  std::string text = model_config_to_json(c);
  text.insert(1, "\"extra\": 1, ");
  CHECK_THROWS(model_config_from_json(text));
}
