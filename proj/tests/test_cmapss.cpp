#include <catch2/catch_amalgamated.hpp>

using Catch::Approx;
#include <fstream>
#include <set>

#include "fedprog/cmapss.hpp"
#include "fedprog/experiment.hpp"
#include "helpers.hpp"

using namespace fedprog;

namespace {

// Integer-valued synthetic fleet in the 26-column whitespace layout.  Every
// field is exactly representable, so parsed values compare bit-for-bit.
double sensor_value(int unit, int channel_1based, int cycle) {
  return unit * 1000.0 + channel_1based * 10.0 + cycle;
}

void write_units(const std::filesystem::path& path, const std::vector<int>& lengths) {
  std::ofstream out(path);
  for (size_t u = 0; u < lengths.size(); ++u) {
    const int unit = static_cast<int>(u) + 1;
    for (int cycle = 1; cycle <= lengths[u]; ++cycle) {
      out << unit << ' ' << cycle;
      for (int j = 0; j < 3; ++j) out << ' ' << unit * 7 + j;
      for (int ch = 1; ch <= 21; ++ch) out << ' ' << sensor_value(unit, ch, cycle);
      out << '\n';
    }
    out << '\n';  // blank separators must be ignored
  }
}

void write_rul(const std::filesystem::path& path, const std::vector<double>& rul) {
  std::ofstream out(path);
  for (double r : rul) out << r << "\n";
}

}  // namespace

TEST_CASE("record parsing maps the 26 columns") {
  testutil::TempDir tmp;
  auto file = tmp.path / "train.txt";
  write_units(file, {5, 3, 4});

  std::vector<CmapssRecord> records = parse_cmapss(file);
  REQUIRE(records.size() == 12);
  REQUIRE(records[0].unit == 1);
  REQUIRE(records[0].cycle == 1);
  REQUIRE(records[0].settings[0] == 7.0);
  REQUIRE(records[0].settings[2] == 9.0);
  for (int ch = 1; ch <= 21; ++ch)
    REQUIRE(records[0].sensors[ch - 1] == sensor_value(1, ch, 1));
  REQUIRE(records[5].unit == 2);  // rows 0..4 are unit 1
  REQUIRE(records[5].cycle == 1);
  REQUIRE(records.back().unit == 3);
  REQUIRE(records.back().cycle == 4);
}

TEST_CASE("record parsing rejects malformed rows") {
  testutil::TempDir tmp;
  SECTION("wrong column count") {
    auto file = tmp.path / "short.txt";
    std::ofstream(file) << "1 1 0 0 0 1 2 3\n";
    REQUIRE_THROWS_AS(parse_cmapss(file), ParseError);
  }
  SECTION("non-numeric field") {
    auto file = tmp.path / "alpha.txt";
    std::ofstream out(file);
    out << "1 1";
    for (int i = 0; i < 23; ++i) out << " 0";
    out << " oops\n";
    out.close();
    REQUIRE_THROWS_AS(parse_cmapss(file), ParseError);
  }
  SECTION("empty file") {
    auto file = tmp.path / "empty.txt";
    std::ofstream(file) << "\n\n";
    REQUIRE_THROWS_AS(parse_cmapss(file), ParseError);
  }
  SECTION("missing file") {
    REQUIRE_THROWS_AS(parse_cmapss(tmp.path / "nope.txt"), ParseError);
  }
}

TEST_CASE("remaining-life parsing") {
  testutil::TempDir tmp;
  auto file = tmp.path / "rul.txt";
  std::ofstream(file) << "112\n\n98\n20\n";
  std::vector<double> rul = parse_rul(file);
  REQUIRE(rul == std::vector<double>{112.0, 98.0, 20.0});

  auto bad = tmp.path / "bad.txt";
  std::ofstream(bad) << "10\nnot-a-number\n";
  REQUIRE_THROWS_AS(parse_rul(bad), ParseError);
  auto empty = tmp.path / "empty.txt";
  std::ofstream(empty) << "";
  REQUIRE_THROWS_AS(parse_rul(empty), ParseError);
}

TEST_CASE("non-consecutive cycles are rejected") {
  testutil::TempDir tmp;
  auto file = tmp.path / "gap.txt";
  std::ofstream out(file);
  for (int cycle : {1, 3}) {  // skips cycle 2
    out << "1 " << cycle;
    for (int i = 0; i < 24; ++i) out << " 0";
    out << "\n";
  }
  out.close();
  std::vector<CmapssRecord> records = parse_cmapss(file);
  REQUIRE_THROWS_AS(build_case_study(records, records, {1.0}, CaseStudyConfig{}),
                    ValidationError);
}

namespace {

struct Fixture {
  testutil::TempDir tmp;
  std::vector<CmapssRecord> train, test;
  std::vector<double> rul{10.0, 7.0};
  std::vector<int> train_lengths{6, 4, 5, 3, 7, 5, 4, 6, 5, 5};  // 10 engines
  std::vector<int> test_lengths{4, 9};

  Fixture() {
    write_units(tmp.path / "train.txt", train_lengths);
    write_units(tmp.path / "test.txt", test_lengths);
    train = parse_cmapss(tmp.path / "train.txt");
    test = parse_cmapss(tmp.path / "test.txt");
  }
};

}  // namespace

TEST_CASE("case-study assembly lays engines onto the common grid") {
  Fixture fx;
  CaseStudyConfig cfg;  // sensors {4,15,17,20}, fractions 0.6/0.3/0.1
  CaseStudyData data = build_case_study(fx.train, fx.test, fx.rul, cfg);

  const int L = 9;  // longest engine (test unit 2)
  REQUIRE(data.grid.sensor_lengths == std::vector<int>(4, L));

  // floor splits with the remainder on the first user: 6/3/1
  REQUIRE(data.participants.size() == 3);
  REQUIRE(data.participants[0].participant_id == "user_1");
  REQUIRE(data.participants[0].signals.size() == 6);
  REQUIRE(data.participants[1].signals.size() == 3);
  REQUIRE(data.participants[2].signals.size() == 1);

  // engine 1 lands first with user_1 under the identity assignment
  const ObservedSignal& sig = data.participants[0].signals[0];
  REQUIRE(sig.system_id == "train_001");
  REQUIRE(data.participants[0].ttfs[0] == 6.0);
  REQUIRE(sig.values.size() == 4 * L);
  std::vector<int> expect_omega;
  for (int p = 0; p < 4; ++p) {
    const int channel = cfg.selected_sensors[p];
    for (int t = 0; t < 6; ++t) {
      REQUIRE(sig.values[p * L + t] == sensor_value(1, channel, t + 1));
      expect_omega.push_back(p * L + t);
    }
    for (int t = 6; t < L; ++t) REQUIRE(std::isnan(sig.values[p * L + t]));
  }
  REQUIRE(sig.omega == expect_omega);

  // evaluation block: ttf = observed cycles + remaining life
  REQUIRE(data.test.participant_id == "test");
  REQUIRE(data.test.signals.size() == 2);
  REQUIRE(data.test.signals[0].system_id == "test_001");
  REQUIRE(data.test.ttfs[0] == 4.0 + 10.0);
  REQUIRE(data.test.ttfs[1] == 9.0 + 7.0);
  REQUIRE(data.test.signals[1].values[0 * L + 3] == sensor_value(2, 4, 4));

  REQUIRE_NOTHROW(data.participants[0].validate());
  REQUIRE_NOTHROW(data.test.validate());
}

TEST_CASE("permutations move engines between users but freeze their content") {
  Fixture fx;
  CaseStudyConfig a;
  a.missing_fraction = 0.4;
  CaseStudyConfig b = a;
  b.permutation_seed = 5;

  CaseStudyData da = build_case_study(fx.train, fx.test, fx.rul, a);
  CaseStudyData db = build_case_study(fx.train, fx.test, fx.rul, b);

  auto collect = [](const CaseStudyData& d) {
    std::map<std::string, const ObservedSignal*> by_id;
    for (const auto& ds : d.participants)
      for (const auto& s : ds.signals) by_id[s.system_id] = &s;
    return by_id;
  };
  auto ma = collect(da);
  auto mb = collect(db);

  // same training universe, same per-engine content (missingness is keyed to
  // the engine, not to its host user)
  REQUIRE(ma.size() == 10);
  REQUIRE(mb.size() == 10);
  for (const auto& [id, sa] : ma) {
    const ObservedSignal* sb = mb.at(id);
    REQUIRE(sa->omega == sb->omega);
    for (int i : sa->omega) REQUIRE(sa->values[i] == sb->values[i]);
  }

  // the shuffle actually moved something
  auto ids_of = [](const LocalDataset& ds) {
    std::vector<std::string> v;
    for (const auto& s : ds.signals) v.push_back(s.system_id);
    return v;
  };
  REQUIRE(ids_of(da.participants[0]) != ids_of(db.participants[0]));

  // the evaluation block is untouched by the permutation
  for (size_t t = 0; t < da.test.signals.size(); ++t) {
    REQUIRE(da.test.signals[t].system_id == db.test.signals[t].system_id);
    REQUIRE(da.test.signals[t].omega == db.test.signals[t].omega);
    REQUIRE(da.test.ttfs[t] == db.test.ttfs[t]);
  }

  // missingness really thinned the observations, on both sides of the split
  const int L = 9;
  for (const auto& [id, sa] : ma) {
    (void)id;
    REQUIRE(sa->omega.size() < size_t(4 * L));
  }
  const double full0 = 4.0 * fx.test_lengths[0];
  REQUIRE(da.test.signals[0].omega.size() ==
          size_t(std::floor((1.0 - a.missing_fraction) * full0)));
}

TEST_CASE("case-study configuration validation") {
  Fixture fx;
  CaseStudyConfig cfg;
  SECTION("sensor index range") {
    cfg.selected_sensors = {0};
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
    cfg.selected_sensors = {22};
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
    cfg.selected_sensors = {};
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
  }
  SECTION("user fractions") {
    cfg.user_fractions = {};
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
    cfg.user_fractions = {0.9, -0.1};
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
    cfg.user_fractions = {0.9, 0.05, 0.05};  // floor gives a user zero engines
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
  }
  SECTION("missingness bounds") {
    cfg.missing_fraction = 1.0;
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
    cfg.missing_fraction = -0.1;
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, fx.rul, cfg), ConfigError);
  }
  SECTION("remaining-life mismatch") {
    REQUIRE_THROWS_AS(build_case_study(fx.train, fx.test, {1.0, 2.0, 3.0}, cfg), ConfigError);
  }
}

TEST_CASE("dataset presence probe") {
  testutil::TempDir tmp;
  REQUIRE_FALSE(cmapss_files_present(tmp.path));
  write_units(tmp.path / "train_FD001.txt", {5, 4, 6, 3, 5});
  write_units(tmp.path / "test_FD001.txt", {4});
  REQUIRE_FALSE(cmapss_files_present(tmp.path));  // RUL still missing
  write_rul(tmp.path / "RUL_FD001.txt", {12.0});
  REQUIRE(cmapss_files_present(tmp.path));
}
