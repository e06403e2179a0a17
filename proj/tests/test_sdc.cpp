#include <random>

#include "doctest.h"
#include "layout.hpp"
#include "sdc.hpp"

using namespace insitu;
using namespace insitu::sdc;

TEST_CASE("header-only file round-trips") {
  FileImage img;
  img.set_attr("title", "empty");
  img.end_define();
  auto bytes = img.serialize();
  FileImage back = FileImage::parse(bytes);
  CHECK(back == img);
  CHECK(back.attrs().at("title") == "empty");
}

TEST_CASE("one 3-D double variable round-trips bitwise") {
  FileImage img;
  img.define_dim("z", 2);
  img.define_dim("y", 3);
  img.define_dim("x", 4);
  img.define_var("w", DataType::Double, {"z", "y", "x"}, {{"units", "m/s"}});
  img.end_define();
  auto data = img.doubles("w");
  std::mt19937_64 rng(9);
  for (auto& d : data) d = std::uniform_real_distribution<>(-1, 1)(rng);

  auto bytes = img.serialize();
  FileImage back = FileImage::parse(bytes);
  CHECK(back == img);
  auto rt = back.doubles("w");
  REQUIRE(rt.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(rt[i] == data[i]);
  CHECK(back.var("w").attrs.at("units") == "m/s");
  // Identical image => byte-identical file.
  CHECK(back.serialize() == bytes);
}

TEST_CASE("region writes from four quarters equal a single-writer reference") {
  auto make = [] {
    FileImage img;
    img.define_dim("y", 4);
    img.define_dim("x", 4);
    img.define_var("f", DataType::Double, {"y", "x"});
    img.end_define();
    return img;
  };
  FileImage reference = make();
  {
    auto d = reference.doubles("f");
    for (int i = 0; i < 16; ++i) d[std::size_t(i)] = i * 1.25;
  }

  FileImage assembled = make();
  for (long qy = 0; qy < 2; ++qy)
    for (long qx = 0; qx < 2; ++qx) {
      std::vector<double> quarter(4);
      for (long y = 0; y < 2; ++y)
        for (long x = 0; x < 2; ++x)
          quarter[std::size_t(y * 2 + x)] = double((qy * 2 + y) * 4 + qx * 2 + x) * 1.25;
      std::vector<long> start = {qy * 2, qx * 2}, extent = {2, 2};
      assembled.write_region("f", start, extent, quarter);
    }
  CHECK(assembled.serialize() == reference.serialize());
}

TEST_CASE("coordinate dimensions carry explicit time values") {
  FileImage img;
  img.define_dim_coords("time_avg_10", {10, 20, 30});
  img.define_var("v", DataType::Double, {"time_avg_10"});
  img.end_define();
  auto coords = img.doubles("time_avg_10");
  CHECK(coords[0] == 10);
  CHECK(coords[2] == 30);
  FileImage back = FileImage::parse(img.serialize());
  CHECK(back.doubles("time_avg_10")[1] == 20);
}

TEST_CASE("schema errors") {
  FileImage img;
  img.define_dim("x", 4);
  CHECK_THROWS_AS(img.define_var("v", DataType::Double, {"nope"}), SdcError);
  img.define_var("v", DataType::Double, {"x"});
  CHECK_THROWS_AS(img.define_var("v", DataType::Double, {"x"}), SdcError);
  CHECK_THROWS_AS(img.doubles("v"), SdcError);  // before end_define
  img.end_define();
  CHECK_THROWS_AS(img.define_dim("y", 2), SdcError);
  std::vector<long> start = {2}, extent = {3};
  std::vector<double> data = {1, 2, 3};
  CHECK_THROWS_AS(img.write_region("v", start, extent, data), SdcError);  // out of bounds
  auto bad = img.serialize();
  bad[0] = 'X';
  CHECK_THROWS_AS(FileImage::parse(bad), SdcError);
}

TEST_CASE("collective file enforces cross-rank agreement") {
  CollectiveFile cf(2);
  cf.declare_dim(0, "x", 8);
  CHECK_THROWS_AS(cf.declare_dim(1, "x", 9), SdcError);
  cf.declare_dim(1, "x", 8);
  cf.declare_var(0, "v", DataType::Double, {"x"});
  cf.declare_var(1, "v", DataType::Double, {"x"});
  CHECK_THROWS_AS(cf.declare_var(1, "v", DataType::Integer, {"x"}), SdcError);
  cf.end_define();

  std::vector<double> lo = {1, 2, 3, 4}, hi = {5, 6, 7, 8};
  std::vector<long> s0 = {0}, s1 = {4}, e = {4};
  cf.write_region(0, "v", s0, e, lo);
  cf.write_region(1, "v", s1, e, hi);
  cf.dummy_write(0);
  CHECK(cf.write_count(0) == 2);
  CHECK(cf.write_count(1) == 1);
  FileImage img = cf.finish();
  auto d = img.doubles("v");
  CHECK(d[0] == 1);
  CHECK(d[7] == 8);
}
