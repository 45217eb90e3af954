#include "iclc/csv.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace iclc;

TEST(Csv, RendersWithFixedPrecision) {
  CsvTable t({{"layer", ColumnType::integer}, {"name", ColumnType::text}, {"v", ColumnType::real, true}});
  t.add({cell(3), cell("a,b"), cell(1.0 / 3.0)});
  t.add({cell(4), cell("say \"hi\""), cell(std::optional<double>{})});
  EXPECT_EQ(t.str(), "layer,name,v\n3,\"a,b\",0.333333333\n4,\"say \"\"hi\"\"\",\n");
}

TEST(Csv, SchemaViolationsNameTheColumn) {
  CsvTable t({{"layer", ColumnType::integer}, {"v", ColumnType::real}});
  t.add({cell(1)});
  EXPECT_THROW((void)t.str(), ArgumentError);
  CsvTable u({{"layer", ColumnType::integer}, {"v", ColumnType::real}});
  u.add({cell(1.5), cell(2.0)});
  try {
    (void)u.str();
    FAIL();
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("layer"), std::string::npos);
  }
  CsvTable w({{"v", ColumnType::real}});
  w.add({cell(std::optional<double>{})});
  EXPECT_THROW((void)w.str(), ArgumentError);
}

TEST(Csv, SpecialValues) {
  EXPECT_EQ(format_real(NAN), "nan");
  EXPECT_EQ(format_real(-INFINITY), "-inf");
  EXPECT_EQ(format_real(0.1), "0.1");
  EXPECT_EQ(format_real(123456789012.0), "1.23456789e+11");
}
