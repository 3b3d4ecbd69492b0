#include <gtest/gtest.h>

#include <sstream>

#include "sdah/io.hpp"
#include "test_util.hpp"

using namespace sdah;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Sdt, ExactByteLayout) {
  Tensor<float> t(Shape{2, 1}, std::vector<float>{1.0f, -2.0f});
  std::stringstream ss;
  write_sdt(ss, blob_of(t));
  const std::vector<std::uint8_t> expect{'S', 'D', 'T', '1', 0, 2, 0, 0,      // header
                                         2,   0,   0,   0,   1, 0, 0, 0,      // dims
                                         0x00, 0x00, 0x80, 0x3f,              // 1.0f
                                         0x00, 0x00, 0x00, 0xc0};             // -2.0f
  EXPECT_EQ(bytes_of(ss.str()), expect);
}

TEST(Sdt, U8AndF64RoundTrip) {
  std::vector<std::uint8_t> v{0, 1, 255, 7, 3, 2};
  std::stringstream ss;
  write_sdt(ss, blob_of_u8({2, 3}, v));
  auto back = read_sdt(ss);
  EXPECT_EQ(back.dtype, DType::u8);
  EXPECT_EQ(back.shape, (Shape{2, 3}));
  EXPECT_EQ(back.to_u8(), v);

  auto t = test::rand_t({3, 2, 2}, 1, -1e6, 1e6, false);
  std::stringstream s2;
  write_sdt(s2, blob_of(t));
  EXPECT_EQ(s2.str()[4], 1);
  auto rt = read_sdt(s2).to_tensor<double>();
  EXPECT_EQ(test::max_abs_diff(rt, t), 0.0);
}

TEST(Sdt, RejectsMalformedInput) {
  {
    std::stringstream ss("SDX1\0\0\0\0");
    EXPECT_THROW(read_sdt(ss), DataError);
  }
  {
    std::stringstream ss;
    write_sdt(ss, blob_of(test::rand_f({4}, 2)));
    std::string s = ss.str();
    s.pop_back();
    std::stringstream cut(s);
    EXPECT_THROW(read_sdt(cut), DataError);
  }
  {
    std::string s{'S', 'D', 'T', '1', 9, 1, 0, 0, 1, 0, 0, 0, 0};
    std::stringstream bad(s);
    EXPECT_THROW(read_sdt(bad), DataError);
  }
  {
    std::string s{'S', 'D', 'T', '1', 0, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0};
    std::stringstream reserved(s);
    EXPECT_THROW(read_sdt(reserved), DataError);
  }
}

TEST(Sdck, ByteLayoutAndOrder) {
  Checkpoint ck;
  ck.put("b", blob_of_u8({1}, std::vector<std::uint8_t>{9}));
  ck.put("a", blob_of_text("hi"));
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const std::vector<std::uint8_t> expect{'S', 'D', 'C', 'K', 2, 0, 0, 0,
                                         1, 0, 'b', 'S', 'D', 'T', '1', 2, 1, 0, 0, 1, 0, 0, 0, 9,
                                         1, 0, 'a', 'S', 'D', 'T', '1', 2, 1, 0, 0, 2, 0, 0, 0, 'h', 'i'};
  EXPECT_EQ(bytes_of(ss.str()), expect);
  auto back = read_checkpoint(ss);
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.entries[0].first, "b");
  EXPECT_EQ(text_of(back.at("a")), "hi");
  EXPECT_EQ(back.find("missing"), nullptr);
  EXPECT_THROW(back.at("missing"), DataError);
}

TEST(Sdck, FileRoundTripAndReplacement) {
  const auto dir = test::scratch("io");
  Checkpoint ck;
  ck.put("x.weight", blob_of(test::rand_f({3, 3}, 3)));
  ck.put("text", blob_of_text(""));
  save_checkpoint(dir / "c.sdck", ck);
  const auto back = load_checkpoint(dir / "c.sdck");
  EXPECT_EQ(back.at("x.weight").payload, ck.at("x.weight").payload);
  EXPECT_EQ(text_of(back.at("text")), "");
  ck.put("text", blob_of_text("again"));
  EXPECT_EQ(ck.entries.size(), 2u);
  EXPECT_EQ(ck.entries[1].first, "text");
  EXPECT_EQ(text_of(ck.at("text")), "again");
  EXPECT_THROW(load_checkpoint(dir / "nope.sdck"), DataError);
}
