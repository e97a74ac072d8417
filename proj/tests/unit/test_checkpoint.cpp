#include "test_util.hpp"

#include <fstream>
#include <sstream>

using namespace traj;

namespace {
Checkpoint sample_checkpoint() {
  const ModelDims d{3, 4, 5, 2};
  Checkpoint ck{testutil::random_params(d, 1), init_state(d, 2), {{"task", "interaction"}, {"k", "v"}}};
  ck.state.user_last_time[1] = 12.5;
  ck.state.item_last_time[4] = 3.0;
  ck.state.user_last_item[2] = 4;
  ck.state.user_dyn(0, 1) = -0.125;
  return ck;
}

std::string serialize(const Checkpoint& ck) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, ck);
  return out.str();
}

std::string read_error(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  try {
    read_checkpoint(in);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}
}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto ck = sample_checkpoint();
  std::istringstream in(serialize(ck), std::ios::binary);
  const auto back = read_checkpoint(in);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.state, ck.state);
  EXPECT_EQ(back.metadata, ck.metadata);
}

TEST(Checkpoint, FileRoundTrip) {
  testutil::TempDir dir("ckpt");
  const auto ck = sample_checkpoint();
  const auto path = (dir / "m.bin").string();
  write_checkpoint(path, ck);
  EXPECT_EQ(read_checkpoint(path).params, ck.params);
  EXPECT_THROW(read_checkpoint((dir / "missing.bin").string()), Error);
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto bytes = serialize(sample_checkpoint());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(read_error(bad).find("bad checkpoint version/magic"), std::string::npos);
  bad = bytes;
  bad[8] = 9;  // version
  EXPECT_NE(read_error(bad).find("bad checkpoint version/magic"), std::string::npos);
  EXPECT_NE(read_error("garbage").find("bad checkpoint version/magic"), std::string::npos);
  EXPECT_NE(read_error(bytes.substr(0, bytes.size() / 2)).find("truncated"), std::string::npos);
  bad = bytes;
  bad[bad.size() - 1] = '?';
  EXPECT_NE(read_error(bad).find("end marker"), std::string::npos);
}

TEST(Checkpoint, StateShapeMustMatchDims) {
  auto ck = sample_checkpoint();
  ck.state.user_dyn = Mat(2, 3);
  std::ostringstream out;
  EXPECT_THROW(write_checkpoint(out, ck), Error);
}
