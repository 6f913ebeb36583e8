#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "ldl/checkpoint.hpp"
#include "ldl/gradsuite.hpp"

using namespace ldl;

namespace {

Network<float> trained_looking_network(std::uint64_t seed) {
  Network<float> net(gradcheck_toy_spec());
  net.init_weights(seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<float> n;
  for (std::size_t i = 0; i < net.parameters().buffer_count(); ++i)
    for (auto& v : net.parameters().buffer_at(i).value.data()) v = std::abs(n(rng));
  return net;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ldl_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Checkpoint, EncodeDecodeIsBitExact) {
  auto net = trained_looking_network(1);
  const auto c = make_checkpoint(net, 1234);
  const auto d = decode_checkpoint(encode_checkpoint(c));
  EXPECT_EQ(d.spec, c.spec);
  EXPECT_EQ(d.iteration, 1234u);
  EXPECT_EQ(d.tensors, c.tensors);
  auto restored = network_from_checkpoint<float>(d);
  for (std::size_t i = 0; i < net.parameters().size(); ++i)
    EXPECT_EQ(restored.parameters()[i].value, net.parameters()[i].value);
  for (std::size_t i = 0; i < net.parameters().buffer_count(); ++i)
    EXPECT_EQ(restored.parameters().buffer_at(i).value, net.parameters().buffer_at(i).value);
}

TEST(Checkpoint, FileRoundTrip) {
  auto net = trained_looking_network(2);
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(make_checkpoint(net, 7), path);
  const auto c = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(c.tensors, make_checkpoint(net, 7).tensors);
  EXPECT_EQ(encode_checkpoint(c), encode_checkpoint(make_checkpoint(net, 7)));
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = encode_checkpoint(make_checkpoint(trained_looking_network(3)));
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.data(), 4), "LDLN");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[7], 0);
}

TEST(Checkpoint, EveryTruncationIsDetected) {
  const auto bytes = encode_checkpoint(make_checkpoint(trained_looking_network(4)));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    EXPECT_THROW(decode_checkpoint(std::span<const char>(bytes.data(), len)), TruncationError) << "length " << len;
  }
}

TEST(Checkpoint, BadMagic) {
  auto bytes = encode_checkpoint(make_checkpoint(trained_looking_network(5)));
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), BadMagicError);
}

TEST(Checkpoint, VersionMismatchNamesBothVersions) {
  auto bytes = encode_checkpoint(make_checkpoint(trained_looking_network(6)));
  bytes[4] = 2;
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const VersionMismatchError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("version 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("expected 1"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, FormatErrorsShareBaseType) {
  auto bytes = encode_checkpoint(make_checkpoint(trained_looking_network(7)));
  bytes.push_back(0);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  bytes.pop_back();
  bytes[0] = 'Z';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, ShapeMismatchAgainstSpecIsRejected) {
  auto c = make_checkpoint(trained_looking_network(8));
  c.tensors[0].value = Tensor<float>({1, 1, 1, 1});
  EXPECT_THROW(network_from_checkpoint<float>(c), FormatError);
  auto c2 = make_checkpoint(trained_looking_network(8));
  c2.tensors.pop_back();
  EXPECT_THROW(network_from_checkpoint<float>(c2), FormatError);
}

TEST(Checkpoint, MissingFileIsFileError) {
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.ckpt")), FileError);
}
