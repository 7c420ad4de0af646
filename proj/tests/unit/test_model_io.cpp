#include <gtest/gtest.h>

#include <sstream>

#include "bfcn/model_io.hpp"
#include "helpers.hpp"

using namespace bfcn;

namespace {

std::string serialize(const SegNet& net) {
    std::ostringstream os;
    write_model(os, net);
    return os.str();
}

SegNet deserialize(const std::string& bytes) {
    std::istringstream is(bytes);
    return read_model(is);
}

ErrorKind kind_of(const std::string& bytes) {
    try {
        deserialize(bytes);
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::bad_config;
}

} // namespace

TEST(ModelIo, RoundTripKeepsStructureAndFloat32Values) {
    auto net = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 2, 2, 11);
    auto back = deserialize(serialize(net));
    ASSERT_EQ(back.layers.size(), net.layers.size());
    EXPECT_EQ(back.num_classes, net.num_classes);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto &a = net.layers[i], &b = back.layers[i];
        EXPECT_EQ(a.name, b.name);
        EXPECT_EQ(a.kind, b.kind);
        EXPECT_EQ(a.inputs, b.inputs);
        EXPECT_EQ(a.first_layer, b.first_layer);
        EXPECT_EQ(a.quant.k_w, b.quant.k_w);
        EXPECT_EQ(a.quant.k_a, b.quant.k_a);
        EXPECT_EQ(a.geom.out_ch, b.geom.out_ch);
    }
    ASSERT_EQ(back.scales.size(), net.scales.size());
    for (const auto& [name, t] : net.params) {
        const auto& u = back.params.at(name);
        ASSERT_EQ(u.shape(), t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(u[i], static_cast<double>(static_cast<float>(t[i])));
    }
    EXPECT_EQ(back.buffers.size(), net.buffers.size());
}

TEST(ModelIo, SecondRoundTripIsByteIdentical) {
    auto net = build_toy_bfcn(3, 4, 8, ReconVariant::wide_conv, 32, 32, 3);
    const auto once = serialize(deserialize(serialize(net)));
    EXPECT_EQ(serialize(deserialize(once)), once);
}

TEST(ModelIo, LoadedNetPredictsLikeItsSource) {
    auto net = deserialize(serialize(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 4, 4, 5)));
    auto again = deserialize(serialize(net));
    std::mt19937 gen(1);
    auto img = testutil::random_real({1, 3, 32, 32}, 0.0, 1.0, gen);
    EXPECT_EQ(predict(net, img), predict(again, img));
}

TEST(ModelIo, FormatErrors) {
    const auto good = serialize(build_toy_bfcn(3, 5, 8, ReconVariant::single_conv, 2, 2));
    EXPECT_EQ(kind_of("XXXX" + good.substr(4)), ErrorKind::format_error);
    auto bad_version = good;
    bad_version[4] = 9;
    EXPECT_EQ(kind_of(bad_version), ErrorKind::format_error);
    EXPECT_EQ(kind_of(good.substr(0, good.size() / 2)), ErrorKind::format_error);
    EXPECT_EQ(kind_of(good.substr(0, 3)), ErrorKind::format_error);
    auto bad_kind = good;
    bad_kind[9] = 77; // first layer's kind byte
    EXPECT_EQ(kind_of(bad_kind), ErrorKind::format_error);
}

TEST(ModelIo, MissingFileIsIoError) {
    try {
        load_model("/nonexistent/dir/model.bfcn");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io_error);
    }
}

TEST(ModelIo, SaveLoadFile) {
    auto net = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 1, 2, 8);
    const auto path = testing::TempDir() + "model_io_test.bfcn";
    save_model(path, net);
    EXPECT_EQ(serialize(load_model(path)), serialize(deserialize(serialize(net))));
}
