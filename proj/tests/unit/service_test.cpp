/*
 * Copyright 2026 The npdraw Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <httplib.h>

#include <random>
#include <thread>

#include "npdraw/service.hpp"

using namespace npdraw;
using nlohmann::json;

namespace {

std::shared_ptr<FullModel<float>> tiny_model() {
  const auto g = make_geometry(10, 10, 5);
  std::mt19937_64 rng(1);
  PartBank bank;
  bank.patch_size = 5;
  std::uniform_real_distribution<float> u(0.1f, 1.0f);
  for (int m = 0; m < 3; ++m) {
    std::vector<float> p(25);
    for (auto& v : p) v = u(rng);
    bank.parts.push_back(p);
  }
  auto pc = PriorConfig::for_geometry(g, 3, 1);
  pc.layers = 1;
  pc.hidden = 8;
  pc.heads = 2;
  pc.ff = 16;
  pc.cnn_hidden = 4;
  pc.head_hidden = 8;
  PriorModel<float> prior(pc, 2);
  VaeConfig vc;
  vc.hidden = 8;
  vc.head_hidden = 8;
  return std::make_shared<FullModel<float>>(vc, bank, g, prior, 3);
}

std::string image_payload(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Image im = Image::zeros(h, w);
  for (auto& v : im.pixels) v = u(rng);
  return json{{"image", base64_encode(encode_pnm(im))}}.dump();
}

class ServiceTest : public ::testing::Test {
 protected:
  ServiceTest() : service(tiny_model()) {}
  EditService service;
};

}  // namespace

TEST(Base64, RoundTripsAllLengthsAndRejectsGarbage) {
  std::string bytes;
  for (int n = 0; n < 40; ++n) {
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
    bytes.push_back(static_cast<char>(n * 37));
  }
  EXPECT_EQ(base64_encode("hi"), "aGk=");
  EXPECT_THROW(base64_decode("abc"), std::invalid_argument);
  EXPECT_THROW(base64_decode("a*c="), std::invalid_argument);
}

TEST(Service, WithoutModelOnlyHealthAnswers) {
  EditService empty;
  const auto h = empty.health();
  EXPECT_EQ(h.status, 200);
  EXPECT_FALSE(h.body["model_loaded"].get<bool>());
  EXPECT_EQ(empty.encode(image_payload(10, 10, 1)).status, 503);
  EXPECT_EQ(empty.sample("{}").status, 503);
  EXPECT_EQ(empty.decode("abc").status, 503);
  EXPECT_EQ(empty.compose("{}").status, 503);
}

TEST_F(ServiceTest, EncodeIsDeterministicAndCanvasMatchesProgram) {
  const auto a = service.encode(image_payload(10, 10, 5));
  const auto b = service.encode(image_payload(10, 10, 5));
  ASSERT_EQ(a.status, 200) << a.body.dump();
  EXPECT_EQ(a.body["program"], b.body["program"]);
  EXPECT_EQ(a.body["canvas_id"], b.body["canvas_id"]);
  EXPECT_EQ(a.body["program"].size(), 4u);
  EXPECT_EQ(a.body["grid"]["K"], 5);
  EXPECT_EQ(a.body["grid"]["rows"], 2);
  LatentProgram p;
  for (const auto& t : a.body["program"]) p.tokens.push_back({t["z_loc"], t["z_id"], t["z_is"]});
  const auto model = tiny_model();
  const Canvas c = render_program(p, model->bank(), model->geometry());
  EXPECT_EQ(a.body["canvas"]["pixels"].get<std::vector<float>>(), c.pixels);
  EXPECT_EQ(service.canvas(a.body["canvas_id"])->pixels, c.pixels);
}

TEST_F(ServiceTest, EncodeRejectsBadPayloads) {
  EXPECT_EQ(service.encode(image_payload(12, 10, 1)).status, 400);
  EXPECT_EQ(service.encode("not json").status, 400);
  EXPECT_EQ(service.encode(R"({"image": "@@@@"})").status, 400);
  EXPECT_EQ(service.encode(R"({"image": 3})").status, 400);
  EXPECT_EQ(service.encode(json{{"image", base64_encode("P5 2 2 255\n")}}.dump()).status, 400);
  const auto r = service.encode(image_payload(12, 10, 1));
  EXPECT_NE(r.body["error"].get<std::string>().find("10x10x1"), std::string::npos);
}

TEST_F(ServiceTest, ComposeIdentityAndTotalReplacement) {
  const std::string a = service.encode(image_payload(10, 10, 7)).body["canvas_id"];
  const std::string b = service.sample(R"({"seed": 4, "temperature": 1.0})").body["canvas_id"];
  const auto none = service.compose(json{{"a", a}, {"b", b}, {"cells", json::array()}}.dump());
  ASSERT_EQ(none.status, 200) << none.body.dump();
  EXPECT_EQ(none.body["canvas_id"], a);
  EXPECT_EQ(service.decode(none.body["canvas_id"]).body["image"], service.decode(a).body["image"]);
  const auto all = service.compose(json{{"a", a}, {"b", b}, {"cells", {1, 2, 3, 4}}}.dump());
  EXPECT_EQ(all.body["canvas_id"], b);
  EXPECT_EQ(service.decode(all.body["canvas_id"]).body["image"], service.decode(b).body["image"]);
  EXPECT_TRUE(all.body.contains("preview"));
}

TEST_F(ServiceTest, ComposeValidatesCellsAndIds) {
  const std::string a = service.encode(image_payload(10, 10, 7)).body["canvas_id"];
  const auto bad = service.compose(json{{"a", a}, {"b", a}, {"cells", {1, 9}}}.dump());
  EXPECT_EQ(bad.status, 400);
  EXPECT_NE(bad.body["error"].get<std::string>().find("9"), std::string::npos);
  EXPECT_EQ(service.compose(json{{"a", a}, {"b", a}, {"cells", {0}}}.dump()).status, 400);
  EXPECT_EQ(service.compose(json{{"a", a}, {"b", a}, {"cells", {"x"}}}.dump()).status, 400);
  EXPECT_EQ(service.compose(json{{"a", a}, {"b", "deadbeef"}}.dump()).status, 404);
  EXPECT_EQ(service.compose(json{{"a", a}}.dump()).status, 400);
}

TEST_F(ServiceTest, DecodeIsDeterministicWithPaddedDims) {
  const std::string a = service.encode(image_payload(10, 10, 2)).body["canvas_id"];
  const auto d1 = service.decode(a);
  const auto d2 = service.decode(a);
  ASSERT_EQ(d1.status, 200);
  EXPECT_EQ(d1.body, d2.body);
  const Image img = decode_pnm(base64_decode(d1.body["image"].get<std::string>()));
  EXPECT_EQ(img.height, 10u);
  EXPECT_EQ(img.width, 10u);
  EXPECT_EQ(service.decode("0123").status, 404);
}

TEST_F(ServiceTest, SampleIsSeededAndZeroTemperatureIsSeedFree) {
  const auto a = service.sample(R"({"seed": 11, "temperature": 1.0})");
  const auto b = service.sample(R"({"seed": 11, "temperature": 1.0})");
  ASSERT_EQ(a.status, 200) << a.body.dump();
  EXPECT_EQ(a.body, b.body);
  const auto z1 = service.sample(R"({"seed": 1, "temperature": 0})");
  const auto z2 = service.sample(R"({"seed": 999, "temperature": 0})");
  EXPECT_EQ(z1.body["program"], z2.body["program"]);
  EXPECT_EQ(z1.body["image"], z2.body["image"]);
  EXPECT_EQ(service.sample(R"({"seed": 1, "temperature": -0.5})").status, 400);
  EXPECT_EQ(service.sample(R"({"seed": -1})").status, 400);
  EXPECT_EQ(service.sample(R"({"temperature": "hot"})").status, 400);
}

TEST_F(ServiceTest, CacheIsContentAddressedUnderConcurrency) {
  std::vector<std::string> ids(8);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i)
    threads.emplace_back([&, i] { ids[i] = service.encode(image_payload(10, 10, 42)).body["canvas_id"]; });
  for (auto& t : threads) t.join();
  for (const auto& id : ids) EXPECT_EQ(id, ids[0]);
  EXPECT_EQ(service.cache_size(), 1u);
}

TEST_F(ServiceTest, HttpEndpointsWithCors) {
  EditServer server(service, {"127.0.0.1", 0, "http://localhost:5173"});
  const int port = server.bind();
  std::thread th([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);
  cli.set_connection_timeout(5);
  auto health = cli.Get("/health");
  for (int i = 0; i < 50 && !health; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    health = cli.Get("/health");
  }
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  EXPECT_TRUE(json::parse(health->body)["model_loaded"].get<bool>());

  const auto enc = cli.Post("/encode", image_payload(10, 10, 3), "application/json");
  ASSERT_TRUE(enc);
  ASSERT_EQ(enc->status, 200);
  const std::string id = json::parse(enc->body)["canvas_id"];
  const auto dec = cli.Get("/decode/" + id);
  ASSERT_TRUE(dec);
  EXPECT_EQ(dec->status, 200);
  EXPECT_EQ(json::parse(dec->body)["image"], service.decode(id).body["image"]);
  const auto cmp = cli.Post("/compose", json{{"a", id}, {"b", id}, {"cells", {2}}}.dump(), "application/json");
  ASSERT_TRUE(cmp);
  EXPECT_EQ(cmp->status, 200);
  const auto smp = cli.Post("/sample", R"({"seed": 3, "temperature": 0.5})", "application/json");
  ASSERT_TRUE(smp);
  EXPECT_EQ(smp->status, 200);
  const auto missing = cli.Get("/decode/ffff");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  const auto bad = cli.Post("/encode", "{", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  const auto nowhere = cli.Get("/nope");
  ASSERT_TRUE(nowhere);
  EXPECT_EQ(nowhere->status, 404);
  const auto pre = cli.Options("/encode");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Methods"), "GET, POST, OPTIONS");
  server.stop();
  th.join();
}
