#include <gtest/gtest.h>

#include <chrono>

#include "recap/http_clients.hpp"
#include "support/mock_server.hpp"
#include "support/mocks.hpp"

namespace {

using namespace std::chrono_literals;

recap::RetryPolicy fast_retry() { return {3, 10ms, 2.0}; }

recap::GenerationRequest request(std::string prompt) {
  recap::GenerationRequest r;
  r.prompt = std::move(prompt);
  return r;
}

TEST(Endpoint, ParsesHostAndPrefix) {
  const auto e = recap::HttpEndpoint::parse("http://localhost:8080/bridge/");
  EXPECT_EQ(e.scheme_host_port, "http://localhost:8080");
  EXPECT_EQ(e.path_prefix, "/bridge");
  EXPECT_EQ(recap::HttpEndpoint::parse("http://h:1").path_prefix, "");
  EXPECT_THROW(recap::HttpEndpoint::parse("https://h:1"), recap::ValidationError);
  EXPECT_THROW(recap::HttpEndpoint::parse("localhost:80"), recap::ValidationError);
  EXPECT_THROW(recap::HttpEndpoint::parse("http://"), recap::ValidationError);
}

TEST(Generator, RequestCarriesExactlyTheContractFields) {
  mock::EchoGenerator gen;
  mock::HashEmbedder emb(4);
  mock::BridgeServer server(gen, emb);
  recap::HttpGeneratorClient client(server.url(), fast_retry());
  const auto out = client.generate(request("Similar images show: a cat This image shows:"));
  EXPECT_EQ(out, std::vector<std::string>(10, "a cat"));

  const auto bodies = server.generate_bodies();
  ASSERT_EQ(bodies.size(), 1u);
  const auto j = nlohmann::json::parse(bodies[0]);
  EXPECT_EQ(j.size(), 6u);
  EXPECT_EQ(j.at("num_samples"), 10);
  EXPECT_EQ(j.at("temperature").get<double>(), 0.1);
  EXPECT_EQ(j.at("top_p").get<double>(), 0.9);
  EXPECT_EQ(j.at("max_tokens"), 40);
  EXPECT_TRUE(j.at("seed").is_null());
  EXPECT_EQ(j.at("prompt"), "Similar images show: a cat This image shows:");
}

TEST(Generator, ShortfallIsRecorded) {
  auto seven = [](const recap::GenerationRequest&) {
    std::vector<std::string> out;
    for (int i = 0; i < 7; ++i) out.push_back("candidate " + std::to_string(i));
    return out;
  };
  mock::FnGenerator gen(seven);
  mock::HashEmbedder emb(4);
  mock::BridgeServer server(gen, emb);
  recap::HttpGeneratorClient client(server.url(), fast_retry());
  recap::HttpTextEmbedder embedder(server.url(), fast_retry());
  const auto generated = recap::generate_candidates(client, request("p"));
  const auto set = recap::select_candidate(generated, recap::Vector::Ones(4), recap::identity_map(4), embedder);
  EXPECT_EQ(set.requested, 10u);
  EXPECT_EQ(set.returned, 7u);
  EXPECT_EQ(set.candidates.size(), 7u);
  EXPECT_EQ(set.shortfall(), 3u);
}

TEST(Generator, ErrorPayloadIsSurfaced) {
  mock::EchoGenerator gen;
  mock::HashEmbedder emb(4);
  mock::BridgeServer server(gen, emb);
  server.fail_with(500);
  recap::HttpGeneratorClient client(server.url(), fast_retry());
  try {
    client.generate(request("Similar images show: x This image shows:"));
    FAIL();
  } catch (const recap::ExternalServiceError& e) {
    EXPECT_NE(std::string(e.what()).find("injected failure"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("500"), std::string::npos) << e.what();
  }
  // Server-side errors are not retried.
  EXPECT_EQ(server.generate_bodies().size(), 1u);
}

TEST(Generator, GeneratorExceptionBecomes500) {
  auto boom = [](const recap::GenerationRequest&) -> std::vector<std::string> { throw std::runtime_error("OOM"); };
  mock::FnGenerator gen(boom);
  mock::HashEmbedder emb(4);
  mock::BridgeServer server(gen, emb);
  recap::HttpGeneratorClient client(server.url(), fast_retry());
  EXPECT_THROW(client.generate(request("p")), recap::ExternalServiceError);
}

TEST(Generator, UnreachableAfterRetries) {
  const int port = mock::closed_port();
  recap::HttpGeneratorClient client("http://127.0.0.1:" + std::to_string(port), fast_retry());
  const auto start = std::chrono::steady_clock::now();
  try {
    client.generate(request("p"));
    FAIL();
  } catch (const recap::ExternalServiceError& e) {
    EXPECT_NE(std::string(e.what()).find("unreachable"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("3 attempts"), std::string::npos) << e.what();
    EXPECT_EQ(e.exit_code(), 4);
  }
  // Two backoff sleeps: 10 ms + 20 ms.
  EXPECT_GE(std::chrono::steady_clock::now() - start, 30ms);
}

TEST(Embedder, RowsAlignWithInputAcrossBatches) {
  mock::EchoGenerator gen;
  mock::HashEmbedder local(6);
  mock::BridgeServer server(gen, local);
  recap::HttpTextEmbedder client(server.url(), fast_retry(), /*batch_size=*/2);
  const std::vector<std::string> texts{"a", "b", "c", "d", "e"};
  const auto remote = client.embed(texts);
  const auto expected = local.embed(texts);
  ASSERT_EQ(remote.rows(), 5);
  ASSERT_EQ(remote.cols(), 6);
  EXPECT_LE((remote - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(server.embed_calls(), 3u);
}

TEST(Embedder, MalformedResponsesAreExternalErrors) {
  mock::EchoGenerator gen;
  mock::HashEmbedder local(2);
  mock::BridgeServer server(gen, local);
  recap::HttpTextEmbedder client(server.url(), fast_retry());
  const std::vector<std::string> texts{"a", "b"};
  for (const std::string body :
       {R"({"dim": 2, "vectors": [[1, 2]]})", R"({"dim": 2, "vectors": [[1, 2], [3]]})",
        R"({"dim": 2, "vectors": [[1, 2], ["x", 1]]})", R"({"vectors": []})", R"(not json)",
        R"({"dim": 2, "vectors": [[1, 2], [1e999, 0]]})"}) {
    server.override_embed(200, body);
    EXPECT_THROW(client.embed(texts), recap::ExternalServiceError) << body;
  }
  server.override_embed(503, R"({"error": "warming up"})");
  try {
    client.embed(texts);
    FAIL();
  } catch (const recap::ExternalServiceError& e) {
    EXPECT_NE(std::string(e.what()).find("warming up"), std::string::npos);
  }
}

TEST(Pipeline, CaptionsThroughHttpClients) {
  mock::CyclingGenerator gen(false);
  mock::HashEmbedder local(4);
  mock::BridgeServer server(gen, local);
  recap::HttpGeneratorClient client(server.url(), fast_retry());
  recap::HttpTextEmbedder embedder(server.url(), fast_retry());
  std::vector<recap::CaptionRecord> recs;
  for (int i = 0; i < 4; ++i) {
    recs.push_back({"c" + std::to_string(i), "caption " + std::to_string(i), recap::Vector::Unit(4, i),
                    recap::Provenance::human, 0, {}});
  }
  const auto store = recap::Datastore::build(std::move(recs));
  const auto r = recap::caption_image(recap::Vector::Unit(4, 2), recap::identity_map(4), store, {}, client, embedder, 2,
                                      {});
  EXPECT_EQ(r.retrieved.front().text, "caption 2");
  EXPECT_EQ(r.candidates.candidates.size(), 2u);  // cycling over two retrieved captions
  EXPECT_EQ(r.candidates.duplicates, 8u);
}

}  // namespace
