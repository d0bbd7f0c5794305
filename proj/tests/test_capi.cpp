#include <cstring>
#include <string>

#include "doctest.h"
#include "warpvos/warpvos.h"

TEST_CASE("config handles: defaults, hashing and unknown keys") {
  wv_config* a = nullptr;
  wv_config* b = nullptr;
  REQUIRE(wv_config_default(&a) == WV_OK);
  REQUIRE(wv_config_parse("{}", &b) == WV_OK);
  char ha[65], hb[65];
  REQUIRE(wv_config_hash(a, ha) == WV_OK);
  REQUIRE(wv_config_hash(b, hb) == WV_OK);
  CHECK(std::strlen(ha) == 64);
  CHECK(std::string(ha) == hb);
  CHECK(std::string(wv_config_json(a)).find("\"memory_stride\"") != std::string::npos);
  wv_config_free(b);

  REQUIRE(wv_config_parse(R"({"seed": 9})", &b) == WV_OK);
  wv_config_hash(b, hb);
  CHECK(std::string(ha) != hb);
  wv_config_free(b);
  wv_config_free(a);

  wv_config* c = nullptr;
  CHECK(wv_config_parse(R"({"sed": 9})", &c) == WV_ERR_CONFIG);
  CHECK(std::string(wv_last_error()).find("sed") != std::string::npos);
  CHECK(c == nullptr);
  CHECK(wv_config_parse("{not json", &c) == WV_ERR_CONFIG);
  CHECK(wv_config_parse(R"({"inference": {"flow": "optical"}})", &c) == WV_ERR_CONFIG);
}

TEST_CASE("status codes for missing inputs and null arguments") {
  wv_model* m = nullptr;
  CHECK(wv_model_load("/nonexistent/ckpt", &m) == WV_ERR_IO);
  CHECK(std::string(wv_last_error()).find("/nonexistent/ckpt") != std::string::npos);
  CHECK(wv_generate(nullptr, "x", 0) == WV_ERR_USAGE);
  CHECK(wv_generate("/nonexistent/spec.json", "/tmp/x", 0) == WV_ERR_IO);
  CHECK(wv_infer(nullptr, "a", "b", nullptr, nullptr) == WV_ERR_USAGE);
  CHECK(std::string(wv_status_name(WV_ERR_NUMERIC)) == "numeric error");
  CHECK(std::string(wv_version()).size() > 0);
  wv_model_free(nullptr);
  wv_config_free(nullptr);
  wv_report_free(nullptr);
}
