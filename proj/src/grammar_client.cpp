#include <string>

#include <httplib.h>
#include <json.hpp>

#include "qg/common.hpp"

namespace qg {

// LanguageTool-compatible check API: POST {endpoint}/v2/check with form
// fields text and language; the response carries a "matches" array.
int external_grammar_matches(const std::string& endpoint, const std::string& text) {
  httplib::Client client(endpoint);
  client.set_connection_timeout(5);
  client.set_read_timeout(10);
  httplib::Params params{{"text", text}, {"language", "en-US"}};
  auto res = client.Post("/v2/check", params);
  if (!res)
    throw runtime_error("grammar service unreachable at " + endpoint +
                        " (no silent fallback; reports must stay comparable)");
  if (res->status != 200)
    throw runtime_error("grammar service at " + endpoint + " returned status " +
                        std::to_string(res->status));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw runtime_error(std::string("grammar service returned malformed json: ") + e.what());
  }
  if (!j.contains("matches") || !j["matches"].is_array())
    throw runtime_error("grammar service response missing 'matches' array");
  return static_cast<int>(j["matches"].size());
}

}  // namespace qg
