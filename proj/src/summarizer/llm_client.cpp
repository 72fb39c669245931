#include "cellmtl/summarizer.hpp"

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

namespace cellmtl {

using nlohmann::json;

namespace {

constexpr const char* kPreambleFile = "summarizer_preamble_v1.txt";

std::string asset_dir()
{
    if (const char* env = std::getenv("CELLMTL_ASSET_DIR"); env && *env)
        return env;
    return CELLMTL_ASSET_DIR;
}

struct ParsedUrl {
    std::string origin; // scheme://host[:port]
    std::string path;
};

std::optional<ParsedUrl> parse_url(const std::string& url)
{
    static const std::regex re(R"(^(https?://[^/\s]+)(/\S*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re))
        return std::nullopt;
    return ParsedUrl{m[1].str(), m[2].matched ? m[2].str() : "/"};
}

// reply body -> summary text; a JSON object with "summary", otherwise the raw body
std::string reply_text(const std::string& body)
{
    auto j = json::parse(body, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.contains("summary") && j["summary"].is_string())
        return j["summary"].get<std::string>();
    return body;
}

LlmOutcome fallback(const EvidenceBundle& b, const std::vector<SummaryTemplate>& templates, std::string notice)
{
    spdlog::warn("summarizer: {}; using template output", notice);
    LlmOutcome out;
    out.text = render_summary(b, templates);
    out.fell_back = true;
    out.notice = std::move(notice);
    return out;
}

} // namespace

std::string instruction_preamble()
{
    const std::string path = asset_dir() + "/" + kPreambleFile;
    std::ifstream in(path);
    if (!in)
        throw InputError("summarizer preamble not found at " + path);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

LlmOutcome llm_summarize(const EvidenceBundle& b, const EndpointConfig& cfg,
                         const std::vector<SummaryTemplate>& templates)
{
    if (cfg.url.empty())
        return fallback(b, templates, "no endpoint configured");
    const auto url = parse_url(cfg.url);
    if (!url)
        return fallback(b, templates, "malformed endpoint url '" + cfg.url + "'");

    std::string body;
    try {
        body = json{{"schema", "cellmtl-llm-request"},
                    {"version", 1},
                    {"preamble", instruction_preamble()},
                    {"evidence", json::parse(evidence_to_json(b))}}
                   .dump();
    } catch (const std::exception& e) {
        return fallback(b, templates, e.what());
    }

    httplib::Client cli(url->origin);
    const auto secs = std::chrono::duration<double>(cfg.timeout_s);
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(secs);
    cli.set_connection_timeout(us);
    cli.set_read_timeout(us);
    cli.set_write_timeout(us);
    httplib::Headers headers;
    if (const char* tok = std::getenv(cfg.token_env.c_str()); tok && *tok)
        headers.emplace("Authorization", std::string("Bearer ") + tok);

    auto res = cli.Post(url->path, headers, body, "application/json");
    if (!res)
        return fallback(b, templates, "endpoint unreachable (" + httplib::to_string(res.error()) + ")");
    if (res->status != 200)
        return fallback(b, templates, "endpoint returned HTTP " + std::to_string(res->status));

    auto g = ground(reply_text(res->body), b);
    LlmOutcome out;
    out.dropped = g.dropped;
    if (g.kept.empty()) {
        auto fb = fallback(b, templates, "no sentence of the endpoint reply was grounded in the evidence");
        fb.dropped = std::move(out.dropped);
        return fb;
    }
    out.used_endpoint = true;
    out.text = g.text;
    if (!g.dropped.empty()) {
        spdlog::warn("summarizer: dropped {} ungrounded sentence(s) from the endpoint reply", g.dropped.size());
        out.text += ' ' + render_summary(b, templates);
        out.fell_back = true;
        out.notice = std::to_string(g.dropped.size()) + " ungrounded sentence(s) dropped";
    }
    return out;
}

} // namespace cellmtl
