#include "cellmtl/summarizer.hpp"

#include <algorithm>
#include <cctype>
#include <regex>

namespace cellmtl {

namespace {

// CD markers and HLA class II names; anything looking like one must come from the bundle
const std::regex& marker_like()
{
    static const std::regex re(R"((?:\bCD\d+[A-Za-z]?\b|\bHLA-[A-Za-z0-9]+\b))");
    return re;
}

// digit-bearing words that are names, not quantities
const std::regex& identifier()
{
    static const std::regex re(R"(\bF1\b)");
    return re;
}

const std::regex& numeral()
{
    static const std::regex re(R"(-?\d+(?:\.\d+)?)");
    return re;
}

// sentence with the bundle's full marker names blanked, longest first so "CD3/CD19/CD56" goes before "CD3"
std::string without_marker_names(std::string s, const EvidenceBundle& b)
{
    auto names = b.marker_names;
    std::sort(names.begin(), names.end(), [](const auto& x, const auto& y) { return x.size() > y.size(); });
    for (const auto& name : names) {
        if (name.empty())
            continue;
        for (auto pos = s.find(name); pos != std::string::npos; pos = s.find(name, pos + 1))
            s.replace(pos, name.size(), std::string(name.size(), ' '));
    }
    return s;
}

std::string trim(const std::string& s)
{
    auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos)
        return {};
    auto z = s.find_last_not_of(" \t\r\n");
    return s.substr(a, z - a + 1);
}

} // namespace

std::vector<std::string> split_sentences(const std::string& text)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if ((c == '.' || c == '!' || c == '?') &&
            (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])))) {
            if (auto s = trim(text.substr(start, i + 1 - start)); !s.empty())
                out.push_back(std::move(s));
            start = i + 1;
        }
    }
    if (auto s = trim(text.substr(std::min(start, text.size()))); !s.empty())
        out.push_back(std::move(s));
    return out;
}

std::vector<std::string> extract_numerals(const std::string& sentence, const EvidenceBundle& b)
{
    // drop marker names, then any marker-like token, so "CD16" never yields 16
    const std::string s =
        std::regex_replace(std::regex_replace(without_marker_names(sentence, b), marker_like(), " "), identifier(), " ");
    std::vector<std::string> out;
    for (std::sregex_iterator it(s.begin(), s.end(), numeral()), end; it != end; ++it) {
        std::string tok = it->str();
        // a hyphen glued to a preceding word is punctuation, not a sign
        const auto pos = std::size_t(it->position());
        if (tok[0] == '-' && pos > 0 && std::isalnum(static_cast<unsigned char>(s[pos - 1])))
            tok.erase(0, 1);
        out.push_back(evidence_number(std::stod(tok)));
    }
    return out;
}

GroundingResult ground(const std::string& text, const EvidenceBundle& b)
{
    const auto numerals = b.numerals();
    const auto tokens = b.marker_tokens();
    GroundingResult r;
    for (const auto& sentence : split_sentences(text)) {
        bool ok = true;
        const std::string stripped = without_marker_names(sentence, b);
        for (std::sregex_iterator it(stripped.begin(), stripped.end(), marker_like()), end; ok && it != end; ++it)
            ok = tokens.contains(it->str());
        if (ok) {
            for (const auto& n : extract_numerals(sentence, b))
                if (!numerals.contains(n)) {
                    ok = false;
                    break;
                }
        }
        (ok ? r.kept : r.dropped).push_back(sentence);
    }
    for (const auto& s : r.kept) {
        if (!r.text.empty())
            r.text += ' ';
        r.text += s;
    }
    return r;
}

} // namespace cellmtl
