#include "cellmtl/summarizer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace cellmtl {

namespace {

constexpr double kMinorPercent = 15;
constexpr double kHighConfidence = 0.9;
constexpr double kLowConfidencePercent = 10;
constexpr double kAttenuationRatio = 0.8;

Slot cls_slot(std::string n) { return {std::move(n), SlotType::class_name}; }
Slot marker_slot(std::string n) { return {std::move(n), SlotType::marker}; }
Slot pct_slot(std::string n) { return {std::move(n), SlotType::percent, 0, 100}; }
Slot r_slot(std::string n) { return {std::move(n), SlotType::correlation, -1, 1}; }
Slot d_slot(std::string n) { return {std::move(n), SlotType::effect_size, -50, 50}; }
Slot count_slot(std::string n) { return {std::move(n), SlotType::count, 0, 1e12}; }
Slot ratio_slot(std::string n) { return {std::move(n), SlotType::ratio, 0, 1}; }

// cohort indices, largest share first; ties keep class order
std::vector<std::size_t> cohort_order(const EvidenceBundle& b)
{
    std::vector<std::size_t> idx(b.cohort.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](auto x, auto y) { return b.cohort[x].percent > b.cohort[y].percent; });
    return idx;
}

// per class, the defined effect with the largest |d| satisfying pred
template <class Pred>
std::vector<SlotValues> per_class_effect(const EvidenceBundle& b, Pred pred)
{
    std::vector<SlotValues> out;
    for (const auto& c : b.cohort) {
        const EffectSize* best = nullptr;
        for (const auto& e : b.effects)
            if (e.cls == c.cls && e.defined && pred(e.d) && (!best || std::abs(e.d) > std::abs(best->d)))
                best = &e;
        if (best)
            out.push_back({{{"d", best->d}}, {{"cls", best->cls}, {"marker", best->marker}}});
    }
    return out;
}

template <class Pred>
std::vector<SlotValues> markers_where(const EvidenceBundle& b, Pred pred)
{
    std::vector<SlotValues> out;
    for (const auto& m : b.markers)
        if (!m.degenerate && pred(m.r))
            out.push_back({{{"r", m.r}}, {{"marker", m.marker}}});
    return out;
}

std::vector<SummaryTemplate> build_templates()
{
    std::vector<SummaryTemplate> t;

    t.push_back({"cohort.majority", 10, {cls_slot("cls"), pct_slot("pct")},
                 "{cls}s constitute the majority of the cohort ({pct}%).", [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.cohort.empty())
                         return v;
                     const auto& top = b.cohort[cohort_order(b)[0]];
                     if (top.percent > 50)
                         v.push_back({{{"pct", top.percent}}, {{"cls", top.cls}}});
                     return v;
                 }});

    t.push_back({"cohort.plurality", 10, {cls_slot("cls"), pct_slot("pct"), cls_slot("cls2"), pct_slot("pct2")},
                 "{cls}s are the most frequent population ({pct}%), followed by {cls2}s ({pct2}%).",
                 [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.cohort.size() < 2)
                         return v;
                     const auto o = cohort_order(b);
                     const auto &top = b.cohort[o[0]], &second = b.cohort[o[1]];
                     if (top.percent <= 50 && top.count > 0)
                         v.push_back({{{"pct", top.percent}, {"pct2", second.percent}},
                                      {{"cls", top.cls}, {"cls2", second.cls}}});
                     return v;
                 }});

    t.push_back({"cohort.minor", 11, {cls_slot("cls"), pct_slot("pct")},
                 "{cls}s form a minor population ({pct}%).", [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     for (const auto& c : b.cohort)
                         if (c.count > 0 && c.percent < kMinorPercent)
                             v.push_back({{{"pct", c.percent}}, {{"cls", c.cls}}});
                     return v;
                 }});

    t.push_back({"cohort.absent", 12, {cls_slot("cls")}, "No cells are predicted as {cls}s.",
                 [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     for (const auto& c : b.cohort)
                         if (c.count == 0)
                             v.push_back({{}, {{"cls", c.cls}}});
                     return v;
                 }});

    t.push_back({"classification.accuracy", 20, {pct_slot("acc"), ratio_slot("f1")},
                 "Classification accuracy is {acc}% with a macro F1 of {f1}.", [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.accuracy_percent && b.macro_f1)
                         v.push_back({{{"acc", *b.accuracy_percent}, {"f1", *b.macro_f1}}, {}});
                     return v;
                 }});

    t.push_back({"confidence.high", 21, {ratio_slot("conf")},
                 "Predictions are made with high mean confidence ({conf}).", [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.confidence_mean && *b.confidence_mean >= kHighConfidence)
                         v.push_back({{{"conf", *b.confidence_mean}}, {}});
                     return v;
                 }});

    t.push_back({"confidence.low", 22, {pct_slot("pct")},
                 "{pct}% of cells fall below the low-confidence cutoff and merit review.",
                 [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.low_confidence_percent && *b.low_confidence_percent >= kLowConfidencePercent)
                         v.push_back({{{"pct", *b.low_confidence_percent}}, {}});
                     return v;
                 }});

    t.push_back({"effect.strong_enrichment", 30, {cls_slot("cls"), marker_slot("marker"), d_slot("d")},
                 "{cls}s display strong {marker} enrichment (Cohen's d={d}).", [](const EvidenceBundle& b) {
                     return per_class_effect(b, [](double d) { return d >= kStrongEffect; });
                 }});

    t.push_back({"effect.strong_depletion", 31, {cls_slot("cls"), marker_slot("marker"), d_slot("d")},
                 "{cls}s show marked {marker} depletion (Cohen's d={d}).", [](const EvidenceBundle& b) {
                     return per_class_effect(b, [](double d) { return d <= -kStrongEffect; });
                 }});

    t.push_back({"effect.moderate", 32, {cls_slot("cls"), marker_slot("marker"), d_slot("d")},
                 "{cls}s show moderate {marker} elevation (Cohen's d={d}).", [](const EvidenceBundle& b) {
                     // only for classes without any strong effect
                     std::vector<SlotValues> out;
                     for (auto& v : per_class_effect(b, [](double d) { return d >= kModerateEffect && d < kStrongEffect; })) {
                         const auto& cls = v.words["cls"];
                         const bool strong = std::any_of(b.effects.begin(), b.effects.end(), [&](const auto& e) {
                             return e.cls == cls && e.defined && std::abs(e.d) >= kStrongEffect;
                         });
                         if (!strong)
                             out.push_back(std::move(v));
                     }
                     return out;
                 }});

    t.push_back({"confusion.hotspot", 40, {cls_slot("truth"), cls_slot("pred"), count_slot("count")},
                 "The most frequent confusion is {truth}s predicted as {pred}s (count: {count}).",
                 [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (!b.confusions.empty()) {
                         const auto& c = b.confusions.front();
                         v.push_back({{{"count", c.count}}, {{"truth", c.truth}, {"pred", c.predicted}}});
                     }
                     return v;
                 }});

    t.push_back({"confusion.secondary", 41, {cls_slot("truth"), cls_slot("pred"), count_slot("count")},
                 "{truth}s are also misassigned as {pred}s (count: {count}).", [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.confusions.size() >= 2) {
                         const auto& c = b.confusions[1];
                         v.push_back({{{"count", c.count}}, {{"truth", c.truth}, {"pred", c.predicted}}});
                     }
                     return v;
                 }});

    t.push_back({"marker.lineage_coupled", 50, {marker_slot("marker"), r_slot("r")},
                 "{marker} is lineage-coupled and tracks morphology closely (r={r}).", [](const EvidenceBundle& b) {
                     return markers_where(b, [](double r) { return r >= kLineageCoupledR; });
                 }});

    t.push_back({"marker.intermediate", 51, {marker_slot("marker"), r_slot("r")},
                 "{marker} shows intermediate morphological predictability (r={r}).", [](const EvidenceBundle& b) {
                     return markers_where(b, [](double r) { return r >= kWeakCoupledR && r < kLineageCoupledR; });
                 }});

    t.push_back({"marker.weak", 52, {marker_slot("marker"), r_slot("r")},
                 "{marker} is weakly morphology-coupled (r={r}).", [](const EvidenceBundle& b) {
                     return markers_where(b, [](double r) { return r < kWeakCoupledR; });
                 }});

    t.push_back({"regression.overall", 60, {r_slot("r")},
                 "Across markers the mean Pearson correlation is {r}.", [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.mean_r)
                         v.push_back({{{"r", *b.mean_r}}, {}});
                     return v;
                 }});

    t.push_back({"regression.attenuation", 61, {r_slot("ccc"), r_slot("r")},
                 "Agreement is attenuated relative to correlation (mean CCC {ccc} versus mean r {r}), indicating "
                 "scale or offset bias.",
                 [](const EvidenceBundle& b) {
                     std::vector<SlotValues> v;
                     if (b.mean_r && b.mean_ccc && *b.mean_r > 0 && *b.mean_ccc < kAttenuationRatio * *b.mean_r)
                         v.push_back({{{"ccc", *b.mean_ccc}, {"r", *b.mean_r}}, {}});
                     return v;
                 }});

    std::stable_sort(t.begin(), t.end(), [](const auto& a, const auto& b) {
        return std::tie(a.priority, a.id) < std::tie(b.priority, b.id);
    });
    return t;
}

// nullopt when a slot is missing or out of range
std::optional<std::string> fill(const SummaryTemplate& tpl, const SlotValues& v)
{
    std::string s = tpl.skeleton;
    for (const auto& slot : tpl.slots) {
        std::string value;
        if (slot.type == SlotType::class_name || slot.type == SlotType::marker) {
            auto it = v.words.find(slot.name);
            if (it == v.words.end() || it->second.empty())
                return std::nullopt;
            value = it->second;
        } else {
            auto it = v.numbers.find(slot.name);
            if (it == v.numbers.end() || !std::isfinite(it->second) || it->second < slot.lo || it->second > slot.hi)
                return std::nullopt;
            value = evidence_number(it->second);
        }
        const std::string key = "{" + slot.name + "}";
        for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
            s.replace(pos, key.size(), value);
    }
    return s;
}

} // namespace

const std::vector<SummaryTemplate>& default_templates()
{
    static const std::vector<SummaryTemplate> t = build_templates();
    return t;
}

std::string fallback_sentence(const EvidenceBundle& b)
{
    return "The cohort comprises " + evidence_number(b.n) + " cells.";
}

std::string render_summary(const EvidenceBundle& b, const std::vector<SummaryTemplate>& templates)
{
    std::vector<const SummaryTemplate*> order;
    for (const auto& t : templates)
        order.push_back(&t);
    std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) {
        return std::tie(a->priority, a->id) < std::tie(b->priority, b->id);
    });
    std::string out;
    for (const auto* t : order) {
        for (const auto& v : t->fire(b)) {
            auto s = fill(*t, v);
            if (!s) {
                spdlog::warn("summary template {}: slot value missing or out of range, sentence skipped", t->id);
                continue;
            }
            if (!out.empty())
                out += ' ';
            out += *s;
        }
    }
    return out.empty() ? fallback_sentence(b) : out;
}

} // namespace cellmtl
