#pragma once

#include "cellmtl/metrics.hpp"
#include "cellmtl/pipeline.hpp"

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace cellmtl {

// Evidence.

/// Every number in a bundle is rounded to this many decimals at construction and emitted that way.
inline constexpr int kEvidenceDecimals = 2;

/// Rounds to kEvidenceDecimals and renders without trailing zeros: 52 -> "52", 0.5 -> "0.5", 4.686 -> "4.69".
std::string evidence_number(double v);

struct CohortEntry {
    std::string cls;
    double count = 0;
    double percent = 0;
};

struct EffectSize {
    std::string cls;
    std::string marker;
    double d = 0;
    bool defined = false; ///< false when the pooled std is degenerate; such entries never fire templates
};

struct MarkerEvidence {
    std::string marker;
    double r = 0, rmse = 0, mae = 0, ccc = 0;
    bool degenerate = false;
};

struct ConfusionPair {
    std::string truth;
    std::string predicted;
    double count = 0;
};

struct EvidenceBundle {
    double n = 0;
    std::vector<CohortEntry> cohort;   ///< empty without classification output
    std::vector<EffectSize> effects;   ///< class-vs-rest, per marker
    std::vector<MarkerEvidence> markers;
    std::vector<ConfusionPair> confusions; ///< off-diagonal pairs with count > 0, largest first, at most three
    std::optional<double> accuracy_percent;
    std::optional<double> macro_f1;
    std::optional<double> confidence_mean;
    std::optional<double> low_confidence_percent;
    std::optional<double> mean_r;
    std::optional<double> mean_ccc;
    std::vector<std::string> marker_names;
    /// Field path in the bundle -> the EvalReport quantity it came from.
    std::map<std::string, std::string> provenance;

    /// The normalized numerals the bundle emits.
    std::set<std::string> numerals() const;
    /// Marker tokens the bundle mentions: each full name and each '/'-separated component.
    std::set<std::string> marker_tokens() const;
};

/// Cohen's d with sample standard deviations and a pooled denominator. Returns nullopt when either
/// group has fewer than two members or the pooled std is zero.
std::optional<double> cohens_d(double mean1, double sd1, double n1, double mean2, double sd2, double n2);

/// Requires a report with classification output (cohort). Regression output, if present,
/// contributes marker metrics and effect sizes.
EvidenceBundle build_evidence(const EvalReport& report, const std::array<std::string, kNumMarkers>& marker_names);

/// Versioned JSON serialization of the bundle (schema "cellmtl-evidence", version 1).
std::string evidence_to_json(const EvidenceBundle& b);

// Templates.

enum class SlotType { class_name, marker, percent, correlation, effect_size, count, ratio };

struct Slot {
    std::string name;
    SlotType type;
    double lo = 0, hi = 0; ///< allowed range for numeric slots
};

/// One fired instance: slot name -> value. Numeric values are carried as doubles and formatted
/// with evidence_number; textual values as strings.
struct SlotValues {
    std::map<std::string, double> numbers;
    std::map<std::string, std::string> words;
};

struct SummaryTemplate {
    std::string id;
    int priority = 0; ///< lower renders first
    std::vector<Slot> slots;
    std::string skeleton; ///< text with {slot} placeholders
    /// Firing condition and slot binding: returns one SlotValues per sentence to emit (empty = does not fire).
    std::function<std::vector<SlotValues>(const EvidenceBundle&)> fire;
};

/// Declared decision thresholds.
inline constexpr double kStrongEffect = 0.8;
inline constexpr double kModerateEffect = 0.5;
inline constexpr double kLineageCoupledR = 0.7;
inline constexpr double kWeakCoupledR = 0.4;

const std::vector<SummaryTemplate>& default_templates();

/// Renders fired templates in (priority, id) order. Falls back to a cohort-size sentence when nothing fires.
std::string render_summary(const EvidenceBundle& b, const std::vector<SummaryTemplate>& templates = default_templates());
std::string fallback_sentence(const EvidenceBundle& b);

// Grounding.

struct GroundingResult {
    std::string text;                  ///< kept sentences joined with single spaces
    std::vector<std::string> kept;
    std::vector<std::string> dropped;
};

/// Sentence-level filter: a sentence survives only if every numeral and every marker-like token
/// in it appears in the bundle.
GroundingResult ground(const std::string& text, const EvidenceBundle& b);
/// Splits on '.', '!' or '?' followed by whitespace or end of text; decimals stay intact.
std::vector<std::string> split_sentences(const std::string& text);
/// Normalized numerals in a sentence, after removing the bundle's marker names.
std::vector<std::string> extract_numerals(const std::string& sentence, const EvidenceBundle& b);

// External endpoint.

/// Fixed instruction preamble sent ahead of the evidence.
std::string instruction_preamble();

struct LlmOutcome {
    std::string text;
    bool used_endpoint = false; ///< the endpoint answered and at least one sentence survived
    bool fell_back = false;     ///< template output used in full or appended
    std::vector<std::string> dropped;
    std::string notice; ///< why the endpoint was not used, if it was not
};

/// Posts {"preamble", "evidence"} as JSON to cfg.url and filters the reply (a JSON object with a
/// "summary" string, or plain text). Network failures and wholly ungrounded replies fall back to
/// render_summary; partially ungrounded replies keep their grounded sentences and append it.
LlmOutcome llm_summarize(const EvidenceBundle& b, const EndpointConfig& cfg,
                         const std::vector<SummaryTemplate>& templates = default_templates());

} // namespace cellmtl
