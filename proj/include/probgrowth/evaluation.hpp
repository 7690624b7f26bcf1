#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "probgrowth/datapipe.hpp"
#include "probgrowth/gaussian.hpp"
#include "probgrowth/model.hpp"

namespace probgrowth {

/// Binary mask as one byte per voxel (0/1).
struct Mask {
  Extent extent;
  std::vector<std::uint8_t> data;

  std::size_t count() const;
};

/// 2|a & b| / (|a| + |b|); two empty masks score 1. Throws ArgumentError on
/// incongruent shapes.
double dice(const Mask& a, const Mask& b);

Mask whole_tumor(const LabelMap& labels);
/// Argmax first (ties to the lowest class), then as above.
Mask whole_tumor(const SegmentationOutput& output);

// ---- Variants ---------------------------------------------------------------

/// ours: AB->C. upper: trained C->C, sees C. lower: trained B->B, evaluated B->C.
enum class Variant { kOurs = 0, kUpper = 1, kLower = 2 };
inline constexpr std::array<Variant, 3> kVariants{Variant::kOurs, Variant::kUpper,
                                                 Variant::kLower};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& text);
/// Mode the variant is trained with.
CaseMode training_mode(Variant v);
/// Mode the variant is evaluated with (inputs it sees, target is always C).
CaseMode evaluation_mode(Variant v);

/// Id of the AB->C triple starting at `first`: "<subject>_t<A>_t<B>_t<C>".
std::string triple_case_id(const std::string& subject_id, int first);

/// The evaluation case of `variant` for the AB->C triple starting at timepoint
/// `first` (A = first, B = first+1, C = first+2). Only the arrays the variant
/// may see are read. The case id is the AB->C id of the triple.
GrowthCase variant_case(const SubjectSeries& series, int first, Variant variant,
                        AccessLog* log = nullptr);

// ---- Metrics ------------------------------------------------------------------

struct QueryResult {
  double dice = 0.0;  // whole-tumour Dice of the chosen sample
  std::vector<int> k;
  std::vector<double> latent;
  std::size_t volume = 0;         // whole-tumour voxels of the chosen sample
  std::size_t target_volume = 0;
  double mean_dice = 0.0;         // Dice of the k = 0 (prior mean) sample
  std::size_t mean_volume = 0;
};

/// Decodes every grid latent of the prior and keeps the one whose whole-tumour
/// volume best matches `target_volume` (ties: smaller |k|^2, then
/// lexicographic k). Dice is measured against `target`.
QueryResult query_volume(const ProbUNet& model, const Tensor& inputs, std::size_t target_volume,
                         const LabelMap* target = nullptr);

/// Throws ConfigError if the case does not fit the model's input layout.
QueryResult query_volume_dice(const ProbUNet& model, const GrowthCase& c);

/// KL(posterior(inputs, target) || prior(inputs)) in nats.
double surprise(const ProbUNet& model, const GrowthCase& c);

// ---- Stratification -------------------------------------------------------------

enum class ChangeGroup { kLarge, kModerate, kSmall };
std::string to_string(ChangeGroup g);

struct ChangeGroups {
  double large_threshold = 0.0;  // largest Dice(B,C) inside the large group
  double mean_change = 0.0;      // mean Dice(B,C) over all cases
  std::map<std::string, ChangeGroup> membership;
  std::map<std::string, double> change;  // case_id -> Dice(B,C)
  std::size_t n_large = 0;
  std::size_t n_moderate = 0;
  std::size_t n_small = 0;
  /// Set when the moderate group is empty.
  bool degenerate = false;
  std::string source;  // dataset the thresholds were computed on

  ChangeGroup group_of(const std::string& case_id) const;
};

/// Large = lowest floor(n/10) Dice values (ties ordered by case id), moderate =
/// strictly below the mean and not large. Throws StatisticsError for n < 10.
ChangeGroups stratify_values(const std::map<std::string, double>& change);

/// Dice(whole_tumor(B), whole_tumor(C)) for every AB->C triple of the series.
std::map<std::string, double> change_values(const std::vector<SubjectSeries>& subjects,
                                            AccessLog* log = nullptr);

ChangeGroups stratify(const std::vector<SubjectSeries>& subjects, AccessLog* log = nullptr);

nlohmann::json to_json(const ChangeGroups& g);

// ---- Statistics -------------------------------------------------------------------

/// Two-sided Wilcoxon rank-sum p value. Exact enumeration of rank assignments
/// when |x| + |y| <= 12, otherwise normal approximation with tie and continuity
/// correction. Throws StatisticsError when either sample has fewer than 3 values.
double wilcoxon_rank_sum(const std::vector<double>& x, const std::vector<double>& y);
double wilcoxon_rank_sum_exact(const std::vector<double>& x, const std::vector<double>& y);
double wilcoxon_rank_sum_normal(const std::vector<double>& x, const std::vector<double>& y);

inline constexpr std::size_t kExactRankSumLimit = 12;

double median(std::vector<double> values);

// ---- Records ------------------------------------------------------------------------

inline constexpr const char* kMetricQueryVolumeDice = "query_volume_dice";
inline constexpr const char* kMetricSurprise = "surprise";
inline constexpr const char* kMetricMeanDice = "mean_dice";

struct EvaluationRecord {
  std::string case_id;
  Variant variant = Variant::kOurs;
  std::string metric;
  double value = 0.0;
  int fold = 0;
  ChangeGroup group = ChangeGroup::kSmall;

  bool operator==(const EvaluationRecord&) const = default;
};

/// Per case and variant details that do not go into the record table.
struct CaseDiagnostics {
  std::string case_id;
  Variant variant = Variant::kOurs;
  int fold = 0;
  QueryResult query;
  double surprise = 0.0;
};

using VariantModels = std::map<Variant, const ProbUNet*>;

/// Evaluates every AB->C triple of `test_subjects` with all three variants on
/// full-size inputs. Records are ordered by case id, variant, metric. `logs`
/// (optional) receives the arrays each variant touched.
std::vector<EvaluationRecord> evaluate_fold(const VariantModels& models,
                                            const std::vector<SubjectSeries>& test_subjects,
                                            int fold, const ChangeGroups& groups,
                                            std::array<AccessLog, 3>* logs = nullptr,
                                            std::vector<CaseDiagnostics>* diagnostics = nullptr);

void write_records_csv(const std::filesystem::path& path,
                       const std::vector<EvaluationRecord>& records);
std::vector<EvaluationRecord> read_records_csv(const std::filesystem::path& path);

}  // namespace probgrowth
