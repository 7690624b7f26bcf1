#include "probgrowth/evaluation.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "probgrowth/error.hpp"
#include "probgrowth/training.hpp"

namespace probgrowth {

using nlohmann::json;

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

double dice(const Mask& a, const Mask& b) {
  if (a.extent != b.extent || a.data.size() != b.data.size()) {
    throw ArgumentError("dice: shapes differ (" + a.extent.str() + " vs " + b.extent.str() + ")");
  }
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    na += a.data[i];
    nb += b.data[i];
    both += a.data[i] & b.data[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

Mask whole_tumor(const LabelMap& labels) {
  Mask m{labels.extent, std::vector<std::uint8_t>(labels.data.size())};
  for (std::size_t i = 0; i < labels.data.size(); ++i) m.data[i] = labels.data[i] != 0;
  return m;
}

Mask whole_tumor(const SegmentationOutput& output) { return whole_tumor(output.argmax()); }

// ---- Variants ---------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kOurs: return "ours";
    case Variant::kUpper: return "upper";
    case Variant::kLower: return "lower";
  }
  return "?";
}

Variant variant_from_string(const std::string& text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "ours") return Variant::kOurs;
  if (t == "upper") return Variant::kUpper;
  if (t == "lower") return Variant::kLower;
  throw ArgumentError("unknown variant '" + text + "' (expected ours, upper or lower)");
}

CaseMode training_mode(Variant v) {
  switch (v) {
    case Variant::kOurs: return CaseMode::kABtoC;
    case Variant::kUpper: return CaseMode::kCtoC;
    case Variant::kLower: return CaseMode::kBtoB;
  }
  return CaseMode::kABtoC;
}

CaseMode evaluation_mode(Variant v) {
  switch (v) {
    case Variant::kOurs: return CaseMode::kABtoC;
    case Variant::kUpper: return CaseMode::kCtoC;
    case Variant::kLower: return CaseMode::kBtoC;
  }
  return CaseMode::kABtoC;
}

std::string triple_case_id(const std::string& subject, int first) {
  return subject + "_t" + std::to_string(first) + "_t" + std::to_string(first + 1) + "_t" +
         std::to_string(first + 2);
}

GrowthCase variant_case(const SubjectSeries& series, int first, Variant variant, AccessLog* log) {
  const int n = static_cast<int>(series.timepoints.size());
  if (first < 0 || first + 2 >= n) {
    throw ArgumentError(series.subject_id + ": no AB->C triple starting at t" +
                        std::to_string(first));
  }
  GrowthCase c;
  c.case_id = triple_case_id(series.subject_id, first);
  c.subject_id = series.subject_id;
  c.mode = evaluation_mode(variant);
  switch (variant) {
    case Variant::kOurs: c.input_timepoints = {first, first + 1}; break;
    case Variant::kUpper: c.input_timepoints = {first + 2}; break;
    case Variant::kLower: c.input_timepoints = {first + 1}; break;
  }
  for (int t : c.input_timepoints) {
    if (log) log->record(series.subject_id, t, AccessLog::Kind::kImage);
    c.inputs.push_back(zscore_normalize(series.timepoints[t].image));
  }
  c.target_timepoint = first + 2;
  if (log) log->record(series.subject_id, first + 2, AccessLog::Kind::kLabel);
  c.target = series.timepoints[first + 2].labels;
  return c;
}

// ---- Metrics ------------------------------------------------------------------

QueryResult query_volume(const ProbUNet& model, const Tensor& inputs, std::size_t target_volume,
                         const LabelMap* target) {
  const DiagonalGaussian prior = model.prior_encode(inputs);
  const std::vector<GridLatent> grid = grid_latents(prior);
  const LatentDecoder decoder(model, inputs);

  const int n = static_cast<int>(grid.size());
  std::vector<std::size_t> volumes(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    volumes[i] = decoder.decode_labels(grid[i].z).tumor_volume();
  }

  auto err = [&](int i) {
    return volumes[i] > target_volume ? volumes[i] - target_volume : target_volume - volumes[i];
  };
  auto norm2 = [&](int i) {
    int s = 0;
    for (int v : grid[i].k) s += v * v;
    return s;
  };
  // Total order, so the choice does not depend on evaluation order.
  int best = 0;
  int centre = -1;
  for (int i = 0; i < n; ++i) {
    if (norm2(i) == 0) centre = i;
    if (i == 0) continue;
    const auto ei = err(i), eb = err(best);
    if (ei != eb) {
      if (ei < eb) best = i;
      continue;
    }
    if (norm2(i) != norm2(best)) {
      if (norm2(i) < norm2(best)) best = i;
      continue;
    }
    if (grid[i].k < grid[best].k) best = i;
  }

  QueryResult r;
  r.k = grid[best].k;
  r.latent = grid[best].z;
  r.volume = volumes[best];
  r.target_volume = target_volume;
  r.mean_volume = volumes[centre];
  if (target) {
    const Mask gt = whole_tumor(*target);
    r.dice = dice(whole_tumor(decoder.decode_labels(grid[best].z)), gt);
    r.mean_dice = dice(whole_tumor(decoder.decode_labels(grid[centre].z)), gt);
  }
  return r;
}

namespace {

Tensor checked_inputs(const ProbUNet& model, const GrowthCase& c) {
  const NetworkConfig& cfg = model.config();
  if (static_cast<int>(c.inputs.size()) != cfg.n_input_timepoints) {
    throw ConfigError("case " + c.case_id + " (" + to_string(c.mode) + ") has " +
                      std::to_string(c.inputs.size()) + " input timepoints, checkpoint expects " +
                      std::to_string(cfg.n_input_timepoints));
  }
  for (const auto& v : c.inputs) {
    if (v.contrasts() != cfg.n_contrasts) {
      throw ConfigError("case " + c.case_id + " has " + std::to_string(v.contrasts()) +
                        " contrasts, checkpoint expects " + std::to_string(cfg.n_contrasts));
    }
  }
  if (c.target.extent.spatial_dims() != cfg.spatial_dims) {
    throw ConfigError("case " + c.case_id + " is " + std::to_string(c.target.extent.spatial_dims()) +
                      "-D, checkpoint is " + std::to_string(cfg.spatial_dims) + "-D");
  }
  return stack_inputs(c.inputs);
}

}  // namespace

QueryResult query_volume_dice(const ProbUNet& model, const GrowthCase& c) {
  const Tensor inputs = checked_inputs(model, c);
  return query_volume(model, inputs, c.target.tumor_volume(), &c.target);
}

double surprise(const ProbUNet& model, const GrowthCase& c) {
  const Tensor inputs = checked_inputs(model, c);
  return kl_diag_gaussians(model.posterior_encode(inputs, c.target), model.prior_encode(inputs));
}

// ---- Stratification -------------------------------------------------------------

std::string to_string(ChangeGroup g) {
  switch (g) {
    case ChangeGroup::kLarge: return "large";
    case ChangeGroup::kModerate: return "moderate";
    case ChangeGroup::kSmall: return "small";
  }
  return "?";
}

namespace {

ChangeGroup change_group_from_string(const std::string& s) {
  if (s == "large") return ChangeGroup::kLarge;
  if (s == "moderate") return ChangeGroup::kModerate;
  if (s == "small") return ChangeGroup::kSmall;
  throw DataError("unknown change group '" + s + "'");
}

}  // namespace

ChangeGroup ChangeGroups::group_of(const std::string& case_id) const {
  auto it = membership.find(case_id);
  if (it == membership.end()) throw LookupError("case '" + case_id + "' was not stratified");
  return it->second;
}

ChangeGroups stratify_values(const std::map<std::string, double>& change) {
  const std::size_t n = change.size();
  if (n < 10) {
    throw StatisticsError("stratify needs at least 10 cases for a decile, got " +
                          std::to_string(n));
  }
  std::vector<std::pair<double, std::string>> sorted;
  sorted.reserve(n);
  double sum = 0.0;
  for (const auto& [id, d] : change) {
    sorted.emplace_back(d, id);
    sum += d;
  }
  std::sort(sorted.begin(), sorted.end());

  ChangeGroups g;
  g.change = change;
  g.mean_change = sum / static_cast<double>(n);
  const std::size_t n_large = n / 10;
  g.large_threshold = sorted[n_large - 1].first;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [d, id] = sorted[i];
    ChangeGroup grp = ChangeGroup::kSmall;
    if (i < n_large) {
      grp = ChangeGroup::kLarge;
      ++g.n_large;
    } else if (d < g.mean_change) {
      grp = ChangeGroup::kModerate;
      ++g.n_moderate;
    } else {
      ++g.n_small;
    }
    g.membership[id] = grp;
  }
  g.degenerate = g.n_moderate == 0;
  return g;
}

std::map<std::string, double> change_values(const std::vector<SubjectSeries>& subjects,
                                            AccessLog* log) {
  std::map<std::string, double> out;
  for (const auto& s : subjects) {
    const int n = static_cast<int>(s.timepoints.size());
    for (int t = 0; t + 2 < n; ++t) {
      if (log) {
        log->record(s.subject_id, t + 1, AccessLog::Kind::kLabel);
        log->record(s.subject_id, t + 2, AccessLog::Kind::kLabel);
      }
      out[triple_case_id(s.subject_id, t)] =
          dice(whole_tumor(s.timepoints[t + 1].labels), whole_tumor(s.timepoints[t + 2].labels));
    }
  }
  return out;
}

ChangeGroups stratify(const std::vector<SubjectSeries>& subjects, AccessLog* log) {
  return stratify_values(change_values(subjects, log));
}

json to_json(const ChangeGroups& g) {
  return {{"large_threshold", g.large_threshold},
          {"mean_change", g.mean_change},
          {"n_large", g.n_large},
          {"n_moderate", g.n_moderate},
          {"n_small", g.n_small},
          {"n_cases", g.membership.size()},
          {"degenerate", g.degenerate},
          {"source", g.source}};
}

// ---- Statistics -------------------------------------------------------------------

namespace {

void check_samples(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 3 || y.size() < 3) {
    throw StatisticsError("rank-sum test needs at least 3 values per sample, got " +
                          std::to_string(x.size()) + " and " + std::to_string(y.size()));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw StatisticsError("rank-sum test: non-finite value in x");
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw StatisticsError("rank-sum test: non-finite value in y");
  }
}

// Midranks of the pooled sample; x occupies the first |x| entries.
std::vector<double> pooled_ranks(const std::vector<double>& x, const std::vector<double>& y,
                                 double* tie_term) {
  std::vector<double> pooled(x);
  pooled.insert(pooled.end(), y.begin(), y.end());
  const std::size_t n = pooled.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
  std::vector<double> ranks(n);
  double ties = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    const double t = static_cast<double>(j - i + 1);
    ties += t * t * t - t;
    i = j + 1;
  }
  if (tie_term) *tie_term = ties;
  return ranks;
}

}  // namespace

double wilcoxon_rank_sum_exact(const std::vector<double>& x, const std::vector<double>& y) {
  check_samples(x, y);
  const std::vector<double> ranks = pooled_ranks(x, y, nullptr);
  const std::size_t n = ranks.size(), n1 = x.size();
  if (n > 20) throw StatisticsError("exact rank-sum enumeration limited to 20 values");
  const double expected = static_cast<double>(n1) * static_cast<double>(n + 1) / 2.0;
  double observed = 0.0;
  for (std::size_t i = 0; i < n1; ++i) observed += ranks[i];
  const double dev = std::abs(observed - expected);

  std::uint64_t total = 0, extreme = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != n1) continue;
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) w += ranks[i];
    }
    ++total;
    if (std::abs(w - expected) >= dev - 1e-9) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(total);
}

double wilcoxon_rank_sum_normal(const std::vector<double>& x, const std::vector<double>& y) {
  check_samples(x, y);
  double ties = 0.0;
  const std::vector<double> ranks = pooled_ranks(x, y, &ties);
  const double n1 = static_cast<double>(x.size()), n2 = static_cast<double>(y.size());
  const double n = n1 + n2;
  double w = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) w += ranks[i];
  const double expected = n1 * (n + 1.0) / 2.0;
  const double variance = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
  if (variance <= 0.0) return 1.0;
  const double dev = std::max(0.0, std::abs(w - expected) - 0.5);
  const double z = dev / std::sqrt(variance);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

double wilcoxon_rank_sum(const std::vector<double>& x, const std::vector<double>& y) {
  check_samples(x, y);
  if (x.size() + y.size() <= kExactRankSumLimit) return wilcoxon_rank_sum_exact(x, y);
  return wilcoxon_rank_sum_normal(x, y);
}

double median(std::vector<double> values) {
  if (values.empty()) throw StatisticsError("median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// ---- Records ------------------------------------------------------------------------

std::vector<EvaluationRecord> evaluate_fold(const VariantModels& models,
                                            const std::vector<SubjectSeries>& test_subjects,
                                            int fold, const ChangeGroups& groups,
                                            std::array<AccessLog, 3>* logs,
                                            std::vector<CaseDiagnostics>* diagnostics) {
  for (Variant v : kVariants) {
    auto it = models.find(v);
    if (it == models.end() || it->second == nullptr) {
      throw ConfigError("fold " + std::to_string(fold) + ": no checkpoint for variant " +
                        to_string(v));
    }
    const int expected = input_timepoint_count(evaluation_mode(v));
    if (it->second->config().n_input_timepoints != expected) {
      throw ConfigError("fold " + std::to_string(fold) + ": checkpoint for variant " +
                        to_string(v) + " takes " +
                        std::to_string(it->second->config().n_input_timepoints) +
                        " timepoints, the variant needs " + std::to_string(expected));
    }
  }

  std::vector<EvaluationRecord> records;
  std::vector<std::pair<const SubjectSeries*, int>> triples;
  for (const auto& s : test_subjects) {
    for (int t = 0; t + 2 < static_cast<int>(s.timepoints.size()); ++t) triples.emplace_back(&s, t);
  }
  std::sort(triples.begin(), triples.end(), [](const auto& a, const auto& b) {
    return triple_case_id(a.first->subject_id, a.second) < triple_case_id(b.first->subject_id, b.second);
  });

  for (const auto& [series, first] : triples) {
    for (Variant v : kVariants) {
      AccessLog* log = logs ? &(*logs)[static_cast<int>(v)] : nullptr;
      const GrowthCase c = variant_case(*series, first, v, log);
      const ProbUNet& model = *models.at(v);
      const QueryResult q = query_volume_dice(model, c);
      const double s = surprise(model, c);
      const ChangeGroup g = groups.group_of(c.case_id);
      records.push_back({c.case_id, v, kMetricQueryVolumeDice, q.dice, fold, g});
      records.push_back({c.case_id, v, kMetricSurprise, s, fold, g});
      if (diagnostics) diagnostics->push_back({c.case_id, v, fold, q, s});
    }
  }
  return records;
}

void write_records_csv(const std::filesystem::path& path,
                       const std::vector<EvaluationRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "case_id,variant,metric,value,fold,group\n";
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << r.case_id << ',' << to_string(r.variant) << ',' << r.metric << ',' << buf << ','
        << r.fold << ',' << to_string(r.group) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<EvaluationRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "case_id,variant,metric,value,fold,group") {
    throw DataError(path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<EvaluationRecord> records;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    }
    try {
      records.push_back({f[0], variant_from_string(f[1]), f[2], std::stod(f[3]), std::stoi(f[4]),
                         change_group_from_string(f[5])});
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed record");
    } catch (const ArgumentError&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed record");
    }
  }
  return records;
}

}  // namespace probgrowth
