#include "spadapt/benchmark.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace spadapt {
namespace fs = std::filesystem;

namespace {

constexpr const char* kSuiteFile = "suite.json";
constexpr const char* kRecordsDir = "records";

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string pretrain_file(const SuiteConfig& suite) {
  return "pretrain-" + config_hash(*suite.pretrain) + ".ckpt";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::optional<MetricsRecord> load_record(const fs::path& path, const std::string& hash) {
  if (!fs::exists(path)) return std::nullopt;
  try {
    auto rec = MetricsRecord::from_json(load_json(path));
    if (rec.config_hash != hash) return std::nullopt;
    return rec;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void build_tables(BenchmarkReport& report) {
  std::vector<std::string> rows, cols;
  auto note = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  std::map<std::pair<std::string, std::string>, std::vector<double>> acc;
  std::ostringstream csv;
  csv << "row,column,seed,config_hash,status,final_accuracy\n";
  for (const auto& r : report.results) {
    note(rows, r.cell.row);
    note(cols, r.cell.column);
    auto& bucket = acc[{r.cell.row, r.cell.column}];
    csv << r.cell.row << ',' << r.cell.column << ',' << r.seed << ',' << r.config_hash << ',';
    if (r.record) {
      bucket.push_back(r.record->final_accuracy);
      csv << "ok," << fmt("%.4f", r.record->final_accuracy) << '\n';
    } else {
      csv << "failed,\n";
    }
  }
  report.csv = csv.str();

  report.summary.clear();
  for (const auto& row : rows) {
    for (const auto& col : cols) {
      auto it = acc.find({row, col});
      if (it == acc.end() || it->second.empty()) continue;
      const auto& v = it->second;
      CellSummary s{row, col, v.size(), 0.0, 0.0};
      for (double x : v) s.mean += x;
      s.mean /= static_cast<double>(v.size());
      if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
      }
      report.summary.push_back(s);
    }
  }

  std::ostringstream md;
  md << "| |";
  for (const auto& c : cols) md << ' ' << c << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) md << "---|";
  md << '\n';
  for (const auto& row : rows) {
    double best = -1.0;
    for (const auto& col : cols) {
      if (const auto* s = report.find(row, col)) best = std::max(best, s->mean);
    }
    md << "| " << row << " |";
    for (const auto& col : cols) {
      const auto* s = report.find(row, col);
      if (!s) {
        md << " n/a |";
        continue;
      }
      const std::string cell = fmt("%.1f", s->mean) + " ± " + fmt("%.1f", s->stddev);
      md << ' ' << (s->mean == best ? "**" + cell + "**" : cell) << " |";
    }
    md << '\n';
  }
  md << "\nAccuracy (%), mean ± sample std over seeds; best per row in bold.\n";
  if (!report.failures.empty()) {
    md << "\nFailed cells:\n";
    for (const auto& f : report.failures) md << "- " << f << '\n';
  }
  report.markdown = md.str();
}

std::string describe(const CellResult& r) {
  return r.cell.row + " / " + r.cell.column + " / seed " + std::to_string(r.seed);
}

}  // namespace

const CellSummary* BenchmarkReport::find(const std::string& row, const std::string& column) const {
  for (const auto& s : summary) {
    if (s.row == row && s.column == column) return &s;
  }
  return nullptr;
}

nlohmann::json SuiteConfig::to_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const auto& c : cells) {
    cells_json.push_back({{"row", c.row}, {"column", c.column}, {"overrides", c.overrides}});
  }
  nlohmann::json j{{"name", name}, {"base", base.to_json()}, {"cells", cells_json}, {"seeds", seeds}};
  j["pretrain"] = pretrain ? pretrain->to_json() : nlohmann::json(nullptr);
  return j;
}

SuiteConfig SuiteConfig::from_json(const nlohmann::json& j) {
  SuiteConfig s;
  s.name = j.value("name", s.name);
  s.base = ExperimentConfig::from_json(j.at("base"));
  if (j.contains("pretrain") && !j.at("pretrain").is_null()) {
    s.pretrain = ExperimentConfig::from_json(j.at("pretrain"));
  }
  for (const auto& c : j.at("cells")) {
    s.cells.push_back({c.at("row").get<std::string>(), c.at("column").get<std::string>(),
                       c.value("overrides", nlohmann::json::object())});
  }
  s.seeds = j.value("seeds", s.seeds);
  return s;
}

ExperimentConfig cell_config(const SuiteConfig& suite, const SuiteCell& cell, std::uint64_t seed) {
  nlohmann::json j = suite.base.to_json();
  j.merge_patch(cell.overrides);
  j["seed"] = seed;
  ExperimentConfig cfg = ExperimentConfig::from_json(j);
  if (cfg.mode == RunMode::finetune && cfg.pretrained.empty() && suite.pretrain) {
    cfg.pretrained = pretrain_file(suite);
  }
  if (cfg.mode != RunMode::finetune) cfg.pretrained.clear();
  return cfg;
}

BenchmarkReport run_benchmark(const SuiteConfig& suite, const fs::path& out_dir,
                              const ProgressFn& progress) {
  fs::create_directories(out_dir / kRecordsDir);
  save_json(out_dir / kSuiteFile, suite.to_json());

  std::optional<Checkpoint> suite_ckpt;
  if (suite.pretrain) {
    const fs::path ckpt_path = out_dir / pretrain_file(suite);
    if (fs::exists(ckpt_path)) {
      suite_ckpt = load_checkpoint(ckpt_path);
    } else {
      if (progress) progress("pretraining shared backbone");
      auto pre = spadapt::pretrain(*suite.pretrain);
      save_checkpoint(ckpt_path, pre.checkpoint);
      save_json(out_dir / kRecordsDir / (pre.metrics.config_hash + ".json"), pre.metrics.to_json());
      suite_ckpt = std::move(pre.checkpoint);
    }
  }

  std::map<std::string, Checkpoint> explicit_ckpts;
  BenchmarkReport report;
  for (const auto& cell : suite.cells) {
    for (auto seed : suite.seeds) {
      CellResult r;
      r.cell = cell;
      r.seed = seed;
      try {
        const ExperimentConfig cfg = cell_config(suite, cell, seed);
        r.config_hash = config_hash(cfg);
        const fs::path rec_path = out_dir / kRecordsDir / (r.config_hash + ".json");
        if (auto prev = load_record(rec_path, r.config_hash)) {
          r.record = std::move(prev);
          r.reused = true;
        } else {
          if (progress) progress("running " + describe(r) + " [" + r.config_hash + "]");
          const Checkpoint* ckpt = nullptr;
          if (cfg.mode == RunMode::finetune) {
            if (suite.pretrain && cfg.pretrained == pretrain_file(suite)) {
              ckpt = &*suite_ckpt;
            } else {
              auto it = explicit_ckpts.find(cfg.pretrained);
              if (it == explicit_ckpts.end()) {
                it = explicit_ckpts.emplace(cfg.pretrained, load_checkpoint(cfg.pretrained)).first;
              }
              ckpt = &it->second;
            }
          }
          MetricsRecord rec = run_experiment(cfg, ckpt);
          save_json(rec_path, rec.to_json());
          r.record = std::move(rec);
        }
      } catch (const std::exception& e) {
        r.error = e.what();
        report.failures.push_back(describe(r) + ": " + r.error);
        if (progress) progress("FAILED " + describe(r) + ": " + r.error);
      }
      report.results.push_back(std::move(r));
    }
  }
  build_tables(report);
  write_text(out_dir / "results.csv", report.csv);
  write_text(out_dir / "results.md", report.markdown);
  return report;
}

BenchmarkReport load_report(const fs::path& out_dir) {
  const SuiteConfig suite = SuiteConfig::from_json(load_json(out_dir / kSuiteFile));
  BenchmarkReport report;
  for (const auto& cell : suite.cells) {
    for (auto seed : suite.seeds) {
      CellResult r;
      r.cell = cell;
      r.seed = seed;
      r.config_hash = config_hash(cell_config(suite, cell, seed));
      r.record = load_record(out_dir / kRecordsDir / (r.config_hash + ".json"), r.config_hash);
      r.reused = r.record.has_value();
      if (!r.record) {
        r.error = "no record";
        report.failures.push_back(describe(r) + ": no record");
      }
      report.results.push_back(std::move(r));
    }
  }
  build_tables(report);
  return report;
}

// ---------------------------------------------------------------------------

namespace {

struct NamedOrder {
  const char* name;
  std::array<std::size_t, 3> perm;
};

constexpr NamedOrder kOrders[6] = {
    {"RGB", {0, 1, 2}}, {"RBG", {0, 2, 1}}, {"GRB", {1, 0, 2}},
    {"BGR", {2, 1, 0}}, {"GBR", {1, 2, 0}}, {"BRG", {2, 0, 1}},
};

std::string perm_transform(const std::array<std::size_t, 3>& p) {
  return "permute:" + std::to_string(p[0]) + "," + std::to_string(p[1]) + "," +
         std::to_string(p[2]);
}

}  // namespace

SuiteConfig degradation_suite(const ExperimentConfig& base, std::vector<std::uint64_t> seeds) {
  SuiteConfig s;
  s.name = "degradation";
  s.base = base;
  s.base.mode = RunMode::finetune;
  s.base.adaptor = AdaptorSpec{.kind = AdaptorKind::identity, .k_in = 0};
  s.base.num_views = 1;
  s.seeds = std::move(seeds);
  const auto& t0 = base.dataset.transforms;
  auto with = [&](const std::string& extra) {
    auto t = t0;
    t.push_back(extra);
    return nlohmann::json{{"dataset", {{"transforms", t}}}};
  };
  const std::string row = "degradation";
  // The identity order is the plain fine-tune config, unchanged.
  s.cells.push_back({row, kOrders[0].name, nlohmann::json::object()});
  for (std::size_t i = 1; i < 6; ++i) {
    s.cells.push_back({row, kOrders[i].name, with(perm_transform(kOrders[i].perm))});
  }
  s.cells.push_back({row, "grayscale", with("grayscale")});
  s.cells.push_back({row, "lowres", with("lowres:4")});
  return s;
}

DegradationReport summarize_degradation(BenchmarkReport bench) {
  DegradationReport d;
  const std::string row = "degradation";
  auto mean_of = [&](const std::string& col) {
    const auto* s = bench.find(row, col);
    return s ? s->mean : std::nan("");
  };
  auto cell_text = [&](const std::string& col) {
    const auto* s = bench.find(row, col);
    if (!s) return std::string("n/a");
    return fmt("%.1f", s->mean) + " ± " + fmt("%.1f", s->stddev);
  };
  double perm_sum = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double m = mean_of(kOrders[i].name);
    d.permutations.emplace_back(kOrders[i].name, m);
    if (i > 0) perm_sum += m;
  }
  d.identity = d.permutations[0].second;
  d.permuted_mean = perm_sum / 5.0;
  d.grayscale = mean_of("grayscale");
  d.low_resolution = mean_of("lowres");

  auto drop = [&](double x) {
    return fmt("%.1f", x) + " (" + fmt("%+.1f", 100.0 * (x - d.identity) / d.identity) + "%)";
  };
  std::ostringstream md;
  md << "Channel order (accuracy %, mean ± std over seeds)\n\n| |";
  for (const auto& o : kOrders) md << ' ' << o.name << " |";
  md << "\n|---|---|---|---|---|---|---|\n| toy |";
  for (const auto& o : kOrders) md << ' ' << cell_text(o.name) << " |";
  md << "\n\nDegradations (accuracy %, relative change vs. RGB)\n\n"
     << "| | RGB | permuted (mean) | grayscale | low resolution |\n"
     << "|---|---|---|---|---|\n"
     << "| toy | " << fmt("%.1f", d.identity) << " | " << drop(d.permuted_mean) << " | "
     << drop(d.grayscale) << " | " << drop(d.low_resolution) << " |\n";
  if (!bench.failures.empty()) {
    md << "\nFailed cells:\n";
    for (const auto& f : bench.failures) md << "- " << f << '\n';
  }
  d.markdown = md.str();
  d.bench = std::move(bench);
  return d;
}

DegradationReport degradation_study(const ExperimentConfig& base, std::vector<std::uint64_t> seeds,
                                    const fs::path& out_dir, const ProgressFn& progress) {
  SuiteConfig suite = degradation_suite(base, std::move(seeds));
  return summarize_degradation(run_benchmark(suite, out_dir, progress));
}

}  // namespace spadapt
