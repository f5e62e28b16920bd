// provmesh command-line interface.
//
// Subcommands: serve, query, lineage, corr, bench, ingest-demo. Output is
// JSON on stdout. Exit codes: 0 success, 1 user error, 2 internal error.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "provmesh/bench.hpp"
#include "provmesh/demo.hpp"
#include "provmesh/integrator.hpp"
#include "provmesh/service.hpp"
#include "provmesh/store.hpp"

namespace {

using provmesh::Json;

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

provmesh::Predicate::Op op_from_symbol(const std::string& sym) {
  using Op = provmesh::Predicate::Op;
  if (sym == "=" || sym == "==") return Op::Eq;
  if (sym == "!=") return Op::Ne;
  if (sym == ">") return Op::Gt;
  if (sym == ">=") return Op::Gte;
  if (sym == "<") return Op::Lt;
  if (sym == "<=") return Op::Lte;
  throw UserError("unknown filter operator '" + sym + "'");
}

// "path<op>value" with op in  =  ==  !=  >=  <=  >  < ; the value parses as
// JSON when possible and falls back to a plain string.
std::pair<std::string, provmesh::Predicate> parse_filter_expr(const std::string& expr) {
  static const char* kOps[] = {">=", "<=", "!=", "==", "=", ">", "<"};
  for (const char* op : kOps) {
    auto pos = expr.find(op);
    if (pos == std::string::npos || pos == 0) continue;
    std::string path = expr.substr(0, pos);
    std::string raw = expr.substr(pos + std::strlen(op));
    Json value = Json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    provmesh::Predicate pred;
    pred.op = op_from_symbol(op);
    pred.value = value;
    return {path, pred};
  }
  throw UserError("filter expression must look like path=value: '" + expr + "'");
}

provmesh::TaskStore open_store(const std::string& dir) {
  if (dir.empty()) throw UserError("--store is required");
  return provmesh::TaskStore::open(dir);
}

std::vector<std::string> csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto comma = s.find(',', pos);
    auto item = s.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"provmesh: runtime multi-workflow provenance and data observability"};
  app.require_subcommand(1);

  // --- serve -----------------------------------------------------------
  auto* serve = app.add_subcommand("serve", "Serve the HTTP query API over a store");
  std::string serve_store, serve_host = "127.0.0.1";
  int serve_port = 8077;
  serve->add_option("--store", serve_store, "Store directory")->required();
  serve->add_option("--host", serve_host, "Bind host");
  serve->add_option("--port", serve_port, "Bind port (0 = ephemeral)");

  // --- query -----------------------------------------------------------
  auto* query = app.add_subcommand("query", "Run a QuerySpec against a store");
  std::string query_store, query_spec_file, query_group_by;
  std::vector<std::string> query_filters, query_projection, query_sorts, query_aggs;
  std::int64_t query_limit = -1;
  query->add_option("--store", query_store, "Store directory")->required();
  query->add_option("--spec", query_spec_file, "QuerySpec JSON file ('-' for stdin)");
  query->add_option("--filter", query_filters, "Filter expression, e.g. campaign_id=c1");
  query->add_option("--project", query_projection, "Projection field path");
  query->add_option("--agg", query_aggs, "Aggregation op:path, e.g. min:generated.loss");
  query->add_option("--group-by", query_group_by, "Group-by field path");
  query->add_option("--sort", query_sorts, "Sort key path[:asc|desc]");
  query->add_option("--limit", query_limit, "Row limit");

  // --- lineage ---------------------------------------------------------
  auto* lineage = app.add_subcommand("lineage", "K-best lineage report for a campaign");
  std::string lin_store, lin_campaign, lin_metric;
  std::size_t lin_k = 3;
  bool lin_maximize = false;
  lineage->add_option("--store", lin_store, "Store directory")->required();
  lineage->add_option("--campaign", lin_campaign, "Campaign id")->required();
  lineage->add_option("-k,--k", lin_k, "Number of entries");
  lineage->add_option("--metric", lin_metric, "Metric field path, e.g. generated.mse")->required();
  lineage->add_flag("--maximize", lin_maximize, "Take the k largest instead of smallest");

  // --- corr ------------------------------------------------------------
  auto* corr = app.add_subcommand("corr", "Correlation matrix for a campaign");
  std::string corr_store, corr_campaign, corr_used, corr_targets;
  corr->add_option("--store", corr_store, "Store directory")->required();
  corr->add_option("--campaign", corr_campaign, "Campaign id")->required();
  corr->add_option("--used", corr_used, "Comma-separated used.* field paths")->required();
  corr->add_option("--targets", corr_targets, "Comma-separated target field paths")->required();

  // --- bench -----------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "Paired overhead benchmark");
  std::size_t bench_tasks = 1000;
  std::int64_t bench_duration_ms = 10;
  int bench_workers = 8, bench_reps = 5;
  std::string bench_mode = "both", bench_out, bench_scratch;
  bench->add_option("--tasks", bench_tasks, "Total tasks (two equal maps)");
  bench->add_option("--duration-ms", bench_duration_ms, "Per-task sleep duration");
  bench->add_option("--workers", bench_workers, "Worker threads");
  bench->add_option("--reps", bench_reps, "Minimum repetitions per arm");
  bench->add_option("--observability", bench_mode, "on|off|both")
      ->check(CLI::IsMember({"on", "off", "both"}));
  bench->add_option("--out", bench_out, "Write the results table to this file");
  bench->add_option("--scratch", bench_scratch, "Scratch directory for per-run stores");

  // --- ingest-demo -----------------------------------------------------
  auto* demo = app.add_subcommand("ingest-demo",
                                  "Run the three-workflow synthetic campaign end to end");
  std::string demo_store, demo_campaign = "demo_campaign";
  std::size_t demo_wf1 = 6, demo_wf2 = 12, demo_k = 3;
  std::uint64_t demo_seed = 7;
  demo->add_option("--store", demo_store, "Store directory (default: temp)");
  demo->add_option("--campaign", demo_campaign, "Campaign id");
  demo->add_option("--wf1-tasks", demo_wf1, "Workflow 1 task count");
  demo->add_option("--wf2-tasks", demo_wf2, "Workflow 2 task count");
  demo->add_option("-k", demo_k, "Lineage report size");
  demo->add_option("--seed", demo_seed, "Deterministic data seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*serve) {
      auto store = open_store(serve_store);
      provmesh::HttpApi api(store, serve_host, serve_port);
      api.start();
      std::cout << Json{{"listening", api.host() + ":" + std::to_string(api.port())},
                        {"store", serve_store}}
                       .dump()
                << std::endl;
      // Serve until interrupted.
      for (;;) std::this_thread::sleep_for(std::chrono::seconds(3600));
    }

    if (*query) {
      provmesh::QuerySpec spec;
      if (!query_spec_file.empty()) {
        Json body;
        if (query_spec_file == "-") {
          body = Json::parse(std::cin, nullptr, false);
        } else {
          std::ifstream f(query_spec_file);
          if (!f) throw UserError("cannot open spec file '" + query_spec_file + "'");
          body = Json::parse(f, nullptr, false);
        }
        if (body.is_discarded()) throw UserError("spec file is not valid JSON");
        spec = provmesh::QuerySpec::from_json(body);
      }
      for (const auto& expr : query_filters) spec.filter.push_back(parse_filter_expr(expr));
      for (const auto& p : query_projection) spec.projection.push_back(p);
      for (const auto& a : query_aggs) {
        auto colon = a.find(':');
        if (colon == std::string::npos) throw UserError("aggregation must be op:path");
        Json arr = Json::array({a.substr(0, colon), a.substr(colon + 1)});
        Json one{{"aggregation", Json::array({arr})}};
        auto parsed = provmesh::QuerySpec::from_json(one);
        spec.aggregation.push_back(parsed.aggregation.front());
      }
      if (!query_group_by.empty()) spec.group_by = query_group_by;
      for (const auto& s : query_sorts) {
        auto colon = s.rfind(':');
        provmesh::SortKey key;
        if (colon != std::string::npos &&
            (s.substr(colon + 1) == "asc" || s.substr(colon + 1) == "desc")) {
          key.path = s.substr(0, colon);
          key.ascending = s.substr(colon + 1) == "asc";
        } else {
          key.path = s;
        }
        spec.sort.push_back(key);
      }
      if (query_limit >= 0) {
        if (query_limit == 0) throw provmesh::BadQuery("limit", "must be >= 1");
        spec.limit = static_cast<std::size_t>(query_limit);
      }
      auto store = open_store(query_store);
      auto result = store.query(spec);
      std::cout << Json{{"rows", result.rows}, {"warnings", result.warnings}}.dump(2) << std::endl;
      return 0;
    }

    if (*lineage) {
      auto store = open_store(lin_store);
      provmesh::QueryService service(store);
      auto report = service.lineage_report(lin_campaign, lin_k, lin_metric, !lin_maximize);
      std::cout << report.to_json().dump(2) << std::endl;
      return 0;
    }

    if (*corr) {
      auto store = open_store(corr_store);
      provmesh::QueryService service(store);
      auto matrix = service.correlation_matrix(corr_campaign, csv(corr_used), csv(corr_targets));
      std::cout << matrix.to_json().dump(2) << std::endl;
      return 0;
    }

    if (*bench) {
      provmesh::Workload workload;
      workload.total_tasks = bench_tasks;
      workload.task_duration = std::chrono::milliseconds(bench_duration_ms);
      workload.workers = bench_workers;
      workload.repetitions = bench_reps;
      provmesh::BenchOptions options;
      if (!bench_scratch.empty()) options.scratch_dir = bench_scratch;

      Json out;
      if (bench_mode == "both") {
        auto result = provmesh::run_benchmark(workload, options);
        out = provmesh::results_table({result});
      } else {
        bool on = bench_mode == "on";
        std::vector<double> times;
        std::vector<std::uint64_t> persisted;
        for (int i = 0; i < bench_reps; ++i) {
          std::uint64_t n = 0;
          times.push_back(provmesh::run_workflow_once(workload, on, options, &n));
          if (on) persisted.push_back(n);
        }
        out = Json{{"observability", bench_mode},
                   {"times_s", times},
                   {"median_s", provmesh::median_of(times)}};
        if (on) out["events_persisted"] = persisted;
      }
      std::cout << out.dump(2) << std::endl;
      if (!bench_out.empty()) {
        std::ofstream f(bench_out);
        f << out.dump(2) << '\n';
      }
      return 0;
    }

    if (*demo) {
      provmesh::DemoOptions options;
      if (!demo_store.empty()) options.store_dir = demo_store;
      options.campaign_id = demo_campaign;
      options.wf1_tasks = demo_wf1;
      options.wf2_tasks = demo_wf2;
      options.wf3_tasks = demo_wf2;
      options.report_k = demo_k;
      options.seed = demo_seed;
      auto result = provmesh::run_ingest_demo(options);
      std::cout << result.summary().dump(2) << std::endl;
      return 0;
    }
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const provmesh::BadQuery& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const provmesh::UnknownCampaign& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const provmesh::MetricAbsent& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const provmesh::UnknownTask& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
