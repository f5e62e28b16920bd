#pragma once

#include <memory>

#include "provmesh/store.hpp"

namespace provmesh {

struct UnknownCampaign : std::runtime_error {
  explicit UnknownCampaign(const std::string& id)
      : std::runtime_error("unknown campaign '" + id + "'") {}
};
struct MetricAbsent : std::runtime_error {
  explicit MetricAbsent(const std::string& path)
      : std::runtime_error("metric '" + path + "' present on no task") {}
};

// ---------------------------------------------------------------------------
// Lineage report: the K extremal tasks by a metric, each with its backward
// chain grouped per workflow, telemetry, elapsed time, environment, and user.
// ---------------------------------------------------------------------------

struct LineageReportEntry {
  std::string task_id;
  double metric_value = 0.0;
  Json model_task;  // full record document of the selected task
  // Upstream chain grouped per workflow (declared campaign order when known).
  // Each element: {"workflow_id": ..., "tasks": [task summary...]}.
  Json chain = Json::array();
};

struct LineageReport {
  std::string campaign_id;
  std::size_t k = 0;
  std::string metric;
  bool minimize = true;
  std::vector<LineageReportEntry> entries;  // sorted ascending by metric
  Json to_json() const;
};

// ---------------------------------------------------------------------------
// Correlation matrix: Pearson r between used.* fields and target fields
// (generated.*, telemetry paths, or the "elapsed" pseudo-field). A cell is
// absent when either column is constant or fewer than 3 paired samples exist.
// ---------------------------------------------------------------------------

struct CorrelationMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<std::optional<double>>> r;
  std::vector<std::vector<std::size_t>> n;
  Json to_json() const;
};

// Two-pass Pearson estimator; nullopt when n < 3 or either side is constant.
std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y);

class QueryService {
 public:
  explicit QueryService(const TaskStore& store) : store_(store) {}

  QueryResult query(const QuerySpec& spec) const { return store_.query(spec); }

  LineageReport lineage_report(const std::string& campaign_id, std::size_t k,
                               const std::string& metric_path, bool minimize = true,
                               std::size_t max_depth = 16) const;

  CorrelationMatrix correlation_matrix(const std::string& campaign_id,
                                       const std::vector<std::string>& used_fields,
                                       const std::vector<std::string>& target_fields) const;

 private:
  void require_campaign(const std::string& campaign_id) const;
  const TaskStore& store_;
};

// ---------------------------------------------------------------------------
// HTTP API
//   POST /query                              body: QuerySpec JSON
//   GET  /task/{id}
//   GET  /campaign/{id}/lineage?k=&metric=&minimize=
//   GET  /campaign/{id}/correlation?used=a,b&targets=x,y
// ---------------------------------------------------------------------------

class HttpApi {
 public:
  HttpApi(const TaskStore& store, std::string host, int port);  // port 0: ephemeral
  ~HttpApi();
  void start();  // returns once the server is accepting connections
  void stop();
  int port() const { return port_; }
  const std::string& host() const { return host_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string host_;
  int port_;
};

}  // namespace provmesh
