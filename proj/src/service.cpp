#include "provmesh/service.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <httplib.h>

namespace provmesh {

// ---------------------------------------------------------------------------
// Pearson
// ---------------------------------------------------------------------------

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  std::size_t n = std::min(x.size(), y.size());
  if (n < 3) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double dx = x[i] - mx;
    double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;  // constant column
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

Json LineageReport::to_json() const {
  Json entries_j = Json::array();
  for (const auto& e : entries) {
    entries_j.push_back(Json{{"task_id", e.task_id},
                             {"metric_value", e.metric_value},
                             {"model_task", e.model_task},
                             {"chain", e.chain}});
  }
  return Json{{"campaign_id", campaign_id}, {"k", k},        {"metric", metric},
              {"minimize", minimize},       {"entries", entries_j}};
}

Json CorrelationMatrix::to_json() const {
  Json r_j = Json::array();
  Json n_j = Json::array();
  for (std::size_t i = 0; i < r.size(); ++i) {
    Json row = Json::array();
    Json row_n = Json::array();
    for (std::size_t j = 0; j < r[i].size(); ++j) {
      row.push_back(r[i][j] ? Json(*r[i][j]) : Json(nullptr));
      row_n.push_back(n[i][j]);
    }
    r_j.push_back(std::move(row));
    n_j.push_back(std::move(row_n));
  }
  return Json{{"row_labels", row_labels},
              {"col_labels", col_labels},
              {"r", std::move(r_j)},
              {"n", std::move(n_j)}};
}

// ---------------------------------------------------------------------------
// QueryService
// ---------------------------------------------------------------------------

void QueryService::require_campaign(const std::string& campaign_id) const {
  if (store_.campaign(campaign_id)) return;
  if (!store_.records_in_campaign(campaign_id).empty()) return;
  throw UnknownCampaign(campaign_id);
}

namespace {

std::optional<double> numeric_field(const TaskRecord& rec, const Json& doc,
                                    const std::string& path) {
  if (path == "elapsed") {
    if (!rec.started_at || !rec.ended_at) return std::nullopt;
    return static_cast<double>(*rec.ended_at - *rec.started_at) / 1e9;
  }
  const Json* v = resolve_path(doc, path);
  if (!v) return std::nullopt;
  if (v->is_boolean()) return v->get<bool>() ? 1.0 : 0.0;
  if (v->is_number()) return v->get<double>();
  return std::nullopt;
}

Json task_chain_summary(const TaskRecord& rec) {
  Json j{{"task_id", rec.task_id},
         {"workflow_id", rec.workflow_id},
         {"activity_id", rec.activity_id},
         {"status", std::string(to_string(rec.status))},
         {"used", rec.used},
         {"generated", rec.generated},
         {"environment", rec.environment},
         {"user", rec.user}};
  j["telemetry_at_start"] = rec.telemetry_at_start ? rec.telemetry_at_start->to_json() : Json(nullptr);
  j["telemetry_at_end"] = rec.telemetry_at_end ? rec.telemetry_at_end->to_json() : Json(nullptr);
  if (rec.started_at && rec.ended_at) {
    j["elapsed_s"] = static_cast<double>(*rec.ended_at - *rec.started_at) / 1e9;
  } else {
    j["elapsed_s"] = Json(nullptr);
  }
  return j;
}

}  // namespace

LineageReport QueryService::lineage_report(const std::string& campaign_id, std::size_t k,
                                           const std::string& metric_path, bool minimize,
                                           std::size_t max_depth) const {
  require_campaign(campaign_id);

  LineageReport report;
  report.campaign_id = campaign_id;
  report.k = k;
  report.metric = metric_path;
  report.minimize = minimize;

  auto records = store_.records_in_campaign(campaign_id);
  std::vector<std::pair<double, const TaskRecord*>> carriers;
  for (const auto& rec : records) {
    if (!is_terminal(rec.status)) continue;
    Json doc = rec.to_json();
    auto v = numeric_field(rec, doc, metric_path);
    if (v) carriers.emplace_back(*v, &rec);
  }
  if (carriers.empty()) throw MetricAbsent(metric_path);

  std::sort(carriers.begin(), carriers.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second->task_id < b.second->task_id;
  });
  std::vector<std::pair<double, const TaskRecord*>> selected;
  if (minimize) {
    for (std::size_t i = 0; i < carriers.size() && i < k; ++i) selected.push_back(carriers[i]);
  } else {
    std::size_t take = std::min(k, carriers.size());
    selected.assign(carriers.end() - static_cast<std::ptrdiff_t>(take), carriers.end());
  }
  // Entries are reported ascending by metric either way.

  auto cfg = store_.campaign(campaign_id);
  for (const auto& [value, rec] : selected) {
    LineageReportEntry entry;
    entry.task_id = rec->task_id;
    entry.metric_value = value;
    entry.model_task = rec->to_json();

    LineageGraph graph = store_.traverse_lineage(rec->task_id, LineageDirection::Backward, max_depth);
    // Group chain tasks per workflow, declared campaign order first.
    std::map<std::string, std::vector<const TaskRecord*>> per_workflow;
    for (const auto& node : graph.nodes) {
      if (node.task_id == rec->task_id) continue;
      per_workflow[node.workflow_id].push_back(&node);
    }
    std::vector<std::string> workflow_order;
    if (cfg) {
      for (const auto& wf : cfg->workflows) {
        if (per_workflow.count(wf)) workflow_order.push_back(wf);
      }
    }
    for (const auto& [wf, _] : per_workflow) {
      if (std::find(workflow_order.begin(), workflow_order.end(), wf) == workflow_order.end()) {
        workflow_order.push_back(wf);
      }
    }
    for (const auto& wf : workflow_order) {
      Json tasks = Json::array();
      auto nodes = per_workflow[wf];
      std::sort(nodes.begin(), nodes.end(),
                [](const TaskRecord* a, const TaskRecord* b) { return a->task_id < b->task_id; });
      for (const TaskRecord* node : nodes) tasks.push_back(task_chain_summary(*node));
      entry.chain.push_back(Json{{"workflow_id", wf}, {"tasks", std::move(tasks)}});
    }
    report.entries.push_back(std::move(entry));
  }
  std::sort(report.entries.begin(), report.entries.end(), [](const auto& a, const auto& b) {
    if (a.metric_value != b.metric_value) return a.metric_value < b.metric_value;
    return a.task_id < b.task_id;
  });
  return report;
}

CorrelationMatrix QueryService::correlation_matrix(
    const std::string& campaign_id, const std::vector<std::string>& used_fields,
    const std::vector<std::string>& target_fields) const {
  require_campaign(campaign_id);

  CorrelationMatrix matrix;
  matrix.row_labels = used_fields;
  matrix.col_labels = target_fields;

  auto records = store_.records_in_campaign(campaign_id);
  // Rows are tasks carrying every requested field; pairing order follows the
  // store's insertion order, keeping the matrix reproducible.
  std::vector<std::vector<double>> used_cols(used_fields.size());
  std::vector<std::vector<double>> target_cols(target_fields.size());
  for (const auto& rec : records) {
    Json doc = rec.to_json();
    std::vector<double> u, t;
    u.reserve(used_fields.size());
    t.reserve(target_fields.size());
    bool complete = true;
    for (const auto& f : used_fields) {
      auto v = numeric_field(rec, doc, f);
      if (!v) {
        complete = false;
        break;
      }
      u.push_back(*v);
    }
    if (complete) {
      for (const auto& f : target_fields) {
        auto v = numeric_field(rec, doc, f);
        if (!v) {
          complete = false;
          break;
        }
        t.push_back(*v);
      }
    }
    if (!complete) continue;
    for (std::size_t i = 0; i < u.size(); ++i) used_cols[i].push_back(u[i]);
    for (std::size_t j = 0; j < t.size(); ++j) target_cols[j].push_back(t[j]);
  }

  std::size_t n_rows = used_fields.size();
  std::size_t n_cols = target_fields.size();
  matrix.r.assign(n_rows, std::vector<std::optional<double>>(n_cols));
  matrix.n.assign(n_rows, std::vector<std::size_t>(n_cols, 0));
  for (std::size_t i = 0; i < n_rows; ++i) {
    for (std::size_t j = 0; j < n_cols; ++j) {
      matrix.n[i][j] = used_cols[i].size();
      matrix.r[i][j] = pearson(used_cols[i], target_cols[j]);
    }
  }
  return matrix;
}

// ---------------------------------------------------------------------------
// HTTP API
// ---------------------------------------------------------------------------

struct HttpApi::Impl {
  explicit Impl(const TaskStore& store) : store(store), service(store) {}
  const TaskStore& store;
  QueryService service;
  httplib::Server server;
  std::thread thread;
};

namespace {

void reply_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t comma = s.find(',', pos);
    std::string item = s.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

HttpApi::HttpApi(const TaskStore& store, std::string host, int port)
    : impl_(std::make_unique<Impl>(store)), host_(std::move(host)), port_(port) {
  auto& server = impl_->server;
  auto* impl = impl_.get();

  auto guard_store = [impl](httplib::Response& res) {
    if (impl->store.is_open()) return true;
    reply_json(res, 503, Json{{"error", "StoreUnavailable"}});
    return false;
  };

  server.Post("/query", [impl, guard_store](const httplib::Request& req, httplib::Response& res) {
    if (!guard_store(res)) return;
    try {
      Json body = Json::parse(req.body, nullptr, false);
      if (body.is_discarded()) throw BadQuery("spec", "request body is not valid JSON");
      QuerySpec spec = QuerySpec::from_json(body);
      QueryResult result = impl->service.query(spec);
      reply_json(res, 200, Json{{"rows", result.rows}, {"warnings", result.warnings}});
    } catch (const BadQuery& e) {
      reply_json(res, 400, Json{{"error", "BadQuery"}, {"clause", e.clause}, {"detail", e.what()}});
    } catch (const std::exception& e) {
      reply_json(res, 500, Json{{"error", "Internal"}, {"detail", e.what()}});
    }
  });

  server.Get(R"(/task/(.+))", [impl, guard_store](const httplib::Request& req,
                                                  httplib::Response& res) {
    if (!guard_store(res)) return;
    auto rec = impl->store.get(req.matches[1]);
    if (!rec) {
      reply_json(res, 404, Json{{"error", "UnknownTask"}, {"task_id", std::string(req.matches[1])}});
      return;
    }
    reply_json(res, 200, rec->to_json());
  });

  server.Get(R"(/campaign/([^/]+)/lineage)", [impl, guard_store](const httplib::Request& req,
                                                                 httplib::Response& res) {
    if (!guard_store(res)) return;
    try {
      std::size_t k = std::stoul(req.get_param_value("k").empty() ? "3" : req.get_param_value("k"));
      std::string metric = req.get_param_value("metric");
      if (metric.empty()) {
        reply_json(res, 400, Json{{"error", "BadQuery"}, {"clause", "metric"},
                                  {"detail", "metric query parameter is required"}});
        return;
      }
      bool minimize = req.get_param_value("minimize") != "false";
      auto report = impl->service.lineage_report(req.matches[1], k, metric, minimize);
      reply_json(res, 200, report.to_json());
    } catch (const UnknownCampaign& e) {
      reply_json(res, 404, Json{{"error", "UnknownCampaign"}, {"detail", e.what()}});
    } catch (const MetricAbsent& e) {
      reply_json(res, 404, Json{{"error", "MetricAbsent"}, {"detail", e.what()}});
    } catch (const std::exception& e) {
      reply_json(res, 500, Json{{"error", "Internal"}, {"detail", e.what()}});
    }
  });

  server.Get(R"(/campaign/([^/]+)/correlation)",
             [impl, guard_store](const httplib::Request& req, httplib::Response& res) {
               if (!guard_store(res)) return;
               try {
                 auto used = split_csv(req.get_param_value("used"));
                 auto targets = split_csv(req.get_param_value("targets"));
                 auto matrix = impl->service.correlation_matrix(req.matches[1], used, targets);
                 reply_json(res, 200, matrix.to_json());
               } catch (const UnknownCampaign& e) {
                 reply_json(res, 404, Json{{"error", "UnknownCampaign"}, {"detail", e.what()}});
               } catch (const std::exception& e) {
                 reply_json(res, 500, Json{{"error", "Internal"}, {"detail", e.what()}});
               }
             });
}

HttpApi::~HttpApi() { stop(); }

void HttpApi::start() {
  auto& server = impl_->server;
  if (port_ == 0) {
    port_ = server.bind_to_any_port(host_);
    if (port_ < 0) throw StoreIO("cannot bind HTTP server on " + host_);
  } else {
    if (!server.bind_to_port(host_, port_)) {
      throw StoreIO("cannot bind HTTP server on " + host_ + ":" + std::to_string(port_));
    }
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  server.wait_until_ready();
}

void HttpApi::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace provmesh
