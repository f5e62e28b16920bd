#pragma once

#include <filesystem>
#include <optional>
#include <shared_mutex>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "provmesh/model.hpp"

namespace provmesh {

// ---------------------------------------------------------------------------
// QuerySpec — declarative projection/filter/aggregation/sort/limit.
//
// Wire form:
//   {"projection": ["used.layers","generated.loss"],
//    "filter": {"campaign_id": "c1", "generated.loss": {"lt": 0.5}},
//    "aggregation": [["min","generated.loss"]], "group_by": "workflow_id",
//    "sort": [["ended_at","descending"]], "limit": 100}
// A non-object filter value is shorthand for {"eq": value}.
// ---------------------------------------------------------------------------

struct BadQuery : std::runtime_error {
  std::string clause;
  BadQuery(std::string clause_name, const std::string& why)
      : std::runtime_error("bad query clause '" + clause_name + "': " + why),
        clause(std::move(clause_name)) {}
};

struct Predicate {
  enum class Op { Eq, Ne, Gt, Gte, Lt, Lte, In };
  Op op = Op::Eq;
  Json value;
};

struct Aggregation {
  enum class Op { Min, Max, Avg, Sum, Count };
  Op op = Op::Min;
  std::string path;
};

struct SortKey {
  std::string path;
  bool ascending = true;
};

struct QuerySpec {
  std::vector<std::string> projection;
  std::vector<std::pair<std::string, Predicate>> filter;
  std::vector<Aggregation> aggregation;
  std::optional<std::string> group_by;
  std::vector<SortKey> sort;
  std::optional<std::size_t> limit;

  Json to_json() const;
  static QuerySpec from_json(const Json& j);  // throws BadQuery
};

struct QueryResult {
  std::vector<Json> rows;
  std::vector<std::string> warnings;
};

// Dotted-path helpers shared by the query engine and analyses.
const Json* resolve_path(const Json& doc, std::string_view dotted);
std::string aggregation_column(Aggregation::Op op, const std::string& path);

// ---------------------------------------------------------------------------
// Campaign configuration
// ---------------------------------------------------------------------------

struct CampaignConfig {
  std::string campaign_id;
  std::vector<std::string> workflows;  // declared order, upstream first
  std::vector<std::string> entity_keys;

  Json to_json() const;
  static std::optional<CampaignConfig> from_json(const Json& j);
};

// ---------------------------------------------------------------------------
// TaskStore — the persistent integrated data view.
//
// Durable single-writer store, event-sourced on disk:
//   <dir>/manifest.json    format version + snapshot watermark
//   <dir>/events.jsonl     append-only validated event log
//   <dir>/snapshot.jsonl   materialized records at the manifest watermark
//   <dir>/links.jsonl      resolved provenance links
//   <dir>/campaigns.json   registered campaign configs
//   <dir>/.lock            flock guard (one writer process)
// On open, the snapshot is loaded and the event log's tail is replayed
// through the merge rules. Lookups by task_id are hash-index backed; a
// secondary index groups records per campaign.
// ---------------------------------------------------------------------------

struct StoreIO : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownTask : std::runtime_error {
  explicit UnknownTask(const std::string& id) : std::runtime_error("unknown task '" + id + "'") {}
};

enum class LineageDirection { Backward, Forward };

struct LineageEdge {
  std::string producer_task_id;
  std::string consumer_task_id;
  std::string entity_key;
  std::string entity_value_digest;
  bool cross_workflow = false;
  Json to_json() const;
};

struct LineageGraph {
  std::vector<TaskRecord> nodes;
  std::vector<LineageEdge> edges;
  Json to_json() const;
};

class TaskStore {
 public:
  struct Options {
    bool fsync_on_flush = true;
  };

  TaskStore() = default;
  ~TaskStore();
  TaskStore(TaskStore&&) noexcept;
  TaskStore& operator=(TaskStore&&) noexcept;
  TaskStore(const TaskStore&) = delete;
  TaskStore& operator=(const TaskStore&) = delete;

  static TaskStore open(const std::filesystem::path& dir);
  static TaskStore open(const std::filesystem::path& dir, Options options);
  void close();  // checkpoint + unlock; idempotent
  bool is_open() const;
  const std::filesystem::path& directory() const { return dir_; }

  void set_campaign(const CampaignConfig& config);
  std::optional<CampaignConfig> campaign(const std::string& id) const;
  std::vector<std::string> campaign_ids() const;

  struct UpsertOutcome {
    std::size_t applied = 0;
    // Tasks that are terminal and whose provenance-eligible entries changed
    // in this bulk (including by becoming terminal): linking candidates.
    std::vector<std::string> link_candidates;
  };
  UpsertOutcome bulk_upsert(const std::vector<TaskStateEvent>& events);

  // Resolves cross-workflow links for one task against the digest index;
  // persists and returns the links that are new.
  std::vector<ProvenanceLink> link_provenance(const std::string& task_id);

  std::optional<TaskRecord> get(const std::string& task_id) const;
  std::size_t size() const;
  std::vector<ProvenanceLink> links() const;

  QueryResult query(const QuerySpec& spec) const;

  LineageGraph traverse_lineage(const std::string& task_id, LineageDirection direction,
                                std::size_t max_depth) const;

  // Documents in insertion order (the query engine's scan order).
  std::vector<Json> all_documents() const;
  std::vector<TaskRecord> records_in_campaign(const std::string& campaign_id) const;

 private:
  struct Entry {
    TaskRecord record;
    Json doc;  // cached to_json() of record
  };
  struct DigestEntry {
    std::string task_id;
    std::string workflow_id;
    std::string key;
    bool generated = false;  // else used
    bool operator==(const DigestEntry&) const = default;
  };

  void append_lines(int fd, const std::vector<std::string>& lines);
  void load_from_disk();
  void index_record_entities(const TaskRecord& rec);
  bool entity_eligible(const std::string& campaign_id, const std::string& key,
                       const Json& value) const;
  std::vector<LineageEdge> neighbor_edges(const TaskRecord& rec, LineageDirection direction) const;
  void checkpoint();

  std::filesystem::path dir_;
  Options options_;
  int lock_fd_ = -1;
  int events_fd_ = -1;
  int links_fd_ = -1;
  std::uint64_t events_bytes_ = 0;

  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, Entry> records_;
  std::vector<std::string> insertion_order_;
  std::unordered_map<std::string, std::vector<std::string>> by_campaign_;
  std::unordered_map<std::string, CampaignConfig> campaigns_;
  // (campaign_id \x1f digest) -> entity entries carrying that digest
  std::unordered_map<std::string, std::vector<DigestEntry>> digest_index_;
  std::vector<ProvenanceLink> links_;
  std::unordered_set<std::string> link_keys_;
  std::unordered_map<std::string, std::vector<std::size_t>> links_by_producer_;
  std::unordered_map<std::string, std::vector<std::size_t>> links_by_consumer_;
};

}  // namespace provmesh
