#include "provmesh/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <deque>
#include <fstream>
#include <mutex>

namespace provmesh {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// QuerySpec wire form
// ---------------------------------------------------------------------------

namespace {

const char* agg_op_name(Aggregation::Op op) {
  switch (op) {
    case Aggregation::Op::Min: return "min";
    case Aggregation::Op::Max: return "max";
    case Aggregation::Op::Avg: return "avg";
    case Aggregation::Op::Sum: return "sum";
    case Aggregation::Op::Count: return "count";
  }
  return "min";
}

std::optional<Aggregation::Op> agg_op_from(const std::string& s) {
  if (s == "min") return Aggregation::Op::Min;
  if (s == "max") return Aggregation::Op::Max;
  if (s == "avg") return Aggregation::Op::Avg;
  if (s == "sum") return Aggregation::Op::Sum;
  if (s == "count") return Aggregation::Op::Count;
  return std::nullopt;
}

const char* pred_op_name(Predicate::Op op) {
  switch (op) {
    case Predicate::Op::Eq: return "eq";
    case Predicate::Op::Ne: return "ne";
    case Predicate::Op::Gt: return "gt";
    case Predicate::Op::Gte: return "gte";
    case Predicate::Op::Lt: return "lt";
    case Predicate::Op::Lte: return "lte";
    case Predicate::Op::In: return "in";
  }
  return "eq";
}

std::optional<Predicate::Op> pred_op_from(const std::string& s) {
  if (s == "eq") return Predicate::Op::Eq;
  if (s == "ne") return Predicate::Op::Ne;
  if (s == "gt") return Predicate::Op::Gt;
  if (s == "gte") return Predicate::Op::Gte;
  if (s == "lt") return Predicate::Op::Lt;
  if (s == "lte") return Predicate::Op::Lte;
  if (s == "in") return Predicate::Op::In;
  return std::nullopt;
}

}  // namespace

std::string aggregation_column(Aggregation::Op op, const std::string& path) {
  return std::string(agg_op_name(op)) + "(" + path + ")";
}

Json QuerySpec::to_json() const {
  Json j = Json::object();
  if (!projection.empty()) j["projection"] = projection;
  if (!filter.empty()) {
    Json f = Json::object();
    for (const auto& [path, pred] : filter) {
      f[path] = Json{{pred_op_name(pred.op), pred.value}};
    }
    j["filter"] = std::move(f);
  }
  if (!aggregation.empty()) {
    Json a = Json::array();
    for (const auto& agg : aggregation) a.push_back(Json::array({agg_op_name(agg.op), agg.path}));
    j["aggregation"] = std::move(a);
  }
  if (group_by) j["group_by"] = *group_by;
  if (!sort.empty()) {
    Json s = Json::array();
    for (const auto& k : sort) {
      s.push_back(Json::array({k.path, k.ascending ? "ascending" : "descending"}));
    }
    j["sort"] = std::move(s);
  }
  if (limit) j["limit"] = *limit;
  return j;
}

QuerySpec QuerySpec::from_json(const Json& j) {
  if (!j.is_object()) throw BadQuery("spec", "must be a JSON object");
  QuerySpec spec;

  if (auto it = j.find("projection"); it != j.end()) {
    if (!it->is_array()) throw BadQuery("projection", "must be an array of field paths");
    for (auto& p : *it) {
      if (!p.is_string()) throw BadQuery("projection", "field paths must be strings");
      spec.projection.push_back(p.get<std::string>());
    }
  }

  if (auto it = j.find("filter"); it != j.end()) {
    if (!it->is_object()) throw BadQuery("filter", "must be an object of path -> predicate");
    for (auto& [path, raw] : it->items()) {
      Predicate pred;
      if (raw.is_object()) {
        if (raw.size() != 1) {
          throw BadQuery("filter." + path, "predicate must have exactly one operator");
        }
        auto& [op_name, value] = *raw.items().begin();
        auto op = pred_op_from(op_name);
        if (!op) throw BadQuery("filter." + path, "unknown op '" + op_name + "'");
        pred.op = *op;
        pred.value = value;
        if (pred.op == Predicate::Op::In && !pred.value.is_array()) {
          throw BadQuery("filter." + path, "'in' needs an array value");
        }
      } else {
        pred.op = Predicate::Op::Eq;
        pred.value = raw;
      }
      spec.filter.emplace_back(path, std::move(pred));
    }
  }

  if (auto it = j.find("aggregation"); it != j.end()) {
    if (!it->is_array()) throw BadQuery("aggregation", "must be an array of [op, path]");
    std::size_t i = 0;
    for (auto& entry : *it) {
      std::string clause = "aggregation[" + std::to_string(i++) + "]";
      if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() ||
          !entry[1].is_string()) {
        throw BadQuery(clause, "expected [op, path]");
      }
      auto op = agg_op_from(entry[0].get<std::string>());
      if (!op) throw BadQuery(clause, "unknown op '" + entry[0].get<std::string>() + "'");
      spec.aggregation.push_back(Aggregation{*op, entry[1].get<std::string>()});
    }
  }

  if (auto it = j.find("group_by"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw BadQuery("group_by", "must be a field path");
    spec.group_by = it->get<std::string>();
  }

  if (auto it = j.find("sort"); it != j.end()) {
    if (!it->is_array()) throw BadQuery("sort", "must be an array of [path, direction]");
    std::size_t i = 0;
    for (auto& entry : *it) {
      std::string clause = "sort[" + std::to_string(i++) + "]";
      if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() ||
          !entry[1].is_string()) {
        throw BadQuery(clause, "expected [path, \"ascending\"|\"descending\"]");
      }
      std::string dir = entry[1].get<std::string>();
      if (dir != "ascending" && dir != "descending") {
        throw BadQuery(clause, "direction must be ascending or descending");
      }
      spec.sort.push_back(SortKey{entry[0].get<std::string>(), dir == "ascending"});
    }
  }

  if (auto it = j.find("limit"); it != j.end() && !it->is_null()) {
    if (!it->is_number_integer() || it->get<std::int64_t>() < 1) {
      throw BadQuery("limit", "must be a positive integer");
    }
    spec.limit = it->get<std::size_t>();
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Path resolution and value ordering
// ---------------------------------------------------------------------------

const Json* resolve_path(const Json& doc, std::string_view dotted) {
  // Exact key first: projected rows and aggregation rows use flat keys that
  // may themselves contain dots.
  if (doc.is_object()) {
    if (auto it = doc.find(std::string(dotted)); it != doc.end()) return &*it;
  }
  const Json* cur = &doc;
  std::size_t pos = 0;
  while (pos <= dotted.size()) {
    std::size_t dot = dotted.find('.', pos);
    std::string_view part =
        dot == std::string_view::npos ? dotted.substr(pos) : dotted.substr(pos, dot - pos);
    if (!cur->is_object()) return nullptr;
    auto it = cur->find(std::string(part));
    if (it == cur->end()) return nullptr;
    cur = &*it;
    if (dot == std::string_view::npos) break;
    pos = dot + 1;
  }
  if (cur->is_null()) return nullptr;
  return cur;
}

namespace {

int type_rank(const Json& v) {
  if (v.is_boolean()) return 0;
  if (v.is_number()) return 1;
  if (v.is_string()) return 2;
  if (v.is_array()) return 3;
  if (v.is_object()) return 4;
  return -1;  // null
}

// Total order over JSON values: by type rank, then within-type comparison.
// Used for sorting, where heterogeneous columns still need determinism.
int order_values(const Json& a, const Json& b) {
  int ra = type_rank(a), rb = type_rank(b);
  if (ra != rb) return ra < rb ? -1 : 1;
  switch (ra) {
    case 0: {
      bool x = a.get<bool>(), y = b.get<bool>();
      return x == y ? 0 : (x < y ? -1 : 1);
    }
    case 1: {
      double x = a.get<double>(), y = b.get<double>();
      return x == y ? 0 : (x < y ? -1 : 1);
    }
    case 2: {
      const auto& x = a.get_ref<const std::string&>();
      const auto& y = b.get_ref<const std::string&>();
      int c = x.compare(y);
      return c == 0 ? 0 : (c < 0 ? -1 : 1);
    }
    default: {
      std::string x = a.dump(), y = b.dump();
      int c = x.compare(y);
      return c == 0 ? 0 : (c < 0 ? -1 : 1);
    }
  }
}

// Ordering for range predicates: defined for numbers, strings, and booleans
// of matching type; everything else is incomparable (predicate fails).
std::optional<int> compare_for_predicate(const Json& value, const Json& bound) {
  if (value.is_number() && bound.is_number()) {
    double x = value.get<double>(), y = bound.get<double>();
    return x == y ? 0 : (x < y ? -1 : 1);
  }
  if (value.is_string() && bound.is_string()) {
    int c = value.get_ref<const std::string&>().compare(bound.get_ref<const std::string&>());
    return c == 0 ? 0 : (c < 0 ? -1 : 1);
  }
  if (value.is_boolean() && bound.is_boolean()) {
    bool x = value.get<bool>(), y = bound.get<bool>();
    return x == y ? 0 : (x < y ? -1 : 1);
  }
  return std::nullopt;
}

bool eval_predicate(const Json* value, const Predicate& pred) {
  switch (pred.op) {
    case Predicate::Op::Eq:
      return value && *value == pred.value;
    case Predicate::Op::Ne:
      return value && *value != pred.value;
    case Predicate::Op::In: {
      if (!value) return false;
      for (const auto& candidate : pred.value) {
        if (*value == candidate) return true;
      }
      return false;
    }
    case Predicate::Op::Gt:
    case Predicate::Op::Gte:
    case Predicate::Op::Lt:
    case Predicate::Op::Lte: {
      if (!value) return false;
      auto c = compare_for_predicate(*value, pred.value);
      if (!c) return false;
      switch (pred.op) {
        case Predicate::Op::Gt: return *c > 0;
        case Predicate::Op::Gte: return *c >= 0;
        case Predicate::Op::Lt: return *c < 0;
        default: return *c <= 0;
      }
    }
  }
  return false;
}

bool matches_filter(const Json& doc, const QuerySpec& spec) {
  for (const auto& [path, pred] : spec.filter) {
    if (!eval_predicate(resolve_path(doc, path), pred)) return false;
  }
  return true;
}

struct AggState {
  double sum = 0;
  std::size_t numeric_count = 0;
  std::size_t present_count = 0;
  std::optional<Json> min_v, max_v;

  void feed(const Json* v) {
    if (!v) return;
    present_count += 1;
    if (!min_v || order_values(*v, *min_v) < 0) min_v = *v;
    if (!max_v || order_values(*v, *max_v) > 0) max_v = *v;
    if (v->is_number()) {
      sum += v->get<double>();
      numeric_count += 1;
    } else if (v->is_boolean()) {
      sum += v->get<bool>() ? 1.0 : 0.0;
      numeric_count += 1;
    }
  }

  void emit(const Aggregation& agg, Json& row) const {
    std::string col = aggregation_column(agg.op, agg.path);
    switch (agg.op) {
      case Aggregation::Op::Count:
        row[col] = present_count;
        break;
      case Aggregation::Op::Min:
        if (min_v) row[col] = *min_v;
        break;
      case Aggregation::Op::Max:
        if (max_v) row[col] = *max_v;
        break;
      case Aggregation::Op::Sum:
        if (numeric_count > 0) row[col] = sum;
        break;
      case Aggregation::Op::Avg:
        if (numeric_count > 0) row[col] = sum / static_cast<double>(numeric_count);
        break;
    }
  }
};

Json project_doc(const Json& doc, const std::vector<std::string>& projection) {
  if (projection.empty()) return doc;
  Json row = Json::object();
  for (const auto& path : projection) {
    if (const Json* v = resolve_path(doc, path)) row[path] = *v;
  }
  return row;
}

}  // namespace

// Shared by TaskStore::query and usable against any document list; the test
// suite's reference evaluator re-implements these semantics independently.
static QueryResult run_query_pipeline(const std::vector<const Json*>& docs,
                                      const QuerySpec& spec) {
  QueryResult result;

  std::vector<const Json*> filtered;
  filtered.reserve(docs.size());
  for (const Json* d : docs) {
    if (matches_filter(*d, spec)) filtered.push_back(d);
  }

  // Sorting helper: stable multi-key; records missing a key order after
  // records that have it, under either direction.
  auto sorter = [&spec](auto& items, auto&& key_of) {
    if (spec.sort.empty()) return;
    std::stable_sort(items.begin(), items.end(), [&](const auto& a, const auto& b) {
      for (const auto& k : spec.sort) {
        const Json* va = resolve_path(key_of(a), k.path);
        const Json* vb = resolve_path(key_of(b), k.path);
        if (!va && !vb) continue;
        if (!va) return false;  // missing sorts last
        if (!vb) return true;
        int c = order_values(*va, *vb);
        if (c != 0) return k.ascending ? c < 0 : c > 0;
      }
      return false;
    });
  };

  if (!spec.aggregation.empty()) {
    std::vector<Json> rows;
    if (spec.group_by) {
      // Group rows keyed by the group_by value; groups appear in first-seen
      // (insertion) order before sorting.
      std::vector<Json> group_keys;
      std::vector<std::vector<const Json*>> groups;
      std::map<std::string, std::size_t> group_index;
      for (const Json* d : filtered) {
        const Json* gv = resolve_path(*d, *spec.group_by);
        Json key = gv ? *gv : Json(nullptr);
        std::string ks = key.dump();
        auto [it, inserted] = group_index.emplace(ks, groups.size());
        if (inserted) {
          group_keys.push_back(key);
          groups.emplace_back();
        }
        groups[it->second].push_back(d);
      }
      for (std::size_t g = 0; g < groups.size(); ++g) {
        Json row = Json::object();
        row[*spec.group_by] = group_keys[g];
        // Projection fields pass through from the group's first record.
        for (const auto& path : spec.projection) {
          if (path == *spec.group_by) continue;
          if (const Json* v = resolve_path(*groups[g].front(), path)) row[path] = *v;
        }
        for (const auto& agg : spec.aggregation) {
          AggState st;
          for (const Json* d : groups[g]) st.feed(resolve_path(*d, agg.path));
          st.emit(agg, row);
        }
        rows.push_back(std::move(row));
      }
    } else {
      if (!spec.projection.empty()) {
        result.warnings.push_back(
            "projection ignored: aggregation without group_by returns a single row");
      }
      Json row = Json::object();
      for (const auto& agg : spec.aggregation) {
        AggState st;
        for (const Json* d : filtered) st.feed(resolve_path(*d, agg.path));
        st.emit(agg, row);
      }
      rows.push_back(std::move(row));
    }
    sorter(rows, [](const Json& r) -> const Json& { return r; });
    if (spec.limit && rows.size() > *spec.limit) rows.resize(*spec.limit);
    result.rows = std::move(rows);
    return result;
  }

  sorter(filtered, [](const Json* d) -> const Json& { return *d; });
  if (spec.limit && filtered.size() > *spec.limit) filtered.resize(*spec.limit);
  result.rows.reserve(filtered.size());
  for (const Json* d : filtered) result.rows.push_back(project_doc(*d, spec.projection));
  return result;
}

// ---------------------------------------------------------------------------
// CampaignConfig
// ---------------------------------------------------------------------------

Json CampaignConfig::to_json() const {
  return Json{{"campaign_id", campaign_id}, {"workflows", workflows}, {"entity_keys", entity_keys}};
}

std::optional<CampaignConfig> CampaignConfig::from_json(const Json& j) {
  if (!j.is_object()) return std::nullopt;
  CampaignConfig c;
  c.campaign_id = j.value("campaign_id", std::string{});
  if (c.campaign_id.empty()) return std::nullopt;
  if (auto it = j.find("workflows"); it != j.end() && it->is_array()) {
    for (auto& w : *it) {
      if (w.is_string()) c.workflows.push_back(w.get<std::string>());
    }
  }
  if (auto it = j.find("entity_keys"); it != j.end() && it->is_array()) {
    for (auto& k : *it) {
      if (k.is_string()) c.entity_keys.push_back(k.get<std::string>());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Lineage types
// ---------------------------------------------------------------------------

Json LineageEdge::to_json() const {
  return Json{{"producer_task_id", producer_task_id},
              {"consumer_task_id", consumer_task_id},
              {"entity_key", entity_key},
              {"entity_value_digest", entity_value_digest},
              {"cross_workflow", cross_workflow}};
}

Json LineageGraph::to_json() const {
  Json nodes_j = Json::array();
  for (const auto& n : nodes) nodes_j.push_back(n.to_json());
  Json edges_j = Json::array();
  for (const auto& e : edges) edges_j.push_back(e.to_json());
  return Json{{"nodes", std::move(nodes_j)}, {"edges", std::move(edges_j)}};
}

// ---------------------------------------------------------------------------
// TaskStore lifecycle
// ---------------------------------------------------------------------------

TaskStore::~TaskStore() { close(); }

TaskStore::TaskStore(TaskStore&& other) noexcept { *this = std::move(other); }

TaskStore& TaskStore::operator=(TaskStore&& other) noexcept {
  if (this == &other) return *this;
  close();
  dir_ = std::move(other.dir_);
  options_ = other.options_;
  lock_fd_ = other.lock_fd_;
  events_fd_ = other.events_fd_;
  links_fd_ = other.links_fd_;
  events_bytes_ = other.events_bytes_;
  records_ = std::move(other.records_);
  insertion_order_ = std::move(other.insertion_order_);
  by_campaign_ = std::move(other.by_campaign_);
  campaigns_ = std::move(other.campaigns_);
  digest_index_ = std::move(other.digest_index_);
  links_ = std::move(other.links_);
  link_keys_ = std::move(other.link_keys_);
  links_by_producer_ = std::move(other.links_by_producer_);
  links_by_consumer_ = std::move(other.links_by_consumer_);
  other.lock_fd_ = -1;
  other.events_fd_ = -1;
  other.links_fd_ = -1;
  return *this;
}

bool TaskStore::is_open() const { return lock_fd_ >= 0; }

TaskStore TaskStore::open(const fs::path& dir) { return open(dir, Options{}); }

TaskStore TaskStore::open(const fs::path& dir, Options options) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw StoreIO("cannot create store directory " + dir.string() + ": " + ec.message());

  TaskStore store;
  store.dir_ = dir;
  store.options_ = options;

  fs::path lock_path = dir / ".lock";
  store.lock_fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
  if (store.lock_fd_ < 0) throw StoreIO("cannot open lock file: " + lock_path.string());
  if (::flock(store.lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(store.lock_fd_);
    store.lock_fd_ = -1;
    throw StoreIO("store is locked by another process: " + dir.string());
  }

  store.load_from_disk();

  store.events_fd_ = ::open((dir / "events.jsonl").c_str(), O_CREAT | O_WRONLY | O_APPEND, 0644);
  store.links_fd_ = ::open((dir / "links.jsonl").c_str(), O_CREAT | O_WRONLY | O_APPEND, 0644);
  if (store.events_fd_ < 0 || store.links_fd_ < 0) {
    throw StoreIO("cannot open store data files in " + dir.string());
  }
  return store;
}

void TaskStore::load_from_disk() {
  std::uint64_t watermark = 0;
  {
    std::ifstream f(dir_ / "manifest.json");
    if (f) {
      Json m = Json::parse(f, nullptr, false);
      if (!m.is_discarded() && m.is_object()) {
        if (m.value("format_version", 0) != 1) {
          throw StoreIO("unsupported store format version in " + dir_.string());
        }
        watermark = m.value("snapshot_watermark", std::uint64_t{0});
      }
    }
  }

  std::uint64_t events_size = 0;
  if (fs::exists(dir_ / "events.jsonl")) {
    events_size = static_cast<std::uint64_t>(fs::file_size(dir_ / "events.jsonl"));
  }
  if (watermark > events_size) watermark = 0;  // stale snapshot; replay everything

  auto add_record = [&](TaskRecord rec) {
    std::string id = rec.task_id;
    Entry entry{std::move(rec), Json()};
    entry.doc = entry.record.to_json();
    auto [it, inserted] = records_.emplace(id, std::move(entry));
    if (inserted) {
      insertion_order_.push_back(id);
      by_campaign_[it->second.record.campaign_id].push_back(id);
      index_record_entities(it->second.record);
    }
  };

  if (watermark > 0) {
    std::ifstream f(dir_ / "snapshot.jsonl");
    std::string line;
    while (f && std::getline(f, line)) {
      if (line.empty()) continue;
      Json j = Json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;
      add_record(TaskRecord::from_json(j));
    }
  } else {
    watermark = 0;
  }

  // Replay the event-log tail through the merge rules.
  {
    std::ifstream f(dir_ / "events.jsonl", std::ios::binary);
    if (f && watermark > 0) f.seekg(static_cast<std::streamoff>(watermark));
    std::string line;
    while (f && std::getline(f, line)) {
      if (line.empty()) continue;
      auto parsed = decode_event(line);
      if (!parsed.ok()) continue;
      const TaskStateEvent& ev = *parsed.event;
      auto it = records_.find(ev.task_id);
      std::optional<TaskRecord> old;
      if (it != records_.end()) old = it->second.record;
      TaskRecord merged = merge_event(old, ev);
      if (it != records_.end()) {
        // Re-index entity entries below by rebuilding; cheap at load time.
        it->second.record = std::move(merged);
        it->second.doc = it->second.record.to_json();
      } else {
        add_record(std::move(merged));
        continue;
      }
    }
  }
  // Entity index may be stale for records updated during replay: rebuild.
  digest_index_.clear();
  by_campaign_.clear();
  for (const auto& id : insertion_order_) {
    const auto& rec = records_.at(id).record;
    by_campaign_[rec.campaign_id].push_back(id);
    index_record_entities(rec);
  }
  events_bytes_ = events_size;

  {
    std::ifstream f(dir_ / "links.jsonl");
    std::string line;
    while (f && std::getline(f, line)) {
      if (line.empty()) continue;
      Json j = Json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;
      auto link = ProvenanceLink::from_json(j);
      if (!link) continue;
      std::string key = link->producer_task_id + "\x1f" + link->consumer_task_id + "\x1f" +
                        link->entity_key + "\x1f" + link->entity_value_digest;
      if (!link_keys_.insert(key).second) continue;
      links_by_producer_[link->producer_task_id].push_back(links_.size());
      links_by_consumer_[link->consumer_task_id].push_back(links_.size());
      links_.push_back(std::move(*link));
    }
  }

  {
    std::ifstream f(dir_ / "campaigns.json");
    if (f) {
      Json j = Json::parse(f, nullptr, false);
      if (!j.is_discarded() && j.is_array()) {
        for (auto& c : j) {
          if (auto cfg = CampaignConfig::from_json(c)) campaigns_[cfg->campaign_id] = *cfg;
        }
      }
    }
  }
}

void TaskStore::append_lines(int fd, const std::vector<std::string>& lines) {
  if (lines.empty()) return;
  std::string blob;
  std::size_t total = 0;
  for (const auto& l : lines) total += l.size() + 1;
  blob.reserve(total);
  for (const auto& l : lines) {
    blob += l;
    blob += '\n';
  }
  const char* p = blob.data();
  std::size_t left = blob.size();
  while (left > 0) {
    ssize_t n = ::write(fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw StoreIO(std::string("store write failed: ") + std::strerror(errno));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  if (options_.fsync_on_flush) ::fdatasync(fd);
  if (fd == events_fd_) events_bytes_ += blob.size();
}

void TaskStore::checkpoint() {
  fs::path tmp = dir_ / "snapshot.jsonl.tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    for (const auto& id : insertion_order_) {
      f << records_.at(id).doc.dump() << '\n';
    }
    f.flush();
    if (!f) throw StoreIO("cannot write snapshot in " + dir_.string());
  }
  fs::rename(tmp, dir_ / "snapshot.jsonl");

  {
    std::ofstream f(dir_ / "campaigns.json", std::ios::trunc);
    Json arr = Json::array();
    for (const auto& [_, cfg] : campaigns_) arr.push_back(cfg.to_json());
    f << arr.dump();
  }
  {
    std::ofstream f(dir_ / "manifest.json", std::ios::trunc);
    f << Json{{"format_version", 1}, {"snapshot_watermark", events_bytes_}}.dump();
  }
}

void TaskStore::close() {
  if (lock_fd_ < 0) return;
  {
    std::unique_lock lk(mu_);
    checkpoint();
  }
  if (events_fd_ >= 0) ::close(events_fd_);
  if (links_fd_ >= 0) ::close(links_fd_);
  ::flock(lock_fd_, LOCK_UN);
  ::close(lock_fd_);
  events_fd_ = -1;
  links_fd_ = -1;
  lock_fd_ = -1;
}

// ---------------------------------------------------------------------------
// Campaigns
// ---------------------------------------------------------------------------

void TaskStore::set_campaign(const CampaignConfig& config) {
  std::unique_lock lk(mu_);
  campaigns_[config.campaign_id] = config;
  // Entity eligibility may have widened: re-index.
  digest_index_.clear();
  for (const auto& id : insertion_order_) index_record_entities(records_.at(id).record);
}

std::optional<CampaignConfig> TaskStore::campaign(const std::string& id) const {
  std::shared_lock lk(mu_);
  auto it = campaigns_.find(id);
  if (it == campaigns_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> TaskStore::campaign_ids() const {
  std::shared_lock lk(mu_);
  std::vector<std::string> out;
  out.reserve(campaigns_.size());
  for (const auto& [id, _] : campaigns_) out.push_back(id);
  return out;
}

// ---------------------------------------------------------------------------
// Entity digest index
// ---------------------------------------------------------------------------

bool TaskStore::entity_eligible(const std::string& campaign_id, const std::string& key,
                                const Json& value) const {
  if (is_reference_value(value)) return true;
  auto it = campaigns_.find(campaign_id);
  if (it == campaigns_.end()) return false;
  const auto& keys = it->second.entity_keys;
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

void TaskStore::index_record_entities(const TaskRecord& rec) {
  auto add = [&](const Json& section, bool generated) {
    for (auto& [k, v] : section.items()) {
      if (!entity_eligible(rec.campaign_id, k, v)) continue;
      std::string index_key = rec.campaign_id + "\x1f" + entity_digest(v);
      auto& entries = digest_index_[index_key];
      DigestEntry entry{rec.task_id, rec.workflow_id, k, generated};
      if (std::find(entries.begin(), entries.end(), entry) == entries.end()) {
        entries.push_back(std::move(entry));
      }
    }
  };
  add(rec.used, false);
  add(rec.generated, true);
}

// ---------------------------------------------------------------------------
// Upserts
// ---------------------------------------------------------------------------

TaskStore::UpsertOutcome TaskStore::bulk_upsert(const std::vector<TaskStateEvent>& events) {
  UpsertOutcome outcome;
  if (events.empty()) return outcome;
  std::vector<std::string> lines;
  lines.reserve(events.size());
  std::unordered_set<std::string> candidate_set;

  std::unique_lock lk(mu_);
  if (lock_fd_ < 0) throw StoreIO("store is closed");
  for (const TaskStateEvent& ev : events) {
    auto it = records_.find(ev.task_id);
    std::optional<TaskRecord> old;
    if (it != records_.end()) old = it->second.record;

    TaskRecord merged = merge_event(old, ev);
    bool was_terminal = old && is_terminal(old->status);
    bool entities_changed =
        !old || old->used != merged.used || old->generated != merged.generated;
    bool campaign_changed = old && old->campaign_id != merged.campaign_id;

    if (it != records_.end()) {
      if (entities_changed || campaign_changed) {
        // Rebuild this record's index entries: drop stale ones, re-add.
        auto drop = [&](const Json& section) {
          for (auto& [k, v] : section.items()) {
            std::string index_key = old->campaign_id + "\x1f" + entity_digest(v);
            auto idx = digest_index_.find(index_key);
            if (idx == digest_index_.end()) continue;
            auto& entries = idx->second;
            entries.erase(std::remove_if(entries.begin(), entries.end(),
                                         [&](const DigestEntry& e) {
                                           return e.task_id == ev.task_id && e.key == k;
                                         }),
                          entries.end());
          }
        };
        drop(old->used);
        drop(old->generated);
      }
      if (campaign_changed) {
        auto& ids = by_campaign_[old->campaign_id];
        ids.erase(std::remove(ids.begin(), ids.end(), ev.task_id), ids.end());
        by_campaign_[merged.campaign_id].push_back(ev.task_id);
      }
      it->second.record = std::move(merged);
      it->second.doc = it->second.record.to_json();
      if (entities_changed || campaign_changed) index_record_entities(it->second.record);
    } else {
      Entry entry{std::move(merged), Json()};
      entry.doc = entry.record.to_json();
      auto [slot, _] = records_.emplace(ev.task_id, std::move(entry));
      insertion_order_.push_back(ev.task_id);
      by_campaign_[slot->second.record.campaign_id].push_back(ev.task_id);
      index_record_entities(slot->second.record);
    }

    const TaskRecord& now = records_.at(ev.task_id).record;
    if (is_terminal(now.status) && (!was_terminal || entities_changed)) {
      if (candidate_set.insert(ev.task_id).second) {
        outcome.link_candidates.push_back(ev.task_id);
      }
    }
    lines.push_back(ev.encode());
    outcome.applied += 1;
  }
  append_lines(events_fd_, lines);
  return outcome;
}

// ---------------------------------------------------------------------------
// Provenance linking
// ---------------------------------------------------------------------------

std::vector<ProvenanceLink> TaskStore::link_provenance(const std::string& task_id) {
  std::unique_lock lk(mu_);
  auto it = records_.find(task_id);
  if (it == records_.end()) return {};
  const TaskRecord& rec = it->second.record;

  std::vector<ProvenanceLink> fresh;
  auto try_add = [&](ProvenanceLink link) {
    if (link.producer_task_id == link.consumer_task_id) return;
    std::string key = link.producer_task_id + "\x1f" + link.consumer_task_id + "\x1f" +
                      link.entity_key + "\x1f" + link.entity_value_digest;
    if (!link_keys_.insert(key).second) return;
    links_by_producer_[link.producer_task_id].push_back(links_.size());
    links_by_consumer_[link.consumer_task_id].push_back(links_.size());
    links_.push_back(link);
    fresh.push_back(std::move(link));
  };

  // This task as consumer: its used entries vs other workflows' generated.
  for (auto& [k, v] : rec.used.items()) {
    if (!entity_eligible(rec.campaign_id, k, v)) continue;
    std::string digest = entity_digest(v);
    auto idx = digest_index_.find(rec.campaign_id + "\x1f" + digest);
    if (idx == digest_index_.end()) continue;
    for (const DigestEntry& e : idx->second) {
      if (!e.generated || e.workflow_id == rec.workflow_id) continue;
      try_add(ProvenanceLink{e.task_id, rec.task_id, e.key, digest});
    }
  }
  // This task as producer: its generated entries vs other workflows' used.
  for (auto& [k, v] : rec.generated.items()) {
    if (!entity_eligible(rec.campaign_id, k, v)) continue;
    std::string digest = entity_digest(v);
    auto idx = digest_index_.find(rec.campaign_id + "\x1f" + digest);
    if (idx == digest_index_.end()) continue;
    for (const DigestEntry& e : idx->second) {
      if (e.generated || e.workflow_id == rec.workflow_id) continue;
      try_add(ProvenanceLink{rec.task_id, e.task_id, k, digest});
    }
  }

  if (!fresh.empty()) {
    std::vector<std::string> lines;
    lines.reserve(fresh.size());
    for (const auto& l : fresh) lines.push_back(l.to_json().dump());
    append_lines(links_fd_, lines);
  }
  return fresh;
}

// ---------------------------------------------------------------------------
// Reads
// ---------------------------------------------------------------------------

std::optional<TaskRecord> TaskStore::get(const std::string& task_id) const {
  std::shared_lock lk(mu_);
  auto it = records_.find(task_id);
  if (it == records_.end()) return std::nullopt;
  return it->second.record;
}

std::size_t TaskStore::size() const {
  std::shared_lock lk(mu_);
  return records_.size();
}

std::vector<ProvenanceLink> TaskStore::links() const {
  std::shared_lock lk(mu_);
  return links_;
}

std::vector<Json> TaskStore::all_documents() const {
  std::shared_lock lk(mu_);
  std::vector<Json> out;
  out.reserve(insertion_order_.size());
  for (const auto& id : insertion_order_) out.push_back(records_.at(id).doc);
  return out;
}

std::vector<TaskRecord> TaskStore::records_in_campaign(const std::string& campaign_id) const {
  std::shared_lock lk(mu_);
  std::vector<TaskRecord> out;
  auto it = by_campaign_.find(campaign_id);
  if (it == by_campaign_.end()) return out;
  out.reserve(it->second.size());
  for (const auto& id : it->second) out.push_back(records_.at(id).record);
  return out;
}

QueryResult TaskStore::query(const QuerySpec& spec) const {
  std::shared_lock lk(mu_);
  std::vector<const Json*> docs;
  docs.reserve(insertion_order_.size());
  for (const auto& id : insertion_order_) docs.push_back(&records_.at(id).doc);
  return run_query_pipeline(docs, spec);
}

// ---------------------------------------------------------------------------
// Lineage traversal
// ---------------------------------------------------------------------------

std::vector<LineageEdge> TaskStore::neighbor_edges(const TaskRecord& rec,
                                                   LineageDirection direction) const {
  std::vector<LineageEdge> out;
  if (direction == LineageDirection::Backward) {
    if (auto it = links_by_consumer_.find(rec.task_id); it != links_by_consumer_.end()) {
      for (std::size_t i : it->second) {
        const auto& l = links_[i];
        out.push_back(LineageEdge{l.producer_task_id, l.consumer_task_id, l.entity_key,
                                  l.entity_value_digest, true});
      }
    }
    // Same-workflow digest matches: tasks whose generated entry equals one of
    // ours in used.
    for (auto& [k, v] : rec.used.items()) {
      if (!entity_eligible(rec.campaign_id, k, v)) continue;
      std::string digest = entity_digest(v);
      auto idx = digest_index_.find(rec.campaign_id + "\x1f" + digest);
      if (idx == digest_index_.end()) continue;
      for (const DigestEntry& e : idx->second) {
        if (!e.generated || e.workflow_id != rec.workflow_id || e.task_id == rec.task_id) continue;
        out.push_back(LineageEdge{e.task_id, rec.task_id, e.key, digest, false});
      }
    }
  } else {
    if (auto it = links_by_producer_.find(rec.task_id); it != links_by_producer_.end()) {
      for (std::size_t i : it->second) {
        const auto& l = links_[i];
        out.push_back(LineageEdge{l.producer_task_id, l.consumer_task_id, l.entity_key,
                                  l.entity_value_digest, true});
      }
    }
    for (auto& [k, v] : rec.generated.items()) {
      if (!entity_eligible(rec.campaign_id, k, v)) continue;
      std::string digest = entity_digest(v);
      auto idx = digest_index_.find(rec.campaign_id + "\x1f" + digest);
      if (idx == digest_index_.end()) continue;
      for (const DigestEntry& e : idx->second) {
        if (e.generated || e.workflow_id != rec.workflow_id || e.task_id == rec.task_id) continue;
        out.push_back(LineageEdge{rec.task_id, e.task_id, k, digest, false});
      }
    }
  }
  return out;
}

LineageGraph TaskStore::traverse_lineage(const std::string& task_id, LineageDirection direction,
                                         std::size_t max_depth) const {
  std::shared_lock lk(mu_);
  auto start = records_.find(task_id);
  if (start == records_.end()) throw UnknownTask(task_id);

  LineageGraph graph;
  std::unordered_set<std::string> seen_nodes;
  std::unordered_set<std::string> seen_edges;
  std::deque<std::pair<std::string, std::size_t>> frontier;

  graph.nodes.push_back(start->second.record);
  seen_nodes.insert(task_id);
  frontier.emplace_back(task_id, 0);

  while (!frontier.empty()) {
    auto [id, depth] = frontier.front();
    frontier.pop_front();
    if (depth >= max_depth) continue;
    const TaskRecord& rec = records_.at(id).record;
    for (LineageEdge& edge : neighbor_edges(rec, direction)) {
      std::string edge_key = edge.producer_task_id + "\x1f" + edge.consumer_task_id + "\x1f" +
                             edge.entity_key + "\x1f" + edge.entity_value_digest;
      if (seen_edges.insert(edge_key).second) graph.edges.push_back(edge);
      const std::string& next =
          direction == LineageDirection::Backward ? edge.producer_task_id : edge.consumer_task_id;
      auto rec_it = records_.find(next);
      if (rec_it == records_.end()) continue;
      if (seen_nodes.insert(next).second) {
        graph.nodes.push_back(rec_it->second.record);
        frontier.emplace_back(next, depth + 1);
      }
    }
  }
  return graph;
}

}  // namespace provmesh
