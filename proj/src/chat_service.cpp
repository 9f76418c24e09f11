#include "hsdial/chat_service.hpp"

#include "hsdial/eval.hpp"
#include "hsdial/training.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <random>

namespace hsdial {

// -- registry -----------------------------------------------------------------

void ModelRegistry::add(const std::string& id, RegisteredModel m) {
  if (!m.model || !m.tokenizer) throw std::invalid_argument("registry entry needs a model and a tokenizer");
  models_[id] = std::move(m);
}

const RegisteredModel& ModelRegistry::get(const std::string& id) const {
  auto it = models_.find(id);
  if (it == models_.end()) throw ServiceError(404, "unknown model id: " + id);
  return it->second;
}

std::vector<std::string> ModelRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, m] : models_) out.push_back(id);
  return out;
}

ModelRegistry ModelRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model registry " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad model registry: " + std::string(e.what()));
  }
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  ModelRegistry r;
  for (const auto& m : j.at("models")) {
    auto loaded = load_model(resolve(m.at("checkpoint").get<std::string>()));
    auto tok = std::make_shared<WhitespaceTokenizer>(loaded.vocab);
    r.add(m.at("id").get<std::string>(), {std::make_shared<Transformer>(std::move(loaded.model)), tok});
  }
  if (j.contains("classifier") && !j.at("classifier").is_null()) {
    auto c = load_classifier(resolve(j.at("classifier").get<std::string>()));
    r.set_classifier(std::make_shared<EncoderClassifier>(std::move(c.classifier)));
  }
  return r;
}

// -- serialization ------------------------------------------------------------

namespace {

std::string mode_name(SessionMode m) { return m == SessionMode::single ? "single" : "side_by_side"; }

SessionMode mode_from(const std::string& s) {
  if (s == "single") return SessionMode::single;
  if (s == "side_by_side") return SessionMode::side_by_side;
  throw ServiceError(400, "unknown session mode: " + s);
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string padded(const char* prefix, std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%06llu", prefix, static_cast<unsigned long long>(n));
  return buf;
}

bool valid_grade(int g) { return g == 0 || g == 1 || g == 2; }

}  // namespace

nlohmann::json to_json(const Session& s, bool reveal_models) {
  nlohmann::json lanes = nlohmann::json::array();
  for (const auto& l : s.lanes) {
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : l.turns)
      turns.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}, {"truncated", t.truncated}});
    nlohmann::json lj = {{"label", l.label}, {"turns", turns}};
    if (reveal_models) lj["model_id"] = l.model_id;
    lanes.push_back(std::move(lj));
  }
  return {{"id", s.id},
          {"mode", mode_name(s.mode)},
          {"status", s.status == SessionStatus::open ? "open" : "complete"},
          {"created_at", s.created_at},
          {"seed", s.seed},
          {"rerank", s.rerank},
          {"turn_limit", s.turn_limit},
          {"human_turns", s.human_turns},
          {"version", s.version},
          {"lanes", lanes}};
}

Session session_from_json(const nlohmann::json& j) {
  Session s;
  s.id = j.at("id").get<std::string>();
  s.mode = mode_from(j.at("mode").get<std::string>());
  s.status = j.at("status").get<std::string>() == "open" ? SessionStatus::open : SessionStatus::complete;
  s.created_at = j.value("created_at", "");
  s.seed = j.value("seed", std::uint64_t{0});
  s.rerank = j.value("rerank", false);
  s.turn_limit = j.value("turn_limit", 10);
  s.human_turns = j.value("human_turns", 0);
  s.version = j.value("version", std::uint64_t{0});
  for (const auto& lj : j.at("lanes")) {
    Lane l;
    l.label = lj.at("label").get<std::string>();
    if (!lj.contains("model_id")) throw DataError("session " + s.id + " lacks lane model ids (masked export?)");
    l.model_id = lj.at("model_id").get<std::string>();
    for (const auto& tj : lj.at("turns"))
      l.turns.push_back({speaker_from_string(tj.at("speaker").get<std::string>()), tj.at("text").get<std::string>(),
                         tj.value("truncated", false)});
    s.lanes.push_back(std::move(l));
  }
  return s;
}

nlohmann::json to_json(const AnnotationRecord& a) {
  return {{"id", a.id},
          {"session_id", a.session_id},
          {"scope", a.scope},
          {"lane", a.lane},
          {"fluency", a.fluency},
          {"non_repetition", a.non_repetition},
          {"coherence", a.coherence},
          {"annotator", a.annotator},
          {"timestamp", a.timestamp},
          {"version", a.version}};
}

AnnotationRecord annotation_from_json(const nlohmann::json& j) {
  AnnotationRecord a;
  a.id = j.value("id", "");
  a.session_id = j.at("session_id").get<std::string>();
  a.scope = j.value("scope", "dialogue");
  a.lane = j.value("lane", "A");
  a.fluency = j.at("fluency").get<int>();
  a.non_repetition = j.at("non_repetition").get<int>();
  a.coherence = j.at("coherence").get<int>();
  a.annotator = j.value("annotator", "");
  a.timestamp = j.value("timestamp", "");
  a.version = j.value("version", std::uint64_t{1});
  return a;
}

// -- service ------------------------------------------------------------------

ChatService::ChatService(ModelRegistry registry, ServiceConfig cfg, std::filesystem::path store_dir)
    : registry_(std::move(registry)), cfg_(cfg), dir_(std::move(store_dir)) {
  if (!dir_.empty()) {
    std::filesystem::create_directories(dir_);
    replay();
  }
}

void ChatService::append(const std::string& file, const nlohmann::json& line) {
  if (dir_.empty()) return;
  std::ofstream o(dir_ / file, std::ios::app);
  if (!o) throw std::runtime_error("cannot append to " + (dir_ / file).string());
  o << line.dump() << '\n';
  o.flush();
}

void ChatService::replay() {
  auto each_line = [&](const std::string& file, auto&& fn) {
    std::ifstream in(dir_ / file);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        fn(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw DataError(file + ": " + e.what(), n);
      }
    }
  };
  each_line("sessions.jsonl", [&](const nlohmann::json& j) {
    auto s = session_from_json(j);
    auto e = std::make_shared<Entry>();
    e->session = s;
    sessions_[s.id] = e;
  });
  each_line("annotations.jsonl", [&](const nlohmann::json& j) {
    auto a = annotation_from_json(j);
    annotations_[a.id] = a;
  });
  auto counter = [](const std::string& id) -> std::uint64_t {
    const auto pos = id.find_first_of("0123456789");
    return pos == std::string::npos ? 0 : std::stoull(id.substr(pos));
  };
  for (const auto& [id, e] : sessions_) next_session_ = std::max(next_session_, counter(id) + 1);
  for (const auto& [id, a] : annotations_) next_annotation_ = std::max(next_annotation_, counter(id) + 1);
}

std::shared_ptr<ChatService::Entry> ChatService::entry(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown session: " + id);
  return it->second;
}

std::string ChatService::make_reply(const Session& s, const Lane& lane, std::size_t lane_index,
                                    bool& truncated) const {
  const auto& reg = registry_.get(lane.model_id);
  DialogueContext ctx;
  for (const auto& t : lane.turns) {
    Utterance u;
    u.tokens = reg.tokenizer->encode(t.text);
    u.speaker = t.speaker;
    u.provenance = t.speaker == Speaker::bot ? Provenance::predicted : Provenance::golden;
    ctx.utterances.push_back(std::move(u));
  }
  const auto budget = std::min(cfg_.max_input_tokens, reg.model->max_positions());
  truncated = ctx.flat_length() > budget;
  Utterance reply;
  if (s.rerank && registry_.classifier() && cfg_.decode.beam_size > 1) {
    reply = generate_with_rerank(*reg.model, *registry_.classifier(), ctx, cfg_.decode, cfg_.max_input_tokens);
  } else {
    std::mt19937_64 rng(derive_seed(s.seed, lane_index * 1000003u + static_cast<std::uint64_t>(s.human_turns)));
    reply.tokens = generate(*reg.model, model_input(ctx, cfg_.max_input_tokens, reg.model->max_positions()),
                            cfg_.decode, rng);
  }
  return reg.tokenizer->decode(reply.tokens);
}

Session ChatService::create_session(const CreateRequest& req) {
  const std::size_t want = req.mode == SessionMode::single ? 1 : 2;
  if (req.models.size() != want)
    throw ServiceError(400, mode_name(req.mode) + " mode needs " + std::to_string(want) + " model id(s)");
  for (const auto& m : req.models) registry_.get(m);

  auto e = std::make_shared<Entry>();
  Session& s = e->session;
  {
    std::lock_guard lock(mu_);
    s.id = padded("s", next_session_++);
  }
  s.mode = req.mode;
  s.seed = req.seed ? *req.seed : derive_seed(cfg_.seed, std::stoull(s.id.substr(1)));
  s.rerank = req.rerank;
  s.turn_limit = cfg_.turn_limit;
  s.created_at = now_iso();
  std::vector<std::string> order = req.models;
  // lane order is randomized per session and kept, so "A" does not reveal the model
  std::mt19937_64 rng(s.seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) s.lanes.push_back({std::string(1, char('A' + i)), order[i], {}});
  {
    std::lock_guard lock(mu_);
    sessions_[s.id] = e;
    append("sessions.jsonl", to_json(s, true));
  }
  if (req.prompt) post_utterance(s.id, *req.prompt);
  return get_session(s.id);
}

std::vector<LaneReply> ChatService::post_utterance(const std::string& session_id, const std::string& text) {
  auto e = entry(session_id);
  std::lock_guard session_lock(e->mu);
  Session s = e->session;
  if (s.status != SessionStatus::open) throw ServiceError(409, "session " + session_id + " is complete");
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ServiceError(400, "empty utterance");

  std::vector<LaneReply> replies;
  for (std::size_t i = 0; i < s.lanes.size(); ++i) {
    auto& lane = s.lanes[i];
    lane.turns.push_back({Speaker::human, text, false});
    bool truncated = false;
    const auto reply = make_reply(s, lane, i, truncated);
    lane.turns.push_back({Speaker::bot, reply, truncated});
    replies.push_back({lane.label, reply, truncated});
  }
  ++s.human_turns;
  if (s.human_turns >= s.turn_limit) s.status = SessionStatus::complete;
  ++s.version;
  {
    std::lock_guard lock(mu_);
    append("sessions.jsonl", to_json(s, true));
  }
  e->session = std::move(s);
  return replies;
}

std::string ChatService::submit_annotation(AnnotationRecord record) {
  for (int g : {record.fluency, record.non_repetition, record.coherence})
    if (!valid_grade(g)) throw ServiceError(400, "grades must be 0, 1 or 2");
  const auto session = get_session(record.session_id);
  const bool lane_ok = std::any_of(session.lanes.begin(), session.lanes.end(),
                                   [&](const Lane& l) { return l.label == record.lane; });
  if (!lane_ok) throw ServiceError(400, "session " + record.session_id + " has no lane " + record.lane);
  if (record.timestamp.empty()) record.timestamp = now_iso();

  std::lock_guard lock(mu_);
  record.version = 1;
  record.id.clear();
  for (const auto& [id, a] : annotations_) {
    if (a.session_id == record.session_id && a.scope == record.scope && a.annotator == record.annotator &&
        a.lane == record.lane) {
      record.id = id;
      record.version = a.version + 1;
    }
  }
  if (record.id.empty()) record.id = padded("a", next_annotation_++);
  annotations_[record.id] = record;
  append("annotations.jsonl", to_json(record));
  return record.id;
}

Session ChatService::get_session(const std::string& session_id) const {
  auto e = entry(session_id);
  std::lock_guard lock(e->mu);
  return e->session;
}

std::vector<AnnotationRecord> ChatService::annotations(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  std::vector<AnnotationRecord> out;
  for (const auto& [id, a] : annotations_)
    if (a.session_id == session_id) out.push_back(a);
  return out;
}

std::vector<Session> ChatService::sessions() const {
  std::vector<std::shared_ptr<Entry>> entries;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, e] : sessions_) entries.push_back(e);
  }
  std::vector<Session> out;
  for (const auto& e : entries) {
    std::lock_guard lock(e->mu);
    out.push_back(e->session);
  }
  return out;
}

nlohmann::json ChatService::export_bundle(bool reveal_models) const {
  const auto all = sessions();
  nlohmann::json sj = nlohmann::json::array();
  std::map<std::string, std::map<std::string, std::string>> lane_owner;  // session -> lane -> model
  for (const auto& s : all) {
    sj.push_back(to_json(s, reveal_models));
    for (const auto& l : s.lanes) lane_owner[s.id][l.label] = l.model_id;
  }
  nlohmann::json aj = nlohmann::json::array();
  struct Sum {
    double fluency = 0, non_repetition = 0, coherence = 0;
    std::size_t n = 0;
  };
  std::map<std::string, Sum> sums;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, a] : annotations_) {
      aj.push_back(to_json(a));
      const auto key = reveal_models ? lane_owner[a.session_id][a.lane] : a.lane;
      auto& s = sums[key];
      s.fluency += a.fluency;
      s.non_repetition += a.non_repetition;
      s.coherence += a.coherence;
      ++s.n;
    }
  }
  nlohmann::json means = nlohmann::json::object();
  for (const auto& [key, s] : sums) {
    const double n = static_cast<double>(s.n);
    means[key] = {{"fluency", s.fluency / n},
                  {"non_repetition", s.non_repetition / n},
                  {"coherence", s.coherence / n},
                  {"annotations", s.n}};
  }
  return {{"sessions", sj}, {"annotations", aj}, {"mean_grades", means}, {"models_revealed", reveal_models}};
}

void ChatService::import_bundle(const nlohmann::json& bundle) {
  std::lock_guard lock(mu_);
  if (!sessions_.empty() || !annotations_.empty()) throw ServiceError(409, "import needs an empty store");
  for (const auto& sj : bundle.at("sessions")) {
    auto e = std::make_shared<Entry>();
    e->session = session_from_json(sj);
    const auto& s = e->session;
    sessions_[s.id] = e;
    append("sessions.jsonl", to_json(s, true));
    next_session_ = std::max<std::uint64_t>(next_session_, std::stoull(s.id.substr(1)) + 1);
  }
  for (const auto& aj : bundle.at("annotations")) {
    auto a = annotation_from_json(aj);
    annotations_[a.id] = a;
    append("annotations.jsonl", to_json(a));
    next_annotation_ = std::max<std::uint64_t>(next_annotation_, std::stoull(a.id.substr(1)) + 1);
  }
}

// -- HTTP ---------------------------------------------------------------------

namespace {

void reply_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Fn>
auto guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ServiceError& e) {
      reply_json(res, e.status(), {{"error", e.what()}});
    } catch (const nlohmann::json::exception& e) {
      reply_json(res, 400, {{"error", std::string("bad request body: ") + e.what()}});
    } catch (const DataError& e) {
      reply_json(res, 400, {{"error", e.what()}});
    } catch (const std::exception& e) {
      reply_json(res, 500, {{"error", e.what()}});
    }
  };
}

nlohmann::json body_of(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(req.body);
}

nlohmann::json replies_json(const std::vector<LaneReply>& replies) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : replies) out.push_back({{"lane", r.lane}, {"text", r.text}, {"truncated", r.truncated}});
  return out;
}

}  // namespace

void mount_routes(httplib::Server& server, ChatService& service) {
  server.Post("/sessions", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                const auto j = body_of(req);
                CreateRequest cr;
                if (j.contains("models")) {
                  cr.models = j.at("models").get<std::vector<std::string>>();
                } else if (j.contains("model")) {
                  cr.models = {j.at("model").get<std::string>()};
                }
                cr.mode = mode_from(j.value("mode", "single"));
                if (j.contains("prompt") && !j.at("prompt").is_null()) cr.prompt = j.at("prompt").get<std::string>();
                if (j.contains("seed") && !j.at("seed").is_null()) cr.seed = j.at("seed").get<std::uint64_t>();
                cr.rerank = j.value("rerank", false);
                const auto s = service.create_session(cr);
                reply_json(res, 201, to_json(s, false));
              }));
  server.Post(R"(/sessions/([^/]+)/utterance)",
              guarded([&service](const httplib::Request& req, httplib::Response& res) {
                const auto j = body_of(req);
                const auto id = req.matches[1].str();
                const auto replies = service.post_utterance(id, j.at("text").get<std::string>());
                reply_json(res, 200, {{"replies", replies_json(replies)}, {"session", to_json(service.get_session(id), false)}});
              }));
  server.Post(R"(/sessions/([^/]+)/annotation)",
              guarded([&service](const httplib::Request& req, httplib::Response& res) {
                auto j = body_of(req);
                j["session_id"] = req.matches[1].str();
                for (const char* k : {"fluency", "non_repetition", "coherence"})
                  if (!j.contains(k) || !j.at(k).is_number_integer())
                    throw ServiceError(400, std::string("missing or non-integer grade: ") + k);
                const auto id = service.submit_annotation(annotation_from_json(j));
                for (const auto& a : service.annotations(req.matches[1].str()))
                  if (a.id == id) return reply_json(res, 201, to_json(a));
              }));
  server.Get(R"(/sessions/([^/]+))", guarded([&service](const httplib::Request& req, httplib::Response& res) {
               const auto id = req.matches[1].str();
               auto j = to_json(service.get_session(id), false);
               nlohmann::json anns = nlohmann::json::array();
               for (const auto& a : service.annotations(id)) anns.push_back(to_json(a));
               j["annotations"] = anns;
               reply_json(res, 200, j);
             }));
  server.Get("/export", guarded([&service](const httplib::Request& req, httplib::Response& res) {
               const bool reveal = req.has_param("reveal") && req.get_param_value("reveal") == "1";
               reply_json(res, 200, service.export_bundle(reveal));
             }));
}

}  // namespace hsdial
