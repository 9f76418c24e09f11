#pragma once

// Live human-bot sessions and side-by-side annotation. Sessions and grades are
// persisted as append-only JSONL logs; replaying the logs rebuilds the store.

#include "hsdial/coherence.hpp"
#include "hsdial/corpus.hpp"
#include "hsdial/decoding.hpp"
#include "hsdial/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace hsdial {

class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct RegisteredModel {
  std::shared_ptr<const DialogueModel> model;
  std::shared_ptr<const Tokenizer> tokenizer;
};

class ModelRegistry {
 public:
  void add(const std::string& id, RegisteredModel m);
  const RegisteredModel& get(const std::string& id) const;  // ServiceError 404 when unknown
  bool contains(const std::string& id) const { return models_.count(id) > 0; }
  std::vector<std::string> ids() const;

  void set_classifier(std::shared_ptr<const CoherenceClassifier> c) { classifier_ = std::move(c); }
  const CoherenceClassifier* classifier() const { return classifier_.get(); }

  /// {"models": [{"id": ..., "checkpoint": ...}], "classifier": optional path};
  /// relative paths resolve against the registry file's directory.
  static ModelRegistry load(const std::filesystem::path& path);

 private:
  std::map<std::string, RegisteredModel> models_;
  std::shared_ptr<const CoherenceClassifier> classifier_;
};

enum class SessionMode { single, side_by_side };
enum class SessionStatus { open, complete };

struct ChatTurn {
  Speaker speaker = Speaker::human;
  std::string text;
  bool truncated = false;  // context exceeded the input budget when this reply was made
};

struct Lane {
  std::string label;  // "A" / "B"
  std::string model_id;
  std::vector<ChatTurn> turns;
};

struct Session {
  std::string id;
  SessionMode mode = SessionMode::single;
  std::vector<Lane> lanes;  // in randomized, recorded order
  SessionStatus status = SessionStatus::open;
  std::string created_at;
  std::uint64_t seed = 0;
  bool rerank = false;
  int turn_limit = 10;
  int human_turns = 0;
  std::uint64_t version = 0;
};

struct AnnotationRecord {
  std::string id;
  std::string session_id;
  std::string scope = "dialogue";  // or "turn:<n>"
  std::string lane = "A";
  int fluency = 0;
  int non_repetition = 0;
  int coherence = 0;
  std::string annotator;
  std::string timestamp;
  std::uint64_t version = 1;
};

struct ServiceConfig {
  int turn_limit = 10;
  DecodeConfig decode;
  std::size_t max_input_tokens = 512;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const Session& s, bool reveal_models);
Session session_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AnnotationRecord& a);
AnnotationRecord annotation_from_json(const nlohmann::json& j);

struct CreateRequest {
  std::vector<std::string> models;  // one, or two for side_by_side
  SessionMode mode = SessionMode::single;
  std::optional<std::string> prompt;  // posted as the first human turn
  std::optional<std::uint64_t> seed;
  bool rerank = false;
};

struct LaneReply {
  std::string lane;
  std::string text;
  bool truncated = false;
};

class ChatService {
 public:
  /// An empty `store_dir` keeps everything in memory.
  ChatService(ModelRegistry registry, ServiceConfig cfg, std::filesystem::path store_dir = {});

  Session create_session(const CreateRequest& req);
  std::vector<LaneReply> post_utterance(const std::string& session_id, const std::string& text);
  std::string submit_annotation(AnnotationRecord record);
  Session get_session(const std::string& session_id) const;
  std::vector<AnnotationRecord> annotations(const std::string& session_id) const;
  std::vector<Session> sessions() const;

  /// Sessions, current annotations and mean grades per model (per lane label
  /// when masked).
  nlohmann::json export_bundle(bool reveal_models) const;
  /// Loads a revealed export into an empty store.
  void import_bundle(const nlohmann::json& bundle);

  const ModelRegistry& registry() const { return registry_; }

 private:
  struct Entry {
    Session session;
    mutable std::mutex mu;
  };

  void replay();
  void append(const std::string& file, const nlohmann::json& line);
  std::string make_reply(const Session& s, const Lane& lane, std::size_t lane_index, bool& truncated) const;
  std::shared_ptr<Entry> entry(const std::string& id) const;

  ModelRegistry registry_;
  ServiceConfig cfg_;
  std::filesystem::path dir_;
  mutable std::mutex mu_;  // guards the maps and the log files
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::map<std::string, AnnotationRecord> annotations_;  // by record id
  std::uint64_t next_session_ = 1;
  std::uint64_t next_annotation_ = 1;
};

/// Registers POST /sessions, POST /sessions/{id}/utterance,
/// POST /sessions/{id}/annotation, GET /sessions/{id} and GET /export.
void mount_routes(httplib::Server& server, ChatService& service);

}  // namespace hsdial
