#pragma once

// Simulated federated meta-training. Clients compute local first-order MAML
// gradients, encrypt them and post the serialized ciphertexts to an in-process
// channel. The server only ever sees ciphertext bytes: it sums them in
// ascending client-id order, decrypts the sum once and applies the meta step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <future>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "crowdtemp/errors.hpp"
#include "crowdtemp/meta.hpp"
#include "crowdtemp/nn.hpp"
#include "crowdtemp/paillier.hpp"

namespace crowdtemp {

struct ClientMessage {
  std::string client_id;
  std::uint64_t round = 0;
  bool opt_out = false;
  std::vector<unsigned char> payload;  // serialized EncryptedVector
};

/// Multi-producer queue standing in for the network.
class Channel {
 public:
  void send(ClientMessage m) {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(m));
  }

  std::vector<ClientMessage> drain() {
    std::lock_guard lock(mu_);
    std::vector<ClientMessage> out(std::make_move_iterator(queue_.begin()), std::make_move_iterator(queue_.end()));
    queue_.clear();
    return out;
  }

  std::size_t bytes_sent() const {
    std::lock_guard lock(mu_);
    return bytes_;
  }
  void count_bytes(std::size_t n) {
    std::lock_guard lock(mu_);
    bytes_ += n;
  }

 private:
  mutable std::mutex mu_;
  std::deque<ClientMessage> queue_;
  std::size_t bytes_ = 0;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed of the local task set a client draws in a given round.
inline std::uint64_t client_task_seed(std::uint64_t client_seed, std::uint64_t round) {
  return mix_seed(client_seed, round);
}

/// A client owns its data; nothing but ciphertext bytes leaves it.
class Client {
 public:
  Client(std::string id, std::vector<PhonePoints> data, std::size_t n_tasks, std::uint64_t seed)
      : id_(std::move(id)), data_(std::move(data)), n_tasks_(n_tasks), seed_(seed) {}

  const std::string& id() const { return id_; }
  std::size_t task_count() const { return n_tasks_; }

  bool has_enough_data(const MetaConfig& cfg) const {
    if (data_.empty()) return false;
    for (const auto& p : data_)
      if (p.points.size() < cfg.k_spt + cfg.k_qry) return false;
    return true;
  }

  /// Summed first-order query gradient over this round's local tasks,
  /// encrypted under pk. Zero local tasks yield an encrypted zero vector.
  EncryptedVector calculate(const ParamVector& theta, const PublicKey& pk, const MetaConfig& cfg,
                            std::uint64_t round, unsigned scale_bits = kDefaultScaleBits) const {
    GradientVector g(theta.layout_ptr());
    if (n_tasks_ > 0) {
      const auto tasks = build_task_set(data_, cfg.k_spt, cfg.k_qry, n_tasks_, client_task_seed(seed_, round));
      g = meta_batch_gradient(theta, tasks, cfg.alpha, cfg.inner_steps);
    }
    return Encryptor(pk, mix_seed(seed_ ^ 0x5a5a5a5aULL, round)).encrypt(g.values(), scale_bits);
  }

  void run_round(const ParamVector& theta, const PublicKey& pk, const MetaConfig& cfg, std::uint64_t round,
                 Channel& channel, unsigned scale_bits = kDefaultScaleBits) const {
    ClientMessage msg{id_, round, false, {}};
    if (!has_enough_data(cfg)) {
      msg.opt_out = true;
    } else {
      msg.payload = serialize(calculate(theta, pk, cfg, round, scale_bits));
      channel.count_bytes(msg.payload.size());
    }
    channel.send(std::move(msg));
  }

 private:
  std::string id_;
  std::vector<PhonePoints> data_;
  std::size_t n_tasks_;
  std::uint64_t seed_;
};

struct RoundRecord {
  std::uint64_t round = 0;
  std::vector<std::string> client_ids;  // participants, ascending
  std::vector<std::string> opted_out;
  bool skipped = false;
  std::uint64_t theta_checksum = 0;  // after the round
  std::size_t bytes = 0;
};

inline std::string transcript_line(const RoundRecord& r) {
  nlohmann::ordered_json j;
  j["round"] = r.round;
  j["client_ids"] = r.client_ids;
  j["theta_checksum"] = hex64(r.theta_checksum);
  return j.dump();
}

struct FedConfig {
  unsigned key_bits = 1024;
  std::uint64_t key_seed = 1;
  unsigned scale_bits = kDefaultScaleBits;
  std::size_t rounds = 3;
  bool parallel = false;
};

class FederatedServer {
 public:
  FederatedServer(KeyPair keys, ParamVector theta, MetaConfig meta)
      : keys_(std::move(keys)), theta_(std::move(theta)), meta_(meta) {
    validate(meta_);
    opt_ = make_meta_optimizer(meta_, theta_.layout());
  }

  const PublicKey& public_key() const { return keys_.pk; }
  const ParamVector& theta() const { return theta_; }
  const MetaConfig& meta_config() const { return meta_; }
  std::size_t decryptions() const { return keys_.sk.uses->load(); }
  const std::vector<RoundRecord>& transcript() const { return transcript_; }

  std::uint64_t next_round() const { return transcript_.size() + 1; }

  /// Consumes one round of client messages: sums the ciphertexts in ascending
  /// client-id order, decrypts once and takes the meta step. A round without
  /// participants leaves theta unchanged.
  const RoundRecord& aggregate(Channel& channel, std::size_t bytes_before = 0) {
    const std::uint64_t round = next_round();
    auto messages = channel.drain();
    std::sort(messages.begin(), messages.end(),
              [](const ClientMessage& a, const ClientMessage& b) { return a.client_id < b.client_id; });

    RoundRecord rec;
    rec.round = round;
    std::optional<EncryptedVector> sum;
    for (const auto& m : messages) {
      if (m.round != round) throw IntegrityError("federated round " + std::to_string(round) + ": stale message from " + m.client_id);
      if (m.opt_out) {
        rec.opted_out.push_back(m.client_id);
        continue;
      }
      auto ev = deserialize(m.payload);
      if (ev.size() != theta_.size())
        throw IntegrityError("federated round: client " + m.client_id + " sent " + std::to_string(ev.size()) +
                             " ciphertexts, expected " + std::to_string(theta_.size()));
      if (!sum)
        sum = std::move(ev);
      else
        add_into(keys_.pk, *sum, ev);
      rec.client_ids.push_back(m.client_id);
    }
    rec.bytes = channel.bytes_sent() - bytes_before;
    if (!sum) {
      rec.skipped = true;
    } else {
      GradientVector g(theta_.layout_ptr(), decrypt(keys_.sk, *sum));
      for (double v : g.values())
        if (!std::isfinite(v)) throw TrainingError("federated round " + std::to_string(round) + ": non-finite gradient");
      optimizer_step(opt_, theta_, g);
    }
    rec.theta_checksum = checksum(theta_);
    transcript_.push_back(std::move(rec));
    return transcript_.back();
  }

  void write_transcript(std::ostream& out) const {
    for (const auto& r : transcript_) out << transcript_line(r) << '\n';
  }

 private:
  KeyPair keys_;
  ParamVector theta_;
  MetaConfig meta_;
  OptimizerState opt_;
  std::vector<RoundRecord> transcript_;
};

/// One full round: broadcast theta, let every client post its message, then
/// aggregate on the server side of the channel.
inline const RoundRecord& federated_round(FederatedServer& server, std::span<const Client> clients, Channel& channel,
                                          bool parallel = false, unsigned scale_bits = kDefaultScaleBits) {
  const std::uint64_t round = server.next_round();
  const ParamVector broadcast = server.theta();
  const auto& pk = server.public_key();
  const auto& cfg = server.meta_config();
  const std::size_t bytes_before = channel.bytes_sent();
  if (parallel) {
    std::vector<std::future<void>> jobs;
    for (const auto& c : clients)
      jobs.push_back(std::async(std::launch::async, [&, round] { c.run_round(broadcast, pk, cfg, round, channel, scale_bits); }));
    for (auto& j : jobs) j.get();
  } else {
    for (const auto& c : clients) c.run_round(broadcast, pk, cfg, round, channel, scale_bits);
  }
  return server.aggregate(channel, bytes_before);
}

/// Plaintext reference for one round: theta - beta * sum over every client's
/// local task gradients, consumed in ascending client order.
inline ParamVector centralized_round(const ParamVector& theta, std::span<const std::vector<Task>> client_tasks,
                                     const MetaConfig& cfg) {
  GradientVector g(theta.layout_ptr());
  for (const auto& tasks : client_tasks)
    if (!tasks.empty()) accumulate(g, meta_batch_gradient(theta, tasks, cfg.alpha, cfg.inner_steps));
  ParamVector out = theta;
  auto opt = make_meta_optimizer(cfg, theta.layout());
  optimizer_step(opt, out, g);
  return out;
}

}  // namespace crowdtemp
