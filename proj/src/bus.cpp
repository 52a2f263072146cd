#include "twinbed/bus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace twinbed {
namespace {

constexpr char kHexDigits[] = "0123456789ABCDEF";

void put_hex(std::string& out, std::uint64_t value, int nibbles) {
  for (int i = nibbles - 1; i >= 0; --i) {
    out.push_back(kHexDigits[(value >> (4 * i)) & 0xF]);
  }
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::uint64_t take_hex(std::string_view s, std::size_t& pos, int nibbles) {
  std::uint64_t v = 0;
  for (int i = 0; i < nibbles; ++i) {
    const int d = hex_value(s[pos++]);
    if (d < 0) throw MalformedFrame("non-hex character at offset " + std::to_string(pos - 1));
    v = (v << 4) | static_cast<std::uint64_t>(d);
  }
  return v;
}

// Header: type, id, seq(2), timestamp(4), count = 9 bytes; trailer: checksum.
constexpr std::size_t kHeaderChars = 18;
constexpr std::size_t kChecksumChars = 2;

}  // namespace

std::uint8_t Frame::compute_checksum() const {
  std::uint8_t x = msg_type ^ robot_id;
  x ^= static_cast<std::uint8_t>(seq >> 8) ^ static_cast<std::uint8_t>(seq);
  for (int shift = 24; shift >= 0; shift -= 8) {
    x ^= static_cast<std::uint8_t>(timestamp >> shift);
  }
  x ^= static_cast<std::uint8_t>(fields.size());
  for (std::int16_t f : fields) {
    const auto u = static_cast<std::uint16_t>(f);
    x ^= static_cast<std::uint8_t>(u >> 8) ^ static_cast<std::uint8_t>(u);
  }
  return x;
}

Frame& Frame::seal() {
  checksum = compute_checksum();
  return *this;
}

std::int16_t pack_fixed(double physical) {
  const double scaled = std::round(physical * 10.0);
  if (!std::isfinite(scaled) || std::abs(scaled) > 32767.0) {
    throw FieldOverflow("value " + std::to_string(physical) + " does not fit 16-bit x10");
  }
  return static_cast<std::int16_t>(scaled);
}

double unpack_fixed(std::int16_t raw) { return static_cast<double>(raw) / 10.0; }

std::string encode_frame(const Frame& f) {
  if (f.fields.size() > kMaxFrameFields) {
    throw MalformedFrame("frame carries " + std::to_string(f.fields.size()) + " fields, max 16");
  }
  std::string out;
  out.reserve(kHeaderChars + 4 * f.fields.size() + kChecksumChars);
  put_hex(out, f.msg_type, 2);
  put_hex(out, f.robot_id, 2);
  put_hex(out, f.seq, 4);
  put_hex(out, f.timestamp, 8);
  put_hex(out, f.fields.size(), 2);
  for (std::int16_t v : f.fields) put_hex(out, static_cast<std::uint16_t>(v), 4);
  put_hex(out, f.checksum, 2);
  return out;
}

Frame decode_frame(std::string_view hex) {
  if (hex.size() < kHeaderChars + kChecksumChars || hex.size() % 2 != 0) {
    throw MalformedFrame("bad frame length " + std::to_string(hex.size()));
  }
  std::size_t pos = 0;
  Frame f;
  f.msg_type = static_cast<std::uint8_t>(take_hex(hex, pos, 2));
  f.robot_id = static_cast<std::uint8_t>(take_hex(hex, pos, 2));
  f.seq = static_cast<std::uint16_t>(take_hex(hex, pos, 4));
  f.timestamp = static_cast<std::uint32_t>(take_hex(hex, pos, 8));
  const auto count = static_cast<std::size_t>(take_hex(hex, pos, 2));
  if (count > kMaxFrameFields) throw MalformedFrame("field count " + std::to_string(count));
  if (hex.size() != kHeaderChars + 4 * count + kChecksumChars) {
    throw MalformedFrame("length does not match field count");
  }
  f.fields.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    f.fields.push_back(static_cast<std::int16_t>(static_cast<std::uint16_t>(take_hex(hex, pos, 4))));
  }
  f.checksum = static_cast<std::uint8_t>(take_hex(hex, pos, 2));
  if (!f.checksum_ok()) throw ChecksumMismatch("frame checksum does not match contents");
  return f;
}

// ---------------------------------------------------------------------------

Topic::Topic(std::string name, std::size_t capacity) : name_(std::move(name)), capacity_(capacity) {
  if (capacity_ == 0) throw ConfigInvalid("topic capacity must be >= 1");
}

std::uint64_t Topic::append_locked(Frame frame, std::uint64_t global_index) {
  if (!frame.checksum_ok()) {
    throw ChecksumMismatch("refusing to publish unsealed frame on " + name_);
  }
  const std::uint64_t index = ++published_;
  frame.seq = static_cast<std::uint16_t>(index & 0xFFFF);
  frame.seal();
  ring_.push_back({index, global_index, std::move(frame)});
  while (ring_.size() > capacity_) ring_.pop_front();
  return index;
}

std::uint64_t Topic::publish(Frame frame, std::uint64_t global_index) {
  std::lock_guard lock(mu_);
  return append_locked(std::move(frame), global_index);
}

std::uint64_t Topic::publish_batch(std::vector<Frame> frames, std::atomic<std::uint64_t>* global) {
  for (const auto& f : frames) {
    if (!f.checksum_ok()) throw ChecksumMismatch("refusing to publish unsealed frame on " + name_);
  }
  std::lock_guard lock(mu_);
  std::uint64_t last = published_;
  for (auto& f : frames) {
    const std::uint64_t g = global != nullptr ? ++*global : 0;
    last = append_locked(std::move(f), g);
  }
  return last;
}

std::optional<Frame> Topic::consume(Cursor& cursor) const {
  std::lock_guard lock(mu_);
  if (cursor.position >= published_) return std::nullopt;
  const std::uint64_t want = cursor.position + 1;
  const std::uint64_t first = ring_.empty() ? published_ + 1 : ring_.front().index;
  if (want < first) {
    throw CursorLagged(name_ + ": cursor " + std::to_string(cursor.position) +
                       " is behind the oldest retained frame " + std::to_string(first));
  }
  const auto& e = ring_[static_cast<std::size_t>(want - first)];
  cursor.position = want;
  return e.frame;
}

std::vector<Topic::Entry> Topic::entries_after(std::uint64_t after) const {
  std::lock_guard lock(mu_);
  std::vector<Entry> out;
  for (const auto& e : ring_) {
    if (e.index > after) out.push_back(e);
  }
  return out;
}

std::uint64_t Topic::published() const {
  std::lock_guard lock(mu_);
  return published_;
}

std::uint64_t Topic::first_retained() const {
  std::lock_guard lock(mu_);
  return ring_.empty() ? published_ + 1 : ring_.front().index;
}

// ---------------------------------------------------------------------------

Topic& Bus::topic(std::string_view name) {
  {
    std::shared_lock lock(mu_);
    if (auto it = topics_.find(name); it != topics_.end()) return *it->second;
  }
  return create_topic(name, default_capacity_);
}

Topic& Bus::create_topic(std::string_view name, std::size_t capacity) {
  std::unique_lock lock(mu_);
  auto it = topics_.find(name);
  if (it == topics_.end()) {
    it = topics_.emplace(std::string(name), std::make_unique<Topic>(std::string(name), capacity)).first;
  }
  return *it->second;
}

std::vector<std::string> Bus::topic_names() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [name, _] : topics_) out.push_back(name);
  return out;
}

std::uint64_t Bus::publish(std::string_view name, Frame frame) {
  Topic& t = topic(name);
  // The global index orders frames across topics for the disk log; it is
  // drawn inside a batch so that it follows publication order per topic.
  std::vector<Frame> one;
  one.push_back(std::move(frame));
  return t.publish_batch(std::move(one), &global_);
}

std::uint64_t Bus::publish_batch(std::string_view name, std::vector<Frame> frames) {
  return topic(name).publish_batch(std::move(frames), &global_);
}

std::optional<Frame> Bus::consume(std::string_view name, Cursor& cursor) {
  return topic(name).consume(cursor);
}

// ---------------------------------------------------------------------------

bool topic_matches(std::string_view filter, std::string_view topic) {
  if (filter.empty() || filter == "*") return true;
  std::size_t start = 0;
  while (start <= filter.size()) {
    std::size_t end = filter.find(',', start);
    if (end == std::string_view::npos) end = filter.size();
    std::string_view pat = filter.substr(start, end - start);
    if (!pat.empty() && pat.back() == '*') {
      if (topic.substr(0, pat.size() - 1) == pat.substr(0, pat.size() - 1)) return true;
    } else if (pat == topic) {
      return true;
    }
    start = end + 1;
  }
  return false;
}

std::string describe_frame(const Frame& f) {
  std::ostringstream os;
  os << "t=" << f.timestamp << " type=0x" << std::hex << std::uppercase
     << static_cast<int>(f.msg_type) << std::dec << " robot=" << static_cast<int>(f.robot_id)
     << " seq=" << f.seq << " fields=[";
  for (std::size_t i = 0; i < f.fields.size(); ++i) {
    if (i) os << ' ';
    os << f.fields[i];
  }
  os << ']';
  return os.str();
}

namespace {

struct Marker {
  std::uintmax_t log_bytes = 0;
  std::uintmax_t sidecar_bytes = 0;
  std::map<std::string, std::uint64_t> last_index;
};

std::filesystem::path with_suffix(const std::filesystem::path& p, const char* suffix) {
  auto out = p;
  out += suffix;
  return out;
}

Marker load_marker(const std::filesystem::path& path) {
  Marker m;
  std::ifstream in(path);
  if (!in) return m;
  std::string key;
  while (in >> key) {
    if (key == "log_bytes") {
      in >> m.log_bytes;
    } else if (key == "sidecar_bytes") {
      in >> m.sidecar_bytes;
    } else if (key == "topic") {
      std::string name;
      std::uint64_t idx = 0;
      in >> name >> idx;
      m.last_index[name] = idx;
    }
  }
  return m;
}

void store_marker(const std::filesystem::path& path, const Marker& m) {
  const auto tmp = with_suffix(path, ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoFailure("cannot write marker " + tmp.string());
    out << "log_bytes " << m.log_bytes << "\n";
    out << "sidecar_bytes " << m.sidecar_bytes << "\n";
    for (const auto& [name, idx] : m.last_index) out << "topic " << name << ' ' << idx << "\n";
    if (!out.flush()) throw IoFailure("cannot flush marker " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoFailure("cannot commit marker: " + ec.message());
}

void cut_to(const std::filesystem::path& p, std::uintmax_t bytes) {
  std::error_code ec;
  if (!std::filesystem::exists(p, ec)) {
    std::ofstream create(p);
    if (!create) throw IoFailure("cannot create " + p.string());
    return;
  }
  if (std::filesystem::file_size(p, ec) != bytes) {
    std::filesystem::resize_file(p, bytes, ec);
    if (ec) throw IoFailure("cannot truncate " + p.string() + ": " + ec.message());
  }
}

}  // namespace

std::size_t persist_log(Bus& bus, std::string_view filter, const std::filesystem::path& path,
                        std::size_t max_records) {
  const auto marker_path = with_suffix(path, ".marker");
  const auto sidecar_path = with_suffix(path, ".decoded");
  Marker marker = load_marker(marker_path);
  cut_to(path, marker.log_bytes);
  cut_to(sidecar_path, marker.sidecar_bytes);

  struct Pending {
    std::uint64_t global;
    std::uint64_t index;
    const std::string* topic;
    Frame frame;
  };
  std::vector<std::string> names = bus.topic_names();
  std::vector<Pending> pending;
  for (const auto& name : names) {
    if (!topic_matches(filter, name)) continue;
    Topic& t = bus.topic(name);
    const std::uint64_t after = marker.last_index[name];
    if (t.published() > after && t.first_retained() > after + 1) {
      throw CursorLagged("disk log fell behind topic " + name);
    }
    for (auto& e : t.entries_after(after)) {
      pending.push_back({e.global_index, e.index, &name, std::move(e.frame)});
    }
  }
  std::sort(pending.begin(), pending.end(),
            [](const Pending& a, const Pending& b) { return a.global < b.global; });
  if (pending.size() > max_records) pending.resize(max_records);

  std::ofstream log(path, std::ios::app | std::ios::binary);
  std::ofstream side(sidecar_path, std::ios::app | std::ios::binary);
  if (!log || !side) throw IoFailure("cannot open " + path.string() + " for append");
  for (const auto& p : pending) {
    log << p.frame.timestamp << ',' << *p.topic << ',' << encode_frame(p.frame) << '\n';
    side << *p.topic << ' ' << describe_frame(p.frame) << '\n';
    marker.last_index[*p.topic] = p.index;
  }
  log.flush();
  side.flush();
  if (!log || !side) throw IoFailure("write failed on " + path.string());
  log.close();
  side.close();

  std::error_code ec;
  marker.log_bytes = std::filesystem::file_size(path, ec);
  marker.sidecar_bytes = std::filesystem::file_size(sidecar_path, ec);
  if (ec) throw IoFailure("cannot stat " + path.string());
  store_marker(marker_path, marker);
  return pending.size();
}

std::vector<LogRecord> read_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open log " + path.string());
  std::vector<LogRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos) {
      throw MalformedFrame("log line " + std::to_string(lineno) + " lacks three columns");
    }
    LogRecord r;
    try {
      r.timestamp = static_cast<std::uint32_t>(std::stoul(line.substr(0, c1)));
    } catch (const std::exception&) {
      throw MalformedFrame("log line " + std::to_string(lineno) + " has a bad timestamp");
    }
    r.topic = line.substr(c1 + 1, c2 - c1 - 1);
    r.frame = decode_frame(std::string_view(line).substr(c2 + 1));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace twinbed
