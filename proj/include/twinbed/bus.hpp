#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "twinbed/core.hpp"

namespace twinbed {

// Topic names shared by every producer and consumer.
namespace topics {
inline constexpr std::string_view kPlantState = "plant.state";
inline constexpr std::string_view kPlantCommand = "plant.command";
inline constexpr std::string_view kPlantCamera = "plant.camera";
inline constexpr std::string_view kTwinState = "twin.state";
inline constexpr std::string_view kModelSnapshot = "model.snapshot";
inline constexpr std::string_view kControlSetpoint = "control.setpoint";
}  // namespace topics

inline constexpr std::size_t kMaxFrameFields = 16;
inline constexpr std::size_t kDefaultTopicCapacity = 8192;

/// One telemetry or command message in the hexadecimal short coding.
///
/// Wire layout (uppercase hex, no separators):
///   msg_type(2) robot_id(2) seq(4) timestamp(8) count(2) field*count(4) checksum(2)
/// Fields are 16-bit two's complement. The checksum is the XOR of every
/// preceding byte.
struct Frame {
  std::uint8_t msg_type = 0;
  std::uint8_t robot_id = 0;
  std::uint16_t seq = 0;
  std::uint32_t timestamp = 0;  // ms
  std::vector<std::int16_t> fields;
  std::uint8_t checksum = 0;

  std::uint8_t compute_checksum() const;
  bool checksum_ok() const { return checksum == compute_checksum(); }
  /// Recomputes the checksum; returns *this for chaining.
  Frame& seal();

  friend bool operator==(const Frame&, const Frame&) = default;
};

/// Physical value -> 16-bit fixed point with 0.1 resolution (value * 10).
/// Throws FieldOverflow when |value * 10| exceeds 32767.
std::int16_t pack_fixed(double physical);
double unpack_fixed(std::int16_t raw);

std::string encode_frame(const Frame& frame);
/// Throws MalformedFrame or ChecksumMismatch.
Frame decode_frame(std::string_view hex);

/// Read position of one consumer on one topic: the publication index of the
/// last frame it consumed (0 before the first).
struct Cursor {
  std::uint64_t position = 0;
};

/// A bounded FIFO ring of frames. Publication assigns the sequence number;
/// consumers hold independent cursors and never block producers.
class Topic {
 public:
  Topic(std::string name, std::size_t capacity);

  const std::string& name() const { return name_; }
  std::size_t capacity() const { return capacity_; }

  /// Appends the frame, assigns seq (16-bit wrap of the publication index)
  /// and evicts the oldest frame when full. Returns the publication index.
  /// Throws ChecksumMismatch if the incoming frame is not sealed.
  std::uint64_t publish(Frame frame, std::uint64_t global_index = 0);
  /// Publishes several frames with no other frame interleaved between them.
  std::uint64_t publish_batch(std::vector<Frame> frames, std::atomic<std::uint64_t>* global = nullptr);

  /// Next frame after the cursor, or nothing. Throws CursorLagged when the
  /// cursor points behind the eviction horizon.
  std::optional<Frame> consume(Cursor& cursor) const;

  struct Entry {
    std::uint64_t index;
    std::uint64_t global_index;
    Frame frame;
  };
  /// Every retained entry with index > after, oldest first.
  std::vector<Entry> entries_after(std::uint64_t after) const;

  std::uint64_t published() const;
  /// Index of the oldest retained frame (published()+1 when empty).
  std::uint64_t first_retained() const;

 private:
  std::uint64_t append_locked(Frame frame, std::uint64_t global_index);

  std::string name_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::deque<Entry> ring_;
  std::uint64_t published_ = 0;
};

/// The in-memory database: a registry of named topics.
class Bus {
 public:
  explicit Bus(std::size_t default_capacity = kDefaultTopicCapacity)
      : default_capacity_(default_capacity) {}

  Topic& topic(std::string_view name);
  Topic& create_topic(std::string_view name, std::size_t capacity);
  std::vector<std::string> topic_names() const;

  std::uint64_t publish(std::string_view name, Frame frame);
  std::uint64_t publish_batch(std::string_view name, std::vector<Frame> frames);
  std::optional<Frame> consume(std::string_view name, Cursor& cursor);

 private:
  std::size_t default_capacity_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::unique_ptr<Topic>, std::less<>> topics_;
  std::atomic<std::uint64_t> global_{0};
};

// ---------------------------------------------------------------------------
// Disk persistence.
// ---------------------------------------------------------------------------

/// One line of the append-only disk log: `{timestamp},{topic},{hex frame}`.
struct LogRecord {
  std::uint32_t timestamp = 0;
  std::string topic;
  Frame frame;
};

/// True when `topic` matches a comma-separated filter of names and `prefix*`
/// patterns. An empty filter or "*" matches everything.
bool topic_matches(std::string_view filter, std::string_view topic);

/// Appends every not-yet-persisted frame of the matching topics to `path` in
/// publication order, plus a decoded sidecar at `path` + ".decoded". Progress
/// is committed to `path` + ".marker"; on the next call both files are cut
/// back to the committed size before appending, so an interrupted write
/// never leaves duplicate or torn records. `max_records` bounds one call.
/// Returns the number of records written. Throws IoFailure, CursorLagged.
std::size_t persist_log(Bus& bus, std::string_view filter, const std::filesystem::path& path,
                        std::size_t max_records = SIZE_MAX);

/// Parses a disk log. Throws IoFailure, MalformedFrame, ChecksumMismatch.
std::vector<LogRecord> read_log(const std::filesystem::path& path);

std::string describe_frame(const Frame& frame);

}  // namespace twinbed
