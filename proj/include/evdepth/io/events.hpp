#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "evdepth/core/error.hpp"
#include "evdepth/core/tensor.hpp"

namespace evdepth {

// One camera event: pixel, microsecond timestamp, polarity in {+1, -1}.
struct Event {
  int64_t t_us = 0;
  int x = 0;
  int y = 0;
  int p = +1;
};

inline bool operator==(const Event& a, const Event& b) {
  return a.t_us == b.t_us && a.x == b.x && a.y == b.y && a.p == b.p;
}

// Time-ordered events inside the window [t_start, t_end).
struct EventStream {
  int width = 0;
  int height = 0;
  int64_t t_start = 0;
  int64_t t_end = 0;
  std::vector<Event> events;
  int64_t dropped_out_of_bounds = 0;  // only populated in non-strict parsing
};

// Fixed-duration slice of a stream; index is 1-based, window is
// [t_begin, t_end) with t_end - t_begin == bin duration (trailing bin padded).
struct EventBin {
  int index = 1;
  int64_t t_begin = 0;
  int64_t t_end = 0;
  std::vector<Event> events;
};

enum class EventFormat { kCsv, kBinary };

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

inline void finalize_stream(EventStream& s, bool strict, const char* where) {
  bool sorted = true;
  for (size_t i = 1; i < s.events.size(); ++i)
    if (s.events[i].t_us < s.events[i - 1].t_us) {
      sorted = false;
      break;
    }
  if (!sorted) {
    if (strict)
      throw IoError(std::string(where) +
                    ": timestamps are not non-decreasing (strict mode)");
    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  }
  s.t_start = 0;
  s.t_end = s.events.empty() ? 0 : s.events.back().t_us + 1;
}

}  // namespace detail

// CSV format: header `t_us,x,y,p`, then one event per line. The sensor size
// is not part of the format and must be supplied.
inline EventStream parse_events_csv(const std::string& path, int width,
                                    int height, bool strict = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open event file: " + path);
  EventStream s;
  s.width = width;
  s.height = height;
  std::string line;
  int lineno = 0;
  bool saw_header = false;
  int64_t record = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!saw_header) {
      if (line != "t_us,x,y,p")
        throw IoError(path + ":" + std::to_string(lineno) +
                      ": expected header 't_us,x,y,p'");
      saw_header = true;
      continue;
    }
    ++record;
    long long t, x, y, p;
    char extra;
    if (std::sscanf(line.c_str(), "%lld,%lld,%lld,%lld%c", &t, &x, &y, &p,
                    &extra) != 4)
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed line '" +
                    line + "'");
    if (t < 0)
      throw IoError(path + ":" + std::to_string(lineno) +
                    ": negative timestamp");
    if (p != 1 && p != -1)
      throw IoError(path + ":" + std::to_string(lineno) +
                    ": polarity must be 1 or -1, got " + std::to_string(p));
    if (x < 0 || x >= width || y < 0 || y >= height) {
      if (strict)
        throw IoError(path + ": record " + std::to_string(record) +
                      ": coordinates (" + std::to_string(x) + "," +
                      std::to_string(y) + ") outside " + std::to_string(width) +
                      "x" + std::to_string(height) + " sensor");
      ++s.dropped_out_of_bounds;
      continue;
    }
    s.events.push_back(Event{static_cast<int64_t>(t), static_cast<int>(x),
                             static_cast<int>(y), static_cast<int>(p)});
  }
  detail::finalize_stream(s, strict, path.c_str());
  return s;
}

inline void write_events_csv(const EventStream& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write event file: " + path);
  out << "t_us,x,y,p\n";
  for (const Event& e : s.events)
    out << e.t_us << ',' << e.x << ',' << e.y << ',' << e.p << '\n';
  if (!out) throw IoError("failed writing event file: " + path);
}

// Binary format: magic "EVS1", little-endian u32 width, u32 height,
// u64 count, then (u64 t_us, u16 x, u16 y, i8 p) per event.
inline void write_events_binary(const EventStream& s, const std::string& path) {
  std::string buf;
  buf.reserve(20 + s.events.size() * 13);
  buf.append("EVS1");
  detail::put_u32(buf, static_cast<uint32_t>(s.width));
  detail::put_u32(buf, static_cast<uint32_t>(s.height));
  detail::put_u64(buf, static_cast<uint64_t>(s.events.size()));
  for (const Event& e : s.events) {
    detail::put_u64(buf, static_cast<uint64_t>(e.t_us));
    detail::put_u16(buf, static_cast<uint16_t>(e.x));
    detail::put_u16(buf, static_cast<uint16_t>(e.y));
    buf.push_back(static_cast<char>(static_cast<int8_t>(e.p)));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write event file: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing event file: " + path);
}

inline EventStream parse_events_binary(const std::string& path,
                                       bool strict = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open event file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 20 || std::memcmp(p, "EVS1", 4) != 0)
    throw IoError(path + ": not an EVS1 event file");
  EventStream s;
  s.width = static_cast<int>(detail::get_u32(p + 4));
  s.height = static_cast<int>(detail::get_u32(p + 8));
  const uint64_t count = detail::get_u64(p + 12);
  if (buf.size() != 20 + count * 13)
    throw IoError(path + ": truncated event file (" +
                  std::to_string(buf.size()) + " bytes for " +
                  std::to_string(count) + " events)");
  s.events.reserve(count);
  const unsigned char* q = p + 20;
  for (uint64_t i = 0; i < count; ++i, q += 13) {
    Event e;
    e.t_us = static_cast<int64_t>(detail::get_u64(q));
    e.x = detail::get_u16(q + 8);
    e.y = detail::get_u16(q + 10);
    e.p = static_cast<int8_t>(q[12]);
    if (e.p != 1 && e.p != -1)
      throw IoError(path + ": record " + std::to_string(i + 1) +
                    ": polarity must be 1 or -1");
    if (e.x >= s.width || e.y >= s.height) {
      if (strict)
        throw IoError(path + ": record " + std::to_string(i + 1) +
                      ": coordinates outside sensor");
      ++s.dropped_out_of_bounds;
      continue;
    }
    s.events.push_back(e);
  }
  detail::finalize_stream(s, strict, path.c_str());
  return s;
}

inline EventStream parse_events(const std::string& path, EventFormat format,
                                int width = 0, int height = 0,
                                bool strict = true) {
  if (format == EventFormat::kCsv)
    return parse_events_csv(path, width, height, strict);
  return parse_events_binary(path, strict);
}

// Tiles [t_start, t_end) into ceil(span / dt) left-closed right-open bins.
// The trailing partial bin keeps the full padded duration.
inline std::vector<EventBin> split_into_bins(const EventStream& s,
                                             int64_t dt_us) {
  if (dt_us <= 0) throw ValueError("split_into_bins: bin duration must be > 0");
  const int64_t span = s.t_end - s.t_start;
  const int64_t nbins = span <= 0 ? 0 : (span + dt_us - 1) / dt_us;
  std::vector<EventBin> bins(static_cast<size_t>(nbins));
  for (int64_t i = 0; i < nbins; ++i) {
    bins[static_cast<size_t>(i)].index = static_cast<int>(i + 1);
    bins[static_cast<size_t>(i)].t_begin = s.t_start + i * dt_us;
    bins[static_cast<size_t>(i)].t_end = s.t_start + (i + 1) * dt_us;
  }
  for (const Event& e : s.events) {
    const int64_t i = (e.t_us - s.t_start) / dt_us;
    bins[static_cast<size_t>(i)].events.push_back(e);
  }
  return bins;
}

// Dense per-polarity count image of one bin: channel 0 counts p=+1 events,
// channel 1 counts p=-1 events. Shape [channels, H, W].
template <typename T>
Tensor<T> rasterize(const EventBin& bin, int width, int height,
                    int channels = 2) {
  if (channels != 2)
    throw ValueError("rasterize: only the 2-channel event image is available");
  Tensor<T> img({2, height, width});
  T* v = img.data();
  const int64_t plane = static_cast<int64_t>(width) * height;
  for (const Event& e : bin.events) {
    const int64_t at = static_cast<int64_t>(e.y) * width + e.x;
    v[(e.p > 0 ? 0 : plane) + at] += T(1);
  }
  return img;
}

enum class EmbeddingNorm { kNone, kMax, kLog1p };

inline EmbeddingNorm embedding_norm_from_string(const std::string& s) {
  if (s == "none") return EmbeddingNorm::kNone;
  if (s == "max") return EmbeddingNorm::kMax;
  if (s == "log1p") return EmbeddingNorm::kLog1p;
  throw ValueError("unknown embedding normalization mode: " + s);
}

template <typename T>
Tensor<T> normalize_embedding(const Tensor<T>& counts, EmbeddingNorm mode) {
  Tensor<T> out = counts.detach();
  T* v = out.data();
  const int64_t n = out.numel();
  switch (mode) {
    case EmbeddingNorm::kNone:
      break;
    case EmbeddingNorm::kMax: {
      T mx = T(0);
      for (int64_t i = 0; i < n; ++i) mx = std::max(mx, v[i]);
      const T inv = T(1) / std::max(mx, T(1));
      for (int64_t i = 0; i < n; ++i) v[i] *= inv;
      break;
    }
    case EmbeddingNorm::kLog1p:
      for (int64_t i = 0; i < n; ++i) v[i] = std::log1p(v[i]);
      break;
  }
  return out;
}

}  // namespace evdepth
