// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <iterator>

#include "error.hpp"

CMIVLD_NS_BEGIN

namespace {

class Writer {
 public:
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void string(const std::string& s) {
    require(s.size() <= UINT32_MAX, ErrorCode::kInvalidInput, "checkpoint: string too long");
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, const std::string& origin)
      : data_(data), origin_(origin) {}

  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string string() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  [[noreturn]] void corrupt(const std::string& what) const {
    fail(ErrorCode::kCorruptCheckpoint, origin_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) corrupt("truncated at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

[[noreturn]] void io_fail(const std::string& path, const std::string& what) {
  fail(ErrorCode::kIo, path + ": " + what + ": " + std::strerror(errno));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt, std::uint16_t version) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u16(version);
  w.string(ckpt.config.dump());
  w.u32(static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, t] : ckpt.arrays) {
    require(shape_numel(t.shape) == t.data.size(), ErrorCode::kInvalidInput,
            "checkpoint: array " + name + " has inconsistent shape");
    w.string(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (auto v : t.data) w.f32(static_cast<float>(v));
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
  const std::size_t head = std::min(bytes.size(), sizeof(kCheckpointMagic));
  if (std::memcmp(bytes.data(), kCheckpointMagic, head) != 0) {
    fail(ErrorCode::kUnsupportedFormat, origin + ": not a cmivld checkpoint (bad magic)");
  }
  Reader r(bytes.subspan(head), origin);
  if (head < sizeof(kCheckpointMagic)) r.corrupt("truncated magic");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::kUnsupportedFormat,
         origin + ": checkpoint version " + std::to_string(version) + " is not supported");
  }
  Checkpoint c;
  try {
    c.config = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::parse_error& e) {
    r.corrupt(std::string("config block is not JSON: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string();
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.corrupt("array " + name + " has rank " + std::to_string(rank));
    Tensor t;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.u32());
      numel *= t.shape.back();
    }
    if (numel * 4 > r.remaining()) {
      r.corrupt("array " + name + " needs " + std::to_string(numel * 4) + " bytes, " +
                std::to_string(r.remaining()) + " remain");
    }
    t.data.resize(numel);
    for (auto& v : t.data) v = static_cast<Scalar>(r.f32());
    c.arrays.emplace_back(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) r.corrupt(std::to_string(r.remaining()) + " trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) io_fail(tmp, "open");
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      io_fail(tmp, "write");
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    io_fail(tmp, "fsync");
  }
  if (::close(fd) != 0) io_fail(tmp, "close");
  if (std::rename(tmp.c_str(), path.c_str()) != 0) io_fail(path, "rename");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kNotFound, path + ": cannot open checkpoint");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) io_fail(path, "read");
  return decode_checkpoint(bytes, path);
}

namespace {

NamedArrays arrays_of(const std::vector<std::pair<std::string, Var>>& named) {
  NamedArrays out;
  for (const auto& [n, v] : named) out.emplace_back(n, v->value);
  return out;
}

void expect_kind(const Checkpoint& c, const char* kind, const std::string& path) {
  const std::string got = c.config.is_object() ? c.config.value("kind", "") : "";
  if (got != kind) {
    fail(ErrorCode::kCorruptCheckpoint,
         path + ": expected a " + kind + " checkpoint, found '" + got + "'");
  }
}

template <typename F>
auto with_config_errors(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kInvalidConfig) {
      fail(ErrorCode::kCorruptCheckpoint, path + ": " + e.what());
    }
    throw;
  }
}

}  // namespace

void save_model(const std::string& path, const ModelConfig& config, const TinyLvlmParams& params) {
  save_checkpoint(path, {config.to_json(), arrays_of(params.named())});
}

std::pair<ModelConfig, TinyLvlmParams> load_model(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  expect_kind(c, "model", path);
  return with_config_errors(path, [&] {
    ModelConfig config = ModelConfig::from_json(c.config);
    TinyLvlmParams params = params_from_arrays(config, c.arrays);
    return std::make_pair(config, std::move(params));
  });
}

void save_purifier(const std::string& path, const Purifier& purifier) {
  save_checkpoint(path, {purifier.config.to_json(), arrays_of(purifier.params.named())});
}

Purifier load_purifier(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  expect_kind(c, "purifier", path);
  return with_config_errors(path, [&] {
    PurifierConfig config = PurifierConfig::from_json(c.config);
    return Purifier{config, purifier_from_arrays(config, c.arrays)};
  });
}

CMIVLD_NS_END
