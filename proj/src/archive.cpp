#include "effiseg/archive.hpp"

#include <fstream>
#include <iterator>

namespace effiseg {

namespace {

class Writer {
 public:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof(T));
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, std::size_t pos, std::size_t end, const std::filesystem::path& path)
      : data_(data), pos_(pos), end_(end), path_(path) {}

  void raw(void* p, std::size_t n) {
    if (end_ - pos_ < n) throw IoError("truncated archive: " + path_.string());
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& data_;
  std::size_t pos_;
  std::size_t end_;
  const std::filesystem::path& path_;
};

}  // namespace

const TensorArchive::Entry& TensorArchive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive has no tensor '" + name + "'");
  return it->second;
}

void TensorArchive::save(const std::filesystem::path& path, std::string_view format) const {
  Writer w;
  w.raw(format.data(), format.size());
  w.pod<char>('\n');
  const std::string m = manifest.dump();
  w.pod<std::uint64_t>(m.size());
  w.raw(m.data(), m.size());
  w.pod<std::uint64_t>(order_.size());
  for (const auto& name : order_) {
    const Entry& e = entries_.at(name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    for (Index d : {e.shape.n, e.shape.c, e.shape.h, e.shape.w}) w.pod<std::int64_t>(d);
    w.pod<std::uint8_t>(e.dtype);
    w.pod<std::uint64_t>(e.bytes.size());
    w.raw(e.bytes.data(), e.bytes.size());
  }
  const std::uint64_t sum = fnv1a(w.buffer());
  w.pod<std::uint64_t>(sum);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw IoError("failed writing " + path.string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path, std::string_view format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const std::size_t newline = data.find('\n');
  if (newline == std::string::npos || newline > 64) throw IoError("not an effiseg archive: " + path.string());
  const std::string found = data.substr(0, newline);
  if (found != format) {
    throw IoError("format mismatch in " + path.string() + ": found '" + found + "', expected '" +
                  std::string(format) + "'");
  }
  if (data.size() < newline + 1 + sizeof(std::uint64_t)) throw IoError("truncated archive: " + path.string());

  const std::size_t body_end = data.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, data.data() + body_end, sizeof(stored));
  if (fnv1a(std::string_view(data.data(), body_end)) != stored) {
    throw IoError("checksum mismatch, archive is corrupt: " + path.string());
  }

  Reader r(data, newline + 1, body_end, path);
  TensorArchive archive;
  try {
    archive.manifest = nlohmann::json::parse(r.str(r.pod<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt manifest in " + path.string() + ": " + e.what());
  }
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.pod<std::uint32_t>());
    Entry e;
    e.shape.n = r.pod<std::int64_t>();
    e.shape.c = r.pod<std::int64_t>();
    e.shape.h = r.pod<std::int64_t>();
    e.shape.w = r.pod<std::int64_t>();
    e.dtype = r.pod<std::uint8_t>();
    const auto nbytes = r.pod<std::uint64_t>();
    if ((e.dtype != 4 && e.dtype != 8) || e.shape.n < 1 || e.shape.c < 1 || e.shape.h < 1 || e.shape.w < 1 ||
        nbytes != static_cast<std::uint64_t>(e.shape.size()) * e.dtype) {
      throw IoError("corrupt entry '" + name + "' in " + path.string());
    }
    e.bytes.resize(nbytes);
    r.raw(e.bytes.data(), nbytes);
    archive.order_.push_back(name);
    archive.entries_[name] = std::move(e);
  }
  if (r.pos() != body_end) throw IoError("trailing bytes in archive: " + path.string());
  return archive;
}

}  // namespace effiseg
