#include "bda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "bda/dataset.hpp"
#include "bda/errors.hpp"
#include "bda/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace bda {

namespace {

constexpr char kMagic[5] = {'B', 'D', 'A', 'C', 'K'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) {
      throw DataError(origin_ + ": truncated at byte " + std::to_string(pos_));
    }
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw DataError(origin_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<double> get_doubles(std::size_t n) {
    if (pos_ + n * sizeof(double) > bytes_.size()) {
      throw DataError(origin_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const CheckpointMeta& meta) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, meta.stage);
  put<std::uint32_t>(out, meta.epoch);
  put<std::uint64_t>(out, meta.seed);
  put<std::uint64_t>(out, fnv1a(meta.config_text));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.config_text.size()));
  out.append(meta.config_text);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    const Shape& s = t.shape();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    for (int e : s) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    const auto v = t.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  atomic_write(path, out);
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());

  const std::string magic = r.get_bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + ": not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " +
                    std::to_string(version));
  }
  LoadedCheckpoint ck;
  ck.meta.stage = r.get<std::uint32_t>();
  ck.meta.epoch = r.get<std::uint32_t>();
  ck.meta.seed = r.get<std::uint64_t>();
  const auto stored_hash = r.get<std::uint64_t>();
  const auto config_len = r.get<std::uint32_t>();
  ck.meta.config_text = r.get_bytes(config_len);
  if (fnv1a(ck.meta.config_text) != stored_hash) {
    throw DataError(path.string() + ": config hash mismatch");
  }
  const auto entry_count = r.get<std::uint32_t>();
  ck.entries.reserve(entry_count);
  for (std::uint32_t i = 0; i < entry_count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.get_bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw DataError(path.string() + ": implausible tensor rank in entry " + name);
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = r.get<std::uint32_t>();
      if (e == 0) throw DataError(path.string() + ": zero extent in entry " + name);
      shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    std::vector<double> values = r.get_doubles(numel);
    ck.entries.emplace_back(std::move(name), Tensor::from_values(shape, std::move(values)));
  }
  if (!r.at_end()) {
    throw DataError(path.string() + ": trailing bytes after the last entry");
  }
  return ck;
}

void apply_checkpoint(const LoadedCheckpoint& ck, ParamStore& params) {
  // validate everything first so a failure leaves the model untouched
  for (const auto& [name, t] : ck.entries) {
    if (!params.has(name)) {
      throw DataError("checkpoint entry " + name + " has no matching model parameter");
    }
    if (params.at(name).shape() != t.shape()) {
      throw DataError("checkpoint entry " + name + " has shape " + shape_str(t.shape()) +
                      " but the model expects " + shape_str(params.at(name).shape()));
    }
  }
  if (ck.entries.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(ck.entries.size()) +
                    " entries but the model has " + std::to_string(params.size()) +
                    " parameters");
  }
  for (const auto& [name, t] : ck.entries) {
    auto dst = params.at(name).values_mut();
    const auto src = t.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace bda
