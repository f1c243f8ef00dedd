#include "stanet/numerics/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "stanet/errors.hpp"

namespace stanet {

namespace {

constexpr char kMagic[5] = {'S', 'T', 'A', 'N', '1'};

template <typename T>
void put(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T take() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return value;
  }

  std::string take_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw LoadError("tensor file truncated at byte " + std::to_string(pos_) + " (needs " + std::to_string(n) +
                      " more)");
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* TensorFile::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& TensorFile::get(const std::string& name, const Shape& expected) const {
  const Tensor* t = find(name);
  if (!t) throw LoadError("tensor '" + name + "' missing from file");
  if (t->shape() != expected) {
    throw LoadError("tensor '" + name + "' has shape " + shape_to_string(t->shape()) + ", expected " +
                    shape_to_string(expected));
  }
  return *t;
}

std::string encode_tensor_file(const TensorFile& file) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint32_t>(out, file.flags);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.metadata.size()));
  out += file.metadata;
  put<std::uint64_t>(out, file.tensors.size());
  for (const auto& [name, t] : file.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
    for (double v : t.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

TensorFile decode_tensor_file(const std::string& bytes) {
  Reader in(bytes);
  if (in.take_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw LoadError("not a STAN1 file");
  const auto version = in.take<std::uint32_t>();
  if (version != kTensorFileVersion) throw LoadError("unsupported STAN1 version " + std::to_string(version));
  TensorFile file;
  file.flags = in.take<std::uint32_t>();
  file.metadata = in.take_string(in.take<std::uint32_t>());
  const auto count = in.take<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = in.take_string(in.take<std::uint32_t>());
    const auto rank = in.take<std::uint32_t>();
    if (rank == 0 || rank > 8) throw LoadError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = in.take<std::uint64_t>();
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0 || e > (std::size_t{1} << 32)) throw LoadError("tensor '" + name + "' has a bad extent");
      n *= e;
    }
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(in.take<std::uint64_t>());
    file.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw LoadError("trailing bytes after the last tensor");
  return file;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_tensor_file(file);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("write failed for " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor_file(bytes);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

std::uint64_t hash_tensors(const NamedTensors& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    for (std::size_t e : t.shape()) mix(&e, sizeof(e));
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      mix(&bits, sizeof(bits));
    }
  }
  return h;
}

}  // namespace stanet
