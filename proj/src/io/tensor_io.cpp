#include "cmdm/io/tensor_io.hpp"

#include "cmdm/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cmdm::io {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'D', 'T'};

template <class U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  void need(std::size_t n, const std::string& what) const {
    if (b_.size() - pos_ < n) {
      throw ParseError("truncated " + what + ": expected " + std::to_string(n) + " bytes, got " +
                       std::to_string(b_.size() - pos_), pos_);
    }
  }

  template <class U>
  U read(const std::string& what) {
    need(sizeof(U), what);
    U v = get_le<U>(b_.data() + pos_);
    pos_ += sizeof(U);
    return v;
  }

  std::vector<std::uint8_t> bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::vector<std::uint8_t> out(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i64: return 8;
  }
  throw InputError("unknown dtype");
}

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (std::uint64_t d : dims) n *= d;
  return n;
}

Tensor Tensor::from_mat(const nn::Mat& m) {
  Tensor t{DType::f64, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  t.bytes.reserve(static_cast<std::size_t>(m.size()) * 8);
  for (Eigen::Index i = 0; i < m.size(); ++i) put(t.bytes, std::bit_cast<std::uint64_t>(m.data()[i]));
  return t;
}

Tensor Tensor::from_f32(const nn::Mat& m) {
  Tensor t{DType::f32, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  t.bytes.reserve(static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) put(t.bytes, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
  return t;
}

Tensor Tensor::from_i64(const std::vector<std::int64_t>& v, std::vector<std::uint64_t> dims) {
  if (dims.empty()) dims = {static_cast<std::uint64_t>(v.size())};
  Tensor t{DType::i64, std::move(dims), {}};
  if (t.numel() != v.size()) throw ShapeError("Tensor::from_i64: dims do not match the value count");
  for (std::int64_t x : v) put(t.bytes, static_cast<std::uint64_t>(x));
  return t;
}

Tensor Tensor::scalar_f64(double v) {
  Tensor t{DType::f64, {}, {}};
  put(t.bytes, std::bit_cast<std::uint64_t>(v));
  return t;
}

nn::Mat Tensor::to_mat() const {
  if (dims.size() > 2) throw ShapeError("Tensor::to_mat: rank " + std::to_string(dims.size()) + " > 2");
  const auto rows = static_cast<Eigen::Index>(dims.size() == 2 ? dims[0] : 1);
  const auto cols = static_cast<Eigen::Index>(dims.empty() ? 1 : dims.back());
  nn::Mat m(rows, cols);
  const std::uint8_t* p = bytes.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    switch (dtype) {
      case DType::f32: m.data()[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i)); break;
      case DType::f64: m.data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i)); break;
      case DType::i64: m.data()[i] = static_cast<double>(static_cast<std::int64_t>(get_le<std::uint64_t>(p + 8 * i))); break;
    }
  }
  return m;
}

std::vector<std::int64_t> Tensor::to_i64() const {
  if (dtype != DType::i64) throw InputError("Tensor::to_i64: not an i64 tensor");
  std::vector<std::int64_t> v(numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::int64_t>(get_le<std::uint64_t>(bytes.data() + 8 * i));
  return v;
}

double Tensor::to_scalar() const {
  if (numel() != 1) throw ShapeError("Tensor::to_scalar: tensor holds " + std::to_string(numel()) + " values");
  return to_mat()(0, 0);
}

std::vector<std::uint8_t> serialize(const TensorList& entries) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put(out, kTensorVersion);
  put(out, static_cast<std::uint32_t>(entries.size()));
  for (const NamedTensor& e : entries) {
    if (e.name.size() > 0xFFFF) throw InputError("tensor name longer than 65535 bytes: " + e.name.substr(0, 32));
    if (e.tensor.dims.size() > 0xFF) throw InputError("tensor rank above 255: " + e.name);
    if (e.tensor.bytes.size() != e.tensor.numel() * dtype_size(e.tensor.dtype)) {
      throw ShapeError("tensor '" + e.name + "': payload size does not match its dims");
    }
    put(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.tensor.dtype));
    out.push_back(static_cast<std::uint8_t>(e.tensor.dims.size()));
    for (std::uint64_t d : e.tensor.dims) put(out, d);
    out.insert(out.end(), e.tensor.bytes.begin(), e.tensor.bytes.end());
  }
  return out;
}

TensorList deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError("bad magic, expected \"CMDT\"", 0);
  r.bytes(4, "magic");
  const std::size_t version_at = r.pos();
  const auto version = r.read<std::uint16_t>("version");
  if (version != kTensorVersion) {
    throw ParseError("unsupported version " + std::to_string(version) + " (expected " +
                     std::to_string(kTensorVersion) + ")", version_at);
  }
  const auto count = r.read<std::uint32_t>("entry count");
  TensorList out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    const auto len = r.read<std::uint16_t>("name length");
    const auto name = r.bytes(len, "name");
    e.name.assign(name.begin(), name.end());
    const std::size_t dtype_at = r.pos();
    const auto tag = r.read<std::uint8_t>("dtype");
    if (tag > 2) throw ParseError("unknown dtype tag " + std::to_string(tag) + " for '" + e.name + "'", dtype_at);
    e.tensor.dtype = static_cast<DType>(tag);
    const auto rank = r.read<std::uint8_t>("rank");
    for (int d = 0; d < rank; ++d) e.tensor.dims.push_back(r.read<std::uint64_t>("dims"));
    const std::uint64_t n = e.tensor.numel();
    const std::size_t elem = dtype_size(e.tensor.dtype);
    if (n > (bytes.size() - r.pos()) / elem) {
      throw ParseError("truncated payload of '" + e.name + "': expected " + std::to_string(n * elem) +
                       " bytes, got " + std::to_string(bytes.size() - r.pos()), r.pos());
    }
    e.tensor.bytes = r.bytes(static_cast<std::size_t>(n * elem), "payload");
    out.push_back(std::move(e));
  }
  if (!r.done()) throw ParseError("trailing bytes after last entry", r.pos());
  return out;
}

void write_tensors(const std::filesystem::path& path, const TensorList& entries) {
  const auto bytes = serialize(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

TensorList read_tensors(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

const Tensor& find_tensor(const TensorList& entries, const std::string& name) {
  for (const NamedTensor& e : entries) {
    if (e.name == name) return e.tensor;
  }
  throw InputError("tensor '" + name + "' not found");
}

TensorList to_tensors(const nn::ParamTree& tree, const std::string& prefix) {
  TensorList out;
  for (const auto& [path, m] : tree) out.push_back({prefix + path, Tensor::from_mat(m)});
  return out;
}

nn::ParamTree to_param_tree(const TensorList& entries, const std::string& prefix) {
  nn::ParamTree tree;
  for (const NamedTensor& e : entries) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    tree.add(e.name.substr(prefix.size()), e.tensor.to_mat());
  }
  return tree;
}

}  // namespace cmdm::io
