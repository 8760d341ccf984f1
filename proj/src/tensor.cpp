#include "xfernas/tensor.hpp"

#include <malloc.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>

#include "xfernas/errors.hpp"

namespace xfernas {

void* tensor_allocate(std::size_t bytes, std::align_val_t align) {
  static const bool configured = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)configured;
  return ::operator new(bytes, align);
}

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (element_count(shape_) != data_.size()) {
    throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::uninitialized(std::vector<std::size_t> shape) {
  Tensor t;
  t.data_.resize(element_count(shape));
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractViolation("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// ---------------------------------------------------------------------------

Parameter& ParamStore::add(const std::string& path, Tensor value, bool decay) {
  if (contains(path)) throw ContractViolation("duplicate parameter path " + path);
  Parameter p;
  p.first_moment = Tensor(value.shape());
  p.second_moment = Tensor(value.shape());
  p.value = std::move(value);
  p.decay = decay;
  return params_.emplace(path, std::move(p)).first->second;
}

Parameter& ParamStore::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractViolation("unknown parameter path " + path);
  return it->second;
}

const Parameter& ParamStore::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractViolation("unknown parameter path " + path);
  return it->second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

ParamStore init_params(std::uint64_t seed, const std::vector<ParamSpec>& specs) {
  std::mt19937_64 rng(seed);
  ParamStore store;
  for (const ParamSpec& spec : specs) {
    Tensor t(spec.shape);
    if (spec.scheme == InitScheme::uniform_fan_in) {
      const std::size_t fan_in = spec.fan_in ? spec.fan_in : (spec.shape.empty() ? 1 : spec.shape[0]);
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : t.data()) v = dist(rng);
    }
    store.add(spec.path, std::move(t), spec.decay);
  }
  return store;
}

// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

constexpr char kMagic[6] = {'X', 'F', 'N', 'P', 'S', '\0'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& is, const std::filesystem::path& file) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw FormatError("truncated checkpoint " + file.string());
  }
  return v;
}

void put_doubles(std::ofstream& os, const Tensor& t) {
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void get_doubles(std::ifstream& is, Tensor& t, const std::filesystem::path& file) {
  if (!is.read(reinterpret_cast<char*>(t.data().data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)))) {
    throw FormatError("truncated checkpoint " + file.string());
  }
}

}  // namespace

void save_params(const ParamStore& store, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + file.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint16_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& [path, p] : store) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(path.size()));
    os.write(path.data(), static_cast<std::streamsize>(path.size()));
    put<std::uint8_t>(os, p.decay ? 1 : 0);
    put<std::int64_t>(os, p.step);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put<std::uint64_t>(os, d);
    put_doubles(os, p.value);
    put_doubles(os, p.first_moment);
    put_doubles(os, p.second_moment);
  }
  if (!os) throw Error("failed writing " + file.string());
}

ParamStore load_params(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot read " + file.string());
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError(file.string() + " is not a parameter checkpoint");
  }
  const auto version = get<std::uint16_t>(is, file);
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(is, file);
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, file);
    if (len > 4096) throw FormatError("corrupt parameter path length in " + file.string());
    std::string path(len, '\0');
    if (!is.read(path.data(), len)) throw FormatError("truncated checkpoint " + file.string());
    const bool decay = get<std::uint8_t>(is, file) != 0;
    const auto step = get<std::int64_t>(is, file);
    const auto rank = get<std::uint32_t>(is, file);
    if (rank > 8) throw FormatError("corrupt tensor rank in " + file.string());
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is, file));
    Parameter& p = store.add(path, Tensor(shape), decay);
    p.step = step;
    get_doubles(is, p.value, file);
    get_doubles(is, p.first_moment, file);
    get_doubles(is, p.second_moment, file);
  }
  return store;
}

}  // namespace xfernas
