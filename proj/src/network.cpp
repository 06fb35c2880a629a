#include "dlbl/network.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace dlbl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename Scalar>
Network<Scalar>::Network(const Network& other)
    : arch_tag_(other.arch_tag_), mode_(other.mode_), rng_(other.rng_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <typename Scalar>
Network<Scalar>& Network<Scalar>::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename Scalar>
Layer<Scalar>& Network<Scalar>::add(LayerPtr layer) {
  for (const auto& l : layers_) {
    if (l->name() == layer->name()) {
      throw ConfigError("duplicate layer name '" + layer->name() + "'");
    }
  }
  layers_.push_back(std::move(layer));
  return *layers_.back();
}

template <typename Scalar>
Layer<Scalar>* Network<Scalar>::find_layer(const std::string& name) {
  for (auto& l : layers_)
    if (l->name() == name) return l.get();
  return nullptr;
}

template <typename Scalar>
std::vector<Shape> Network<Scalar>::shape_chain(const Shape& input) const {
  std::vector<Shape> out;
  out.reserve(layers_.size());
  Shape s = input;
  for (const auto& l : layers_) {
    try {
      s = l->output_shape(s);
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + l->name() + "': " + e.what());
    }
    out.push_back(s);
  }
  return out;
}

template <typename Scalar>
BasicTensor4<Scalar> Network<Scalar>::forward(const Tensor& x) {
  ForwardContext ctx{mode_, &rng_, true};
  Tensor a = x;
  for (auto& l : layers_) {
    try {
      a = l->forward(a, ctx);
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + l->name() + "': " + e.what());
    }
  }
  return a;
}

template <typename Scalar>
BasicTensor4<Scalar> Network<Scalar>::infer(const Tensor& x) {
  ForwardContext ctx{Mode::eval, nullptr, false};
  Tensor a = x;
  for (auto& l : layers_) {
    try {
      a = l->forward(a, ctx);
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + l->name() + "': " + e.what());
    }
  }
  return a;
}

template <typename Scalar>
BasicTensor4<Scalar> Network<Scalar>::backward(const Tensor& dy) {
  Tensor d = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    try {
      d = (*it)->backward(d);
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + (*it)->name() + "': " + e.what());
    }
  }
  return d;
}

template <typename Scalar>
void Network<Scalar>::release_caches() {
  for (auto& l : layers_) l->release_cache();
}

template <typename Scalar>
std::vector<Param<Scalar>*> Network<Scalar>::params() {
  std::vector<Param<Scalar>*> out;
  for (auto& l : layers_)
    for (auto* p : l->params()) out.push_back(p);
  return out;
}

template <typename Scalar>
std::vector<Param<Scalar>*> Network<Scalar>::buffers() {
  std::vector<Param<Scalar>*> out;
  for (auto& l : layers_)
    for (auto* p : l->buffers()) out.push_back(p);
  return out;
}

template <typename Scalar>
Param<Scalar>* Network<Scalar>::find(const std::string& name) {
  for (auto* p : params())
    if (p->name == name) return p;
  for (auto* p : buffers())
    if (p->name == name) return p;
  return nullptr;
}

template <typename Scalar>
void Network<Scalar>::zero_grad() {
  for (auto* p : params()) p->grad.fill(0);
}

template <typename Scalar>
void Network<Scalar>::init_weights(Rng& rng) {
  for (auto& l : layers_) l->init_weights(rng);
}

template class Network<float>;
template class Network<double>;

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'D', 'L', 'B', 'L'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 20)) fail("string length " + std::to_string(n));
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void raw(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail("truncated file");
  }
  [[noreturn]] void fail(const std::string& what) {
    throw DataError("checkpoint " + path_ + ": " + what);
  }

 private:
  std::istream& is_;
  std::string path_;
};

std::string dims_str(const std::vector<std::uint32_t>& d) {
  std::string s;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(d[i]);
  }
  return s;
}

bool record_matches(const TensorRecord& r, const Tensor4& t) {
  const auto want = to_record(t).dims;
  return r.dims == want;
}

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, r] : tensors)
    if (n == name) return &r;
  return nullptr;
}

std::optional<std::uint64_t> Checkpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return std::nullopt;
}

void Checkpoint::set_tensor(const std::string& name, TensorRecord rec) {
  for (auto& [n, r] : tensors)
    if (n == name) {
      r = std::move(rec);
      return;
    }
  tensors.emplace_back(name, std::move(rec));
}

void Checkpoint::set_meta(const std::string& key, std::uint64_t value) {
  for (auto& [k, v] : meta)
    if (k == key) {
      v = value;
      return;
    }
  meta.emplace_back(key, value);
}

TensorRecord to_record(const Tensor4& t) {
  const Shape& s = t.shape();
  return {{static_cast<std::uint32_t>(s.batch), static_cast<std::uint32_t>(s.channels),
           static_cast<std::uint32_t>(s.height), static_cast<std::uint32_t>(s.width)},
          std::vector<float>(t.values().begin(), t.values().end())};
}

TensorRecord to_record(const std::vector<float>& v) {
  return {{static_cast<std::uint32_t>(v.size())}, v};
}

Tensor4 from_record(const TensorRecord& r) {
  Shape s{1, 1, 1, 1};
  const std::size_t rank = r.dims.size();
  if (rank == 0 || rank > 4) throw DataError("tensor record of rank " + std::to_string(rank));
  // right-align into NCHW
  std::size_t* slots[4] = {&s.batch, &s.channels, &s.height, &s.width};
  for (std::size_t i = 0; i < rank; ++i) *slots[4 - rank + i] = r.dims[i];
  Tensor4 t(s);
  if (r.data.size() != t.size()) throw DataError("tensor record size mismatch");
  std::copy(r.data.begin(), r.data.end(), t.data());
  return t;
}

Checkpoint make_checkpoint(Network<float>& net) {
  Checkpoint ck;
  ck.arch_tag = net.arch_tag();
  for (auto* p : net.params()) ck.tensors.emplace_back(p->name, to_record(p->value));
  for (auto* p : net.buffers()) ck.tensors.emplace_back(p->name, to_record(p->value));
  return ck;
}

void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  Writer w(os);
  w.raw(kMagic, 4);
  w.u32(ck.version);
  w.str(ck.arch_tag);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, rec] : ck.tensors) {
    std::size_t count = 1;
    for (auto d : rec.dims) count *= d;
    if (count != rec.data.size()) {
      throw DataError("tensor '" + name + "' has inconsistent dims");
    }
    w.str(name);
    w.u32(static_cast<std::uint32_t>(rec.dims.size()));
    for (auto d : rec.dims) w.u32(d);
    w.raw(rec.data.data(), rec.data.size() * sizeof(float));
  }
  w.u32(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    w.str(k);
    w.u64(v);
  }
  if (!os) throw DataError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic");
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(ck.version));
  }
  ck.arch_tag = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    TensorRecord rec;
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("tensor '" + name + "' has rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.dims.push_back(r.u32());
      n *= rec.dims.back();
    }
    if (n > (std::uint64_t{1} << 32)) r.fail("tensor '" + name + "' too large");
    rec.data.resize(n);
    r.raw(rec.data.data(), n * sizeof(float));
    ck.tensors.emplace_back(std::move(name), std::move(rec));
  }
  const std::uint32_t meta_count = r.u32();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = r.str();
    ck.meta.emplace_back(std::move(k), r.u64());
  }
  return ck;
}

void load_into(Network<float>& net, const Checkpoint& ck) {
  if (ck.arch_tag != net.arch_tag()) {
    throw DataError("checkpoint architecture '" + ck.arch_tag +
                    "' does not match network '" + net.arch_tag() + "'");
  }
  std::set<std::string> known;
  auto load = [&](Param<float>* p) {
    known.insert(p->name);
    const TensorRecord* rec = ck.find(p->name);
    if (!rec) throw DataError("checkpoint is missing tensor '" + p->name + "'");
    if (!record_matches(*rec, p->value)) {
      throw DataError("tensor '" + p->name + "' has shape " + dims_str(rec->dims) +
                      ", architecture expects " + p->value.shape().str());
    }
    std::copy(rec->data.begin(), rec->data.end(), p->value.data());
  };
  for (auto* p : net.params()) load(p);
  for (auto* p : net.buffers()) load(p);
  for (const auto& [name, rec] : ck.tensors) {
    if (known.count(name) || name.rfind("opt.", 0) == 0 || name.rfind("aux.", 0) == 0) {
      continue;
    }
    throw DataError("checkpoint tensor '" + name + "' is unknown to architecture " +
                    net.arch_tag());
  }
}

WarmStartReport warm_start(Network<float>& net, const Checkpoint& ck,
                           const std::map<std::string, std::string>& prefix_map) {
  WarmStartReport report;
  auto visit = [&](Param<float>* p) {
    for (const auto& [from, to] : prefix_map) {
      if (p->name.rfind(from, 0) != 0) continue;
      const std::string mapped = to + p->name.substr(from.size());
      const TensorRecord* rec = ck.find(mapped);
      if (rec && record_matches(*rec, p->value)) {
        std::copy(rec->data.begin(), rec->data.end(), p->value.data());
        report.loaded.push_back(p->name);
        return;
      }
      break;
    }
    report.skipped.push_back(p->name);
  };
  for (auto* p : net.params()) visit(p);
  for (auto* p : net.buffers()) visit(p);
  return report;
}

}  // namespace dlbl
