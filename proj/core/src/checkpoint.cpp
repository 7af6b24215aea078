#include "mmseq/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "mmseq/error.hpp"
#include "mmseq/text.hpp"

namespace mmseq::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "MMSEQ1";

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ValidationError(std::string("checkpoint truncated while reading ") + what);
    const std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what).data(), sizeof(T));
    return v;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string adam_name(char which, const std::string& name) { return std::string("adam.") + which + "/" + name; }

}  // namespace

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_tag.empty() || ckpt.model_tag.size() > 4) throw ValidationError("model tag must be 1-4 characters");
  std::string out(kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  std::string tag = ckpt.model_tag;
  tag.resize(4, '\0');
  out += tag;
  std::string hyper;
  for (const auto& [k, v] : ckpt.hyper) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ValidationError("hyperparameter '" + k + "' cannot be stored");
    }
    hyper += k + "=" + v + "\n";
  }
  put<std::uint64_t>(out, hyper.size());
  out += hyper;
  for (const NamedTensor& t : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) put<std::uint64_t>(out, d);
    for (double v : t.value.data()) put<float>(out, static_cast<float>(v));
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(kMagic.size(), "magic") != kMagic) throw ValidationError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::string_view tag = r.take(4, "model tag");
  ckpt.model_tag = std::string(tag.substr(0, tag.find('\0')));
  const auto hyper_len = r.get<std::uint64_t>("hyperparameter length");
  std::string_view hyper = r.take(hyper_len, "hyperparameters");
  while (!hyper.empty()) {
    const std::size_t nl = hyper.find('\n');
    if (nl == std::string_view::npos) throw ValidationError("unterminated hyperparameter line");
    const std::string_view line = hyper.substr(0, nl);
    hyper.remove_prefix(nl + 1);
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw ValidationError("hyperparameter line without '='");
    ckpt.hyper.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  while (!r.done()) {
    NamedTensor t;
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    t.name = std::string(r.take(name_len, "tensor name"));
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) throw ValidationError("tensor " + t.name + " has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>("tensor dims");
      if (d != 0 && count > (bytes.size() / 4 + 1) / d) throw ValidationError("tensor " + t.name + " is too large");
      count *= d;
    }
    const std::string_view payload = r.take(count * sizeof(float), "tensor payload");
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, payload.data() + i * sizeof(float), sizeof(float));
      data[i] = f;
    }
    t.value = Tensor(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

void store_to_checkpoint(const ParameterStore& store, Checkpoint& ckpt, bool with_optimizer) {
  for (const Parameter& p : store.all()) ckpt.tensors.push_back({p.name, p.value});
  if (!with_optimizer) return;
  ckpt.hyper["adam.step"] = std::to_string(store.step);
  for (const Parameter& p : store.all()) {
    ckpt.tensors.push_back({adam_name('m', p.name), p.adam_m});
    ckpt.tensors.push_back({adam_name('v', p.name), p.adam_v});
  }
}

void store_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt) {
  for (Parameter& p : store.all()) {
    const Tensor* t = ckpt.find(p.name);
    if (t == nullptr) throw ValidationError("checkpoint lacks parameter " + p.name);
    if (t->shape() != p.value.shape()) {
      throw ValidationError("checkpoint parameter " + p.name + " has shape " + shape_str(t->shape()) + ", expected " +
                            shape_str(p.value.shape()));
    }
    p.value = *t;
    p.zero_grad();
    const Tensor* m = ckpt.find(adam_name('m', p.name));
    const Tensor* v = ckpt.find(adam_name('v', p.name));
    p.adam_m = m && m->shape() == p.value.shape() ? *m : Tensor(p.value.shape());
    p.adam_v = v && v->shape() == p.value.shape() ? *v : Tensor(p.value.shape());
  }
  const auto it = ckpt.hyper.find("adam.step");
  store.step = it == ckpt.hyper.end() ? 0 : parse_int(it->second);
}

}  // namespace mmseq::nn
