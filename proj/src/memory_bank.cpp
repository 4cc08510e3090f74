#include "sdreid/memory_bank.hpp"

#include <cmath>
#include <cstring>
#include <mutex>

#include "sdreid/errors.hpp"

namespace sdreid::model {

namespace {
constexpr char kBankMagic[8] = {'S', 'D', 'R', 'D', 'B', 'A', 'N', 'K'};
size_t slot_of(data::View v) { return static_cast<size_t>(v); }
}  // namespace

ViewPrototypeBank::ViewPrototypeBank(int64_t dim, double alpha) : dim_(dim), alpha_(alpha) {
  if (dim <= 0) throw ConfigError("memory bank dimension must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("memory bank alpha must lie in (0, 1)");
  for (auto& s : slots_) s.value.assign(static_cast<size_t>(dim), 0.0);
}

ViewPrototypeBank::ViewPrototypeBank(const ViewPrototypeBank& other) {
  std::shared_lock lock(other.mu_);
  dim_ = other.dim_;
  alpha_ = other.alpha_;
  slots_ = other.slots_;
}

ViewPrototypeBank& ViewPrototypeBank::operator=(const ViewPrototypeBank& other) {
  if (this == &other) return *this;
  std::scoped_lock lock(mu_);
  std::shared_lock other_lock(other.mu_);
  dim_ = other.dim_;
  alpha_ = other.alpha_;
  slots_ = other.slots_;
  return *this;
}

void ViewPrototypeBank::update(data::View view, std::span<const double> p) {
  if (static_cast<int64_t>(p.size()) != dim_) throw ContractError("memory bank update: dimension mismatch");
  for (double v : p)
    if (!std::isfinite(v)) throw NumericError("memory bank update: non-finite view feature");
  std::unique_lock lock(mu_);
  Slot& s = slots_[slot_of(view)];
  if (!s.initialized) {
    s.value.assign(p.begin(), p.end());
    s.initialized = true;
  } else {
    for (size_t i = 0; i < p.size(); ++i) s.value[i] = alpha_ * s.value[i] + (1.0 - alpha_) * p[i];
  }
  ++s.count;
}

std::vector<double> ViewPrototypeBank::get(data::View view) const {
  std::shared_lock lock(mu_);
  const Slot& s = slots_[slot_of(view)];
  if (!s.initialized) {
    throw ContractError("memory bank: " + std::string(data::view_name(view)) + " prototype read before any update");
  }
  return s.value;
}

bool ViewPrototypeBank::initialized(data::View view) const {
  std::shared_lock lock(mu_);
  return slots_[slot_of(view)].initialized;
}

int64_t ViewPrototypeBank::update_count(data::View view) const {
  std::shared_lock lock(mu_);
  return slots_[slot_of(view)].count;
}

void ViewPrototypeBank::save(const std::filesystem::path& path) const {
  std::shared_lock lock(mu_);
  io::BinaryWriter w;
  w.bytes(kBankMagic, 8);
  w.u32(kFileVersion);
  w.u64(static_cast<uint64_t>(dim_));
  w.f64(alpha_);
  for (const auto& s : slots_) {
    w.u8(s.initialized ? 1 : 0);
    w.u64(static_cast<uint64_t>(s.count));
    w.bytes(s.value.data(), s.value.size() * sizeof(double));
  }
  w.finish(path);
}

ViewPrototypeBank ViewPrototypeBank::load(const std::filesystem::path& path) {
  io::BinaryReader r(path, "memory bank file");
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kBankMagic, 8) != 0) throw FormatError("'" + path.string() + "' is not a memory bank file");
  const uint32_t version = r.u32();
  if (version != kFileVersion) {
    throw FormatError("memory bank file version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kFileVersion) + ")");
  }
  const auto dim = static_cast<int64_t>(r.u64());
  const double alpha = r.f64();
  if (dim <= 0 || dim > (1 << 24)) throw FormatError("memory bank file has implausible dimension");
  ViewPrototypeBank bank(dim, alpha);
  for (auto& s : bank.slots_) {
    s.initialized = r.u8() != 0;
    s.count = static_cast<int64_t>(r.u64());
    r.bytes(s.value.data(), s.value.size() * sizeof(double));
  }
  if (!r.at_end()) throw FormatError("memory bank file has trailing bytes");
  return bank;
}

void ViewPrototypeBank::store(io::Checkpoint& ckpt) const {
  std::shared_lock lock(mu_);
  ckpt.put("memory_bank/alpha", Tensor::scalar(alpha_));
  for (int v = 0; v < data::kNumViews; ++v) {
    const auto& s = slots_[static_cast<size_t>(v)];
    const std::string p = "memory_bank/" + std::string(data::view_name(static_cast<data::View>(v))) + "/";
    ckpt.put(p + "value", Tensor::vector(s.value));
    ckpt.put(p + "count", Tensor::scalar(static_cast<double>(s.count)));
    ckpt.put(p + "initialized", Tensor::scalar(s.initialized ? 1.0 : 0.0));
  }
}

ViewPrototypeBank ViewPrototypeBank::restore(const io::Checkpoint& ckpt) {
  const double alpha = ckpt.get("memory_bank/alpha").item();
  const std::string p0 = "memory_bank/" + std::string(data::view_name(data::View::Aerial)) + "/";
  ViewPrototypeBank bank(static_cast<int64_t>(ckpt.get(p0 + "value").size()), alpha);
  for (int v = 0; v < data::kNumViews; ++v) {
    auto& s = bank.slots_[static_cast<size_t>(v)];
    const std::string p = "memory_bank/" + std::string(data::view_name(static_cast<data::View>(v))) + "/";
    const Tensor& val = ckpt.get(p + "value");
    if (static_cast<int64_t>(val.size()) != bank.dim_) throw FormatError("memory bank prototypes differ in size");
    s.value = val.storage();
    s.count = static_cast<int64_t>(ckpt.get(p + "count").item());
    s.initialized = ckpt.get(p + "initialized").item() != 0.0;
  }
  return bank;
}

bool operator==(const ViewPrototypeBank& a, const ViewPrototypeBank& b) {
  if (&a == &b) return true;
  std::shared_lock la(a.mu_);
  std::shared_lock lb(b.mu_);
  if (a.dim_ != b.dim_ || a.alpha_ != b.alpha_) return false;
  for (size_t i = 0; i < a.slots_.size(); ++i) {
    const auto &x = a.slots_[i], &y = b.slots_[i];
    if (x.initialized != y.initialized || x.count != y.count || x.value != y.value) return false;
  }
  return true;
}

}  // namespace sdreid::model
