#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <shared_mutex>
#include <span>
#include <vector>

#include "sdreid/checkpoint.hpp"
#include "sdreid/data.hpp"

namespace sdreid::model {

/// Momentum-averaged global view prototypes. The first update of a view sets
/// its prototype; later ones apply M <- alpha*M + (1-alpha)*p.
class ViewPrototypeBank {
 public:
  static constexpr uint32_t kFileVersion = 1;

  ViewPrototypeBank(int64_t dim, double alpha);
  ViewPrototypeBank(const ViewPrototypeBank& other);
  ViewPrototypeBank& operator=(const ViewPrototypeBank& other);

  int64_t dim() const { return dim_; }
  double alpha() const { return alpha_; }

  void update(data::View view, std::span<const double> p);
  /// Copy of the prototype; throws ContractError when the view was never updated.
  std::vector<double> get(data::View view) const;
  bool initialized(data::View view) const;
  int64_t update_count(data::View view) const;

  void save(const std::filesystem::path& path) const;
  static ViewPrototypeBank load(const std::filesystem::path& path);

  /// Stored under the reserved "memory_bank/" prefix of a checkpoint.
  void store(io::Checkpoint& ckpt) const;
  static ViewPrototypeBank restore(const io::Checkpoint& ckpt);

  friend bool operator==(const ViewPrototypeBank& a, const ViewPrototypeBank& b);

 private:
  struct Slot {
    std::vector<double> value;
    int64_t count = 0;
    bool initialized = false;
  };
  int64_t dim_;
  double alpha_;
  std::array<Slot, data::kNumViews> slots_;
  mutable std::shared_mutex mu_;
};

}  // namespace sdreid::model
