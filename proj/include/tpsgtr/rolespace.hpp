#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "tpsgtr/tensor.hpp"

namespace tpsgtr {

// Orthonormal role vectors: the columns of a Sylvester Hadamard matrix, each
// divided by its 2-norm (sqrt(order)). For order 4 every entry is exactly
// +-0.5 and the Gram matrix is the identity.
struct RoleBasis {
  std::size_t order = 0;
  Tensor matrix;  // order x order, columns are the roles

  Tensor column(std::size_t k) const {
    if (k >= order) throw ArgumentError("role column " + std::to_string(k) + " out of range for order " +
                                        std::to_string(order));
    Tensor col({order});
    for (std::size_t i = 0; i < order; ++i) col[i] = matrix.at(i, k);
    return col;
  }
};

inline RoleBasis hadamard_roles(std::size_t order) {
  if (order == 0 || (order & (order - 1)) != 0) {
    throw ArgumentError("Hadamard order must be a power of 2, got " + std::to_string(order));
  }
  Tensor h = Tensor::matrix(1, 1, {1.0});
  for (std::size_t n = 1; n < order; n *= 2) {
    Tensor next({2 * n, 2 * n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double v = h.at(i, j);
        next.at(i, j) = v;
        next.at(i, j + n) = v;
        next.at(i + n, j) = v;
        next.at(i + n, j + n) = -v;
      }
    }
    h = std::move(next);
  }
  const double inv_norm = 1.0 / std::sqrt(static_cast<double>(order));
  for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] *= inv_norm;
  return RoleBasis{order, std::move(h)};
}

// One subject-predicate-object relationship: three filler vectors of equal
// dimension plus optional label metadata.
struct Triplet {
  Tensor subject;
  Tensor predicate;
  Tensor object;
  std::array<std::string, 3> labels{};

  std::size_t dim() const { return subject.size(); }
};

enum class Slot { subject, predicate, object };

inline const char* slot_name(Slot s) {
  switch (s) {
    case Slot::subject: return "subject";
    case Slot::predicate: return "predicate";
    default: return "object";
  }
}

// Role columns used for the three slots. Column 0 (the all-positive column)
// is reserved by default so every bound role is zero-mean.
using SlotColumns = std::array<std::size_t, 3>;
inline constexpr SlotColumns kDefaultSlotColumns{1, 2, 3};

// Sum of the three filler-role outer products, d x order.
struct TpsgtrEncoding {
  Tensor matrix;
  std::size_t basis_order = 0;
  SlotColumns slot_columns = kDefaultSlotColumns;
  Triplet source;
};

inline TpsgtrEncoding bind_triplet(const Triplet& t, const RoleBasis& basis,
                                   const SlotColumns& columns = kDefaultSlotColumns) {
  if (basis.order < 4) {
    throw ArgumentError("three-slot binding needs basis order >= 4, got " + std::to_string(basis.order));
  }
  const std::size_t d = t.subject.size();
  auto check_slot = [&](const Tensor& filler, Slot slot) {
    if (filler.rank() != 1 || filler.size() == 0) {
      throw DimensionError(std::string(slot_name(slot)) + " filler must be a non-empty vector, got shape " +
                           shape_str(filler.shape()));
    }
    if (filler.size() != d) {
      throw DimensionError(std::string(slot_name(slot)) + " filler dimension " + std::to_string(filler.size()) +
                           " does not match subject dimension " + std::to_string(d));
    }
  };
  check_slot(t.subject, Slot::subject);
  check_slot(t.predicate, Slot::predicate);
  check_slot(t.object, Slot::object);

  Tensor m = outer(t.subject, basis.column(columns[0]));
  m = add(m, outer(t.predicate, basis.column(columns[1])));
  m = add(m, outer(t.object, basis.column(columns[2])));
  return TpsgtrEncoding{std::move(m), basis.order, columns, t};
}

// Right-multiplying by a role column; orthonormality makes this exact slot
// recovery up to rounding.
inline Tensor unbind_column(const TpsgtrEncoding& enc, std::size_t column, const RoleBasis& basis) {
  if (enc.basis_order != basis.order) {
    throw ArgumentError("encoding built against order " + std::to_string(enc.basis_order) +
                        " cannot be unbound with order " + std::to_string(basis.order));
  }
  return matvec(enc.matrix, basis.column(column));
}

inline Tensor unbind(const TpsgtrEncoding& enc, Slot slot, const RoleBasis& basis) {
  return unbind_column(enc, enc.slot_columns[static_cast<std::size_t>(slot)], basis);
}

// Row-major flattening to a vector of length d * order.
inline Tensor flatten_encoding(const TpsgtrEncoding& enc) {
  return Tensor({enc.matrix.size()}, enc.matrix.data());
}

// One encoding per triplet, order preserved. Decoders require at least one.
inline std::vector<TpsgtrEncoding> encode_scene(const std::vector<Triplet>& triplets, const RoleBasis& basis,
                                                const SlotColumns& columns = kDefaultSlotColumns) {
  if (triplets.empty()) throw ArgumentError("encode_scene requires at least one triplet");
  std::vector<TpsgtrEncoding> out;
  out.reserve(triplets.size());
  for (const auto& t : triplets) out.push_back(bind_triplet(t, basis, columns));
  return out;
}

}  // namespace tpsgtr
