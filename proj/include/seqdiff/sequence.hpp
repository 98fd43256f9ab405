#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "seqdiff/diffusion.hpp"

namespace seqdiff {

/// Keeps the last `length` items and left-pads with the padding ID.
inline std::vector<int> left_pad(std::span<const int> items, int length) {
  std::vector<int> out(static_cast<std::size_t>(length), kPaddingId);
  const std::size_t keep = std::min(items.size(), out.size());
  std::copy(items.end() - static_cast<std::ptrdiff_t>(keep), items.end(), out.end() - static_cast<std::ptrdiff_t>(keep));
  return out;
}

/// Last T-1 interactions followed by the [unk] placeholder, left-padded to T.
inline std::vector<int> prepare_inference_sequence(std::span<const int> history, int length) {
  if (history.empty()) throw std::invalid_argument("inference needs a non-empty history");
  if (length < 2) throw std::invalid_argument("sequence length must be at least 2");
  std::vector<int> out = left_pad(history, length - 1);
  out.push_back(kUnknownId);
  return out;
}

}  // namespace seqdiff
