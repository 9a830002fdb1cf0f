/*
 * Copyright 2026 The detnoise Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Reduction kernels with an explicit accumulation order.
//
// Every kernel materializes its elementwise products in a fixed canonical
// order and hands them to reduce_sum(), so the only thing an
// AccumulationPolicy can change is the order in which binary32 partial sums
// are combined. The build disables floating-point contraction
// (-ffp-contract=off); a fused multiply-add would otherwise round products
// differently depending on where the compiler chose to fuse.
//
// Permuted is the harness's model of hardware non-determinism: it sums in an
// order drawn uniformly from all n! orders using a logged entropy state, so a
// "non-deterministic" result can always be replayed.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "detnoise/errors.hpp"
#include "detnoise/rng.hpp"
#include "detnoise/tensor.hpp"

namespace detnoise {

struct Sequential {
  friend bool operator==(const Sequential&, const Sequential&) = default;
};

struct PairwiseTree {
  std::size_t block = 8;
  friend bool operator==(const PairwiseTree&, const PairwiseTree&) = default;
};

struct Permuted {
  RngState entropy;
  friend bool operator==(const Permuted&, const Permuted&) = default;
};

struct Compensated {
  friend bool operator==(const Compensated&, const Compensated&) = default;
};

using AccumulationPolicy =
    std::variant<Sequential, PairwiseTree, Permuted, Compensated>;

inline std::string policy_name(const AccumulationPolicy& policy) {
  return std::visit(
      [](const auto& p) -> std::string {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Sequential>) return "sequential";
        else if constexpr (std::is_same_v<T, PairwiseTree>) return "pairwise";
        else if constexpr (std::is_same_v<T, Permuted>) return "permuted";
        else return "compensated";
      },
      policy);
}

/// True when the policy's order depends on entropy rather than only on
/// operand values and memory order.
inline bool is_order_randomized(const AccumulationPolicy& policy) {
  return std::holds_alternative<Permuted>(policy);
}

/// Policy for one sub-reduction identified by `key`. Permuted policies get an
/// independent child entropy; the others are returned unchanged.
inline AccumulationPolicy salted(const AccumulationPolicy& policy,
                                 std::uint64_t key) {
  if (const auto* p = std::get_if<Permuted>(&policy)) {
    return Permuted{split(p->entropy, key)};
  }
  return policy;
}

namespace detail {

inline float sum_sequential(std::span<const float> v) {
  float acc = 0.0f;
  for (float x : v) acc += x;
  return acc;
}

inline float sum_pairwise(std::span<const float> v, std::size_t block) {
  const std::size_t nblocks = (v.size() + block - 1) / block;
  if (nblocks <= 1) return sum_sequential(v);
  const std::size_t mid = (nblocks / 2) * block;
  const float left = sum_pairwise(v.first(mid), block);
  const float right = sum_pairwise(v.subspan(mid), block);
  return left + right;
}

// Neumaier's variant of Kahan summation.
inline float sum_compensated(std::span<const float> v) {
  float sum = 0.0f;
  float comp = 0.0f;
  for (float x : v) {
    const float t = sum + x;
    if (std::fabs(sum) >= std::fabs(x)) {
      comp += (sum - t) + x;
    } else {
      comp += (x - t) + sum;
    }
    sum = t;
  }
  return sum + comp;
}

inline float sum_permuted(std::span<const float> v, RngState entropy) {
  const auto order = permutation(entropy, v.size());
  float acc = 0.0f;
  for (std::size_t i : order) acc += v[i];
  return acc;
}

}  // namespace detail

inline float reduce_sum(std::span<const float> values,
                        const AccumulationPolicy& policy) {
  return std::visit(
      [&](const auto& p) -> float {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Sequential>) {
          return detail::sum_sequential(values);
        } else if constexpr (std::is_same_v<T, PairwiseTree>) {
          return detail::sum_pairwise(values, p.block == 0 ? 1 : p.block);
        } else if constexpr (std::is_same_v<T, Permuted>) {
          return detail::sum_permuted(values, p.entropy);
        } else {
          return detail::sum_compensated(values);
        }
      },
      policy);
}

/// Elementwise products in index order, then reduce_sum().
inline float dot(std::span<const float> a, std::span<const float> b,
                 const AccumulationPolicy& policy) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: length mismatch " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
  std::vector<float> products(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) products[i] = a[i] * b[i];
  return reduce_sum(products, policy);
}

inline float dot(const Tensor& a, const Tensor& b,
                 const AccumulationPolicy& policy) {
  require_rank(a, 1, "dot");
  require_rank(b, 1, "dot");
  return dot(a.data(), b.data(), policy);
}

/// out[i,j] = dot(row i of a, column j of b). Under Permuted each output
/// element reduces with its own child entropy keyed by i*n+j.
inline Tensor matmul(const Tensor& a, const Tensor& b,
                     const AccumulationPolicy& policy) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " +
                     shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  std::vector<float> products(k);
  const bool randomized = is_order_randomized(policy);
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = av.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) products[p] = row[p] * bv[p * n + j];
      const std::size_t idx = i * n + j;
      ov[idx] = randomized ? reduce_sum(products, salted(policy, idx))
                           : reduce_sum(products, policy);
    }
  }
  return out;
}

/// Sums over the leading (batch) axis of a rows x cols matrix: one reduction
/// per column, column j reduced with salted(policy, j).
inline std::vector<float> reduce_rows(const Tensor& m,
                                      const AccumulationPolicy& policy) {
  require_rank(m, 2, "reduce_rows");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<float> out(cols);
  std::vector<float> column(rows);
  const auto mv = m.data();
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t r = 0; r < rows; ++r) column[r] = mv[r * cols + j];
    out[j] = reduce_sum(column, salted(policy, j));
  }
  return out;
}

inline Tensor transpose(const Tensor& t) {
  require_rank(t, 2, "transpose");
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = t.at(i, j);
  return out;
}

/// Patch matrix for a stride-1, zero-padded ("same") k x k convolution over
/// a batch of H x W x C images: one row per output pixel (n, y, x), columns in
/// (dy, dx, c) order. Padding positions contribute explicit zero products.
inline Tensor im2col(std::span<const float> images, std::size_t batch,
                     std::size_t h, std::size_t w, std::size_t c,
                     std::size_t k) {
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (images.size() != batch * h * w * c) {
    throw ShapeError("conv2d: input length does not match H x W x C");
  }
  const std::size_t pad = k / 2;
  const std::size_t cols = k * k * c;
  Tensor patches({batch * h * w, cols});
  auto pv = patches.data();
  for (std::size_t n = 0; n < batch; ++n) {
    const float* img = images.data() + n * h * w * c;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        float* row = pv.data() + ((n * h + y) * w + x) * cols;
        std::size_t col = 0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const auto sy = static_cast<std::ptrdiff_t>(y + dy) -
                            static_cast<std::ptrdiff_t>(pad);
            const auto sx = static_cast<std::ptrdiff_t>(x + dx) -
                            static_cast<std::ptrdiff_t>(pad);
            const bool inside = sy >= 0 && sx >= 0 &&
                                sy < static_cast<std::ptrdiff_t>(h) &&
                                sx < static_cast<std::ptrdiff_t>(w);
            for (std::size_t ch = 0; ch < c; ++ch, ++col) {
              row[col] = inside ? img[(static_cast<std::size_t>(sy) * w +
                                       static_cast<std::size_t>(sx)) *
                                          c +
                                      ch]
                                : 0.0f;
            }
          }
        }
      }
    }
  }
  return patches;
}

/// Direct convolution, stride 1, "same" zero padding.
/// input: H x W x C, kernel: k x k x C x F, result: H x W x F.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel,
                     const AccumulationPolicy& policy) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const std::size_t k = kernel.dim(0), f = kernel.dim(3);
  if (kernel.dim(1) != k) throw ShapeError("conv2d: kernel must be square");
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (kernel.dim(2) != c) {
    throw ShapeError("conv2d: kernel channels " + std::to_string(kernel.dim(2)) +
                     " do not match input channels " + std::to_string(c));
  }
  const Tensor patches = im2col(input.data(), 1, h, w, c, k);
  const Tensor out = matmul(patches, kernel.reshaped({k * k * c, f}), policy);
  return out.reshaped({h, w, f});
}

}  // namespace detnoise
