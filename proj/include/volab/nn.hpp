#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "volab/ops.hpp"
#include "volab/rng.hpp"
#include "volab/tensor.hpp"

// Layer building blocks shared by the model families. Everything works on
// 5-D volumes [N, C, D, H, W] or token tensors [N, L, width]; 2-D inputs use
// D = 1 and depth-1 kernels.
namespace volab::nn {

using ops::Index3;
using Centroid = std::array<double, 3>;

enum class PadPolicy { Strict, Pad };

// x [..., K] x w [K, M] (+ b [M]).
Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b);

struct TokenGrid {
  Tensor tokens;  // [N, L, width]; row 0 is the class token when has_cls
  Index3 grid{1, 1, 1};
  bool has_cls = false;
  std::vector<Centroid> centroids;  // grid tokens only, voxel units
  std::size_t grid_tokens() const { return grid[0] * grid[1] * grid[2]; }
};

struct PatchEmbedWeights {
  Tensor proj_w;  // [width, C, p0, p1, p2]
  Tensor proj_b;  // [width]
  std::optional<Tensor> cls;  // [width]
  std::optional<Tensor> pos;  // [L (+1 with cls), width]
};

// Non-overlapping patches projected to `width`. Strict mode requires the
// patch to divide the input; pad mode zero-pads the far side first.
TokenGrid patch_embed(const Tensor& input, Index3 patch, const PatchEmbedWeights& w,
                      PadPolicy policy = PadPolicy::Strict);

// Cyclic shift + window partition of a token grid. Slots are ordered window
// by window (raster order over the shifted grid), tokens in raster order
// inside each window.
struct WindowPlan {
  Index3 grid{}, window{}, shift{}, padded{};
  std::size_t num_windows = 0;
  std::size_t window_tokens = 0;
  static constexpr std::size_t kPad = static_cast<std::size_t>(-1);
  std::vector<std::size_t> slot_token;  // grid token per slot, or kPad
  std::vector<std::size_t> token_slot;  // slot per grid token
  // num_windows x T x T additive entries: 0 allowed, -inf blocked.
  std::vector<double> mask;
  bool all_pass = true;
};

// Blocks attention between tokens that were not neighbors before the shift
// and, in pad mode, attention to padding tokens.
WindowPlan window_partition_shift(Index3 grid, Index3 window, Index3 shift,
                                  PadPolicy policy = PadPolicy::Strict);
// [N, L, C] -> [N * windows, T, C] (padding slots are zeros) and back.
Tensor window_gather(const Tensor& tokens, const WindowPlan& plan);
Tensor window_scatter(const Tensor& windows, const WindowPlan& plan, std::size_t batch);
// Token order of the grid after shift and inverse shift; used by tests.
std::vector<std::size_t> cyclic_shift_order(Index3 grid, Index3 shift);

std::size_t relative_position_table_size(Index3 window);
// T*T indices into the bias table for query/key pairs inside a window.
std::vector<std::size_t> relative_position_index(Index3 window);

struct BlockWeights {
  Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  std::optional<Tensor> rel_bias;  // [table size, heads]
};

struct AttentionOptions {
  std::size_t heads = 1;
  const WindowPlan* plan = nullptr;  // null: global attention over all tokens
  double dropout = 0.0;              // on sub-block outputs, training only
  Rng* rng = nullptr;
  bool record = false;
};

struct AttentionOutput {
  Tensor tokens;                  // same shape as input
  std::optional<Tensor> weights;  // [B, heads, T, T]; B = N * windows or N
};

// Pre-norm block: x + MSA(LN(x)), then x + FFN(LN(x)) with GELU.
AttentionOutput attention_block(const Tensor& x, const BlockWeights& w,
                                const AttentionOptions& options);

struct MergeWeights {
  Tensor ln_g, ln_b;  // [k * C]
  Tensor w;           // [k * C, 2C]
};

// 2x downsampling along every axis longer than one token. Children are
// concatenated in (d, h, w) raster order; centroids are averaged.
TokenGrid patch_merge(const TokenGrid& g, const MergeWeights& w,
                      PadPolicy policy = PadPolicy::Strict);
// Children per merged token for a grid (8 in 3-D, 4 in 2-D, ...).
std::size_t merge_factor(Index3 grid);

struct LstmWeights {
  Tensor w_ih;  // [C, 4h], gate order i, f, g, o
  Tensor w_hh;  // [h, 4h]
  Tensor b;     // [4h]
};

// Final hidden state [N, h] after running over seq [N, S, C].
Tensor lstm_final_hidden(const Tensor& seq, const LstmWeights& w, bool reverse);

// Standard sin/cos table [length, width].
Tensor sinusoidal_encoding(std::size_t length, std::size_t width);

}  // namespace volab::nn
