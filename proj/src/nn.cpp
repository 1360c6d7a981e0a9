#include "volab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "volab/error.hpp"

namespace volab::nn {

Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b) {
  Tensor y = ops::matmul(x, w);
  return b ? ops::add(y, *b) : y;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Zero-pads axis `axis` of x up to `target` on the far side.
Tensor pad_axis(const Tensor& x, std::size_t axis, std::size_t target) {
  const std::size_t have = x.dim(axis);
  if (have >= target) return x;
  Shape zshape = x.shape();
  zshape[axis] = target - have;
  const Tensor parts[2] = {x, Tensor::zeros(zshape)};
  return ops::concat(parts, axis);
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

TokenGrid patch_embed(const Tensor& input, Index3 patch, const PatchEmbedWeights& w,
                      PadPolicy policy) {
  if (input.rank() != 5) throw ShapeError("patch_embed: expected [N, C, D, H, W], got " + shape_str(input.shape()));
  Tensor x = input;
  Index3 grid{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch[a] == 0) throw ShapeError("patch_embed: zero patch size");
    const std::size_t n = input.dim(2 + a);
    if (n % patch[a] != 0) {
      if (policy == PadPolicy::Strict) {
        throw ShapeError("patch_embed: patch " + std::to_string(patch[a]) + " does not divide axis of " +
                         std::to_string(n));
      }
      x = pad_axis(x, 2 + a, ceil_div(n, patch[a]) * patch[a]);
    }
    grid[a] = x.dim(2 + a) / patch[a];
  }
  const std::size_t batch = x.dim(0);
  Tensor y = ops::conv3d(x, w.proj_w, w.proj_b, patch, {0, 0, 0});
  const std::size_t width = y.dim(1);
  const std::size_t L = grid[0] * grid[1] * grid[2];
  y = ops::transpose(ops::reshape(y, {batch, width, L}), 1, 2);

  TokenGrid out;
  out.grid = grid;
  if (w.cls) {
    const std::vector<std::size_t> rows(batch, 0);
    const Tensor cls = ops::reshape(ops::take(ops::reshape(*w.cls, {1, width}), rows), {batch, 1, width});
    const Tensor parts[2] = {cls, y};
    y = ops::concat(parts, 1);
    out.has_cls = true;
  }
  if (w.pos) {
    if (w.pos->shape() != Shape{y.dim(1), width}) {
      throw ShapeError("patch_embed: positional table " + shape_str(w.pos->shape()) +
                       " does not match tokens " + shape_str(y.shape()));
    }
    y = ops::add(y, *w.pos);
  }
  out.tokens = y;
  out.centroids.reserve(L);
  for (std::size_t i = 0; i < grid[0]; ++i)
    for (std::size_t j = 0; j < grid[1]; ++j)
      for (std::size_t k = 0; k < grid[2]; ++k) {
        out.centroids.push_back({(i + 0.5) * patch[0] - 0.5, (j + 0.5) * patch[1] - 0.5,
                                 (k + 0.5) * patch[2] - 0.5});
      }
  return out;
}

WindowPlan window_partition_shift(Index3 grid, Index3 window, Index3 shift, PadPolicy policy) {
  WindowPlan p;
  p.grid = grid;
  p.window = window;
  p.shift = shift;
  for (std::size_t a = 0; a < 3; ++a) {
    if (grid[a] == 0 || window[a] == 0) throw ShapeError("window_partition_shift: zero extent");
    if (shift[a] >= window[a]) throw ShapeError("window_partition_shift: shift must be smaller than window");
    if (grid[a] % window[a] != 0) {
      if (policy == PadPolicy::Strict) {
        throw ShapeError("window_partition_shift: window " + std::to_string(window[a]) +
                         " does not divide grid axis of " + std::to_string(grid[a]));
      }
    }
    p.padded[a] = ceil_div(grid[a], window[a]) * window[a];
  }
  const Index3 nw{p.padded[0] / window[0], p.padded[1] / window[1], p.padded[2] / window[2]};
  p.num_windows = nw[0] * nw[1] * nw[2];
  p.window_tokens = window[0] * window[1] * window[2];
  const std::size_t T = p.window_tokens;
  const std::size_t total = p.num_windows * T;
  p.slot_token.assign(total, WindowPlan::kPad);
  p.token_slot.assign(grid[0] * grid[1] * grid[2], 0);
  p.mask.assign(p.num_windows * T * T, 0.0);

  // Region label per axis of a shifted coordinate (0 when unshifted).
  auto region = [&](std::size_t a, std::size_t s) -> int {
    if (shift[a] == 0) return 0;
    if (s < p.padded[a] - window[a]) return 0;
    return s < p.padded[a] - shift[a] ? 1 : 2;
  };
  std::vector<std::array<int, 3>> slot_region(total);
  std::size_t slot = 0;
  for (std::size_t w0 = 0; w0 < nw[0]; ++w0)
    for (std::size_t w1 = 0; w1 < nw[1]; ++w1)
      for (std::size_t w2 = 0; w2 < nw[2]; ++w2)
        for (std::size_t i = 0; i < window[0]; ++i)
          for (std::size_t j = 0; j < window[1]; ++j)
            for (std::size_t k = 0; k < window[2]; ++k, ++slot) {
              const std::size_t s[3] = {w0 * window[0] + i, w1 * window[1] + j, w2 * window[2] + k};
              std::size_t o[3];
              bool pad = false;
              for (std::size_t a = 0; a < 3; ++a) {
                o[a] = (s[a] + shift[a]) % p.padded[a];
                pad = pad || o[a] >= grid[a];
                slot_region[slot][a] = region(a, s[a]);
              }
              if (!pad) {
                const std::size_t tok = (o[0] * grid[1] + o[1]) * grid[2] + o[2];
                p.slot_token[slot] = tok;
                p.token_slot[tok] = slot;
              }
            }
  for (std::size_t w = 0; w < p.num_windows; ++w)
    for (std::size_t q = 0; q < T; ++q)
      for (std::size_t k = 0; k < T; ++k) {
        const std::size_t sq = w * T + q, sk = w * T + k;
        bool allowed = slot_region[sq] == slot_region[sk];
        if (p.slot_token[sk] == WindowPlan::kPad) allowed = false;
        // Padding queries keep only themselves so every row stays valid.
        if (p.slot_token[sq] == WindowPlan::kPad) allowed = q == k;
        if (!allowed) {
          p.mask[(w * T + q) * T + k] = kNegInf;
          p.all_pass = false;
        }
      }
  return p;
}

Tensor window_gather(const Tensor& tokens, const WindowPlan& plan) {
  if (tokens.rank() != 3 || tokens.dim(1) != plan.token_slot.size()) {
    throw ShapeError("window_gather: tokens " + shape_str(tokens.shape()) + " do not match plan grid");
  }
  const std::size_t N = tokens.dim(0), L = tokens.dim(1), C = tokens.dim(2);
  const std::size_t S = plan.slot_token.size();
  Tensor flat = ops::reshape(tokens, {N * L, C});
  const bool any_pad = std::any_of(plan.slot_token.begin(), plan.slot_token.end(),
                                   [](std::size_t t) { return t == WindowPlan::kPad; });
  if (any_pad) {
    const Tensor parts[2] = {flat, Tensor::zeros({1, C})};
    flat = ops::concat(parts, 0);
  }
  std::vector<std::size_t> idx(N * S);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t t = plan.slot_token[s];
      idx[n * S + s] = t == WindowPlan::kPad ? N * L : n * L + t;
    }
  return ops::reshape(ops::take(flat, idx), {N * plan.num_windows, plan.window_tokens, C});
}

Tensor window_scatter(const Tensor& windows, const WindowPlan& plan, std::size_t batch) {
  const std::size_t S = plan.slot_token.size(), L = plan.token_slot.size();
  if (windows.rank() != 3 || windows.dim(0) * windows.dim(1) != batch * S) {
    throw ShapeError("window_scatter: windows " + shape_str(windows.shape()) + " do not match plan");
  }
  const std::size_t C = windows.dim(2);
  std::vector<std::size_t> idx(batch * L);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t t = 0; t < L; ++t) idx[n * L + t] = n * S + plan.token_slot[t];
  return ops::reshape(ops::take(ops::reshape(windows, {batch * S, C}), idx), {batch, L, C});
}

std::vector<std::size_t> cyclic_shift_order(Index3 grid, Index3 shift) {
  std::vector<std::size_t> order;
  order.reserve(grid[0] * grid[1] * grid[2]);
  for (std::size_t i = 0; i < grid[0]; ++i)
    for (std::size_t j = 0; j < grid[1]; ++j)
      for (std::size_t k = 0; k < grid[2]; ++k) {
        const std::size_t a = (i + shift[0]) % grid[0], b = (j + shift[1]) % grid[1],
                          c = (k + shift[2]) % grid[2];
        order.push_back((a * grid[1] + b) * grid[2] + c);
      }
  return order;
}

std::size_t relative_position_table_size(Index3 w) {
  return (2 * w[0] - 1) * (2 * w[1] - 1) * (2 * w[2] - 1);
}

std::vector<std::size_t> relative_position_index(Index3 w) {
  const std::size_t T = w[0] * w[1] * w[2];
  std::vector<std::size_t> idx(T * T);
  auto coord = [&](std::size_t t) {
    return std::array<long, 3>{static_cast<long>(t / (w[1] * w[2])), static_cast<long>((t / w[2]) % w[1]),
                               static_cast<long>(t % w[2])};
  };
  for (std::size_t q = 0; q < T; ++q)
    for (std::size_t k = 0; k < T; ++k) {
      const auto a = coord(q), b = coord(k);
      const long d0 = a[0] - b[0] + static_cast<long>(w[0]) - 1;
      const long d1 = a[1] - b[1] + static_cast<long>(w[1]) - 1;
      const long d2 = a[2] - b[2] + static_cast<long>(w[2]) - 1;
      idx[q * T + k] = static_cast<std::size_t>((d0 * (2 * static_cast<long>(w[1]) - 1) + d1) *
                                                    (2 * static_cast<long>(w[2]) - 1) + d2);
    }
  return idx;
}

AttentionOutput attention_block(const Tensor& x_in, const BlockWeights& w,
                                const AttentionOptions& o) {
  if (x_in.rank() != 3) throw ShapeError("attention_block: expected [N, L, D], got " + shape_str(x_in.shape()));
  const std::size_t N = x_in.dim(0), Dm = x_in.dim(2), H = o.heads;
  if (H == 0 || Dm % H != 0) throw ShapeError("attention_block: heads must divide the width");
  const std::size_t dh = Dm / H;
  const bool training_dropout = o.dropout > 0.0 && o.rng != nullptr;

  Tensor x = o.plan ? window_gather(x_in, *o.plan) : x_in;
  const std::size_t B = x.dim(0), T = x.dim(1);

  Tensor h = ops::layer_norm(x, w.ln1_g, w.ln1_b);
  Tensor qkv = linear(h, w.qkv_w, w.qkv_b);  // [B, T, 3D]
  qkv = ops::permute(ops::reshape(qkv, {B, T, 3, H, dh}), {2, 0, 3, 1, 4});
  auto part = [&](std::size_t i) { return ops::reshape(ops::slice(qkv, 0, i, 1), {B * H, T, dh}); };
  const Tensor q = part(0), k = part(1), v = part(2);
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (w.rel_bias) {
    if (!o.plan) throw ShapeError("attention_block: relative bias needs a window plan");
    const auto rel = relative_position_index(o.plan->window);
    const Tensor bias = ops::reshape(ops::transpose(ops::take(*w.rel_bias, rel), 0, 1), {H, T, T});
    scores = ops::add(ops::reshape(scores, {B, H, T, T}), bias);
  }
  Tensor attn;
  if (o.plan && !o.plan->all_pass) {
    const std::size_t nW = o.plan->num_windows, TT = T * T;
    std::vector<double> mask(B * H * TT);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t hh = 0; hh < H; ++hh)
        std::copy_n(o.plan->mask.begin() + (b % nW) * TT, TT, mask.begin() + (b * H + hh) * TT);
    attn = ops::masked_softmax(ops::reshape(scores, {B * H, T, T}), mask);
  } else {
    attn = ops::softmax(ops::reshape(scores, {B * H, T, T}), 2);
  }
  Tensor ctx = ops::matmul(attn, v);  // [B*H, T, dh]
  ctx = ops::reshape(ops::permute(ops::reshape(ctx, {B, H, T, dh}), {0, 2, 1, 3}), {B, T, Dm});
  Tensor msa = linear(ctx, w.proj_w, w.proj_b);
  if (training_dropout) msa = ops::dropout(msa, o.dropout, *o.rng);
  x = ops::add(x, msa);

  Tensor f = ops::gelu(linear(ops::layer_norm(x, w.ln2_g, w.ln2_b), w.fc1_w, w.fc1_b));
  f = linear(f, w.fc2_w, w.fc2_b);
  if (training_dropout) f = ops::dropout(f, o.dropout, *o.rng);
  x = ops::add(x, f);

  AttentionOutput out;
  out.tokens = o.plan ? window_scatter(x, *o.plan, N) : x;
  if (o.record) out.weights = ops::reshape(attn, {B, H, T, T});
  return out;
}

std::size_t merge_factor(Index3 grid) {
  std::size_t f = 1;
  for (std::size_t g : grid) f *= g > 1 ? 2 : 1;
  return f;
}

TokenGrid patch_merge(const TokenGrid& g, const MergeWeights& w, PadPolicy policy) {
  if (g.has_cls) throw ShapeError("patch_merge: class tokens are not supported");
  const Tensor& t = g.tokens;
  const std::size_t N = t.dim(0), L = t.dim(1), C = t.dim(2);
  if (L != g.grid_tokens()) throw ShapeError("patch_merge: token count does not match grid");
  Index3 fac{}, out{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (g.grid[a] == 1) {
      fac[a] = 1;
      out[a] = 1;
      continue;
    }
    if (g.grid[a] % 2 != 0 && policy == PadPolicy::Strict) {
      throw ShapeError("patch_merge: odd grid axis of " + std::to_string(g.grid[a]));
    }
    fac[a] = 2;
    out[a] = ceil_div(g.grid[a], 2);
  }
  const std::size_t k = fac[0] * fac[1] * fac[2];
  const std::size_t Lo = out[0] * out[1] * out[2];
  std::vector<std::size_t> idx;
  idx.reserve(N * Lo * k);
  std::vector<Centroid> cents;
  cents.reserve(Lo);
  bool any_pad = false;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < out[0]; ++i)
      for (std::size_t j = 0; j < out[1]; ++j)
        for (std::size_t l = 0; l < out[2]; ++l) {
          Centroid c{0, 0, 0};
          std::size_t real = 0;
          for (std::size_t a = 0; a < fac[0]; ++a)
            for (std::size_t b = 0; b < fac[1]; ++b)
              for (std::size_t e = 0; e < fac[2]; ++e) {
                const std::size_t z = i * fac[0] + a, y = j * fac[1] + b, x = l * fac[2] + e;
                if (z >= g.grid[0] || y >= g.grid[1] || x >= g.grid[2]) {
                  idx.push_back(N * L);
                  any_pad = true;
                  continue;
                }
                const std::size_t tok = (z * g.grid[1] + y) * g.grid[2] + x;
                idx.push_back(n * L + tok);
                if (n == 0) {
                  for (int d = 0; d < 3; ++d) c[d] += g.centroids.at(tok)[d];
                  ++real;
                }
              }
          if (n == 0) {
            for (double& v : c) v /= static_cast<double>(real);
            cents.push_back(c);
          }
        }
  Tensor flat = ops::reshape(t, {N * L, C});
  if (any_pad) {
    const Tensor parts[2] = {flat, Tensor::zeros({1, C})};
    flat = ops::concat(parts, 0);
  }
  Tensor cat = ops::reshape(ops::take(flat, idx), {N, Lo, k * C});
  cat = ops::layer_norm(cat, w.ln_g, w.ln_b);
  TokenGrid r;
  r.tokens = linear(cat, w.w, std::nullopt);
  r.grid = out;
  r.centroids = std::move(cents);
  return r;
}

Tensor lstm_final_hidden(const Tensor& seq, const LstmWeights& w, bool reverse) {
  if (seq.rank() != 3) throw ShapeError("lstm: expected [N, S, C], got " + shape_str(seq.shape()));
  const std::size_t N = seq.dim(0), S = seq.dim(1);
  const std::size_t hsz = w.w_hh.dim(0);
  if (S == 0) throw ShapeError("lstm: empty sequence");
  const Tensor xw = linear(seq, w.w_ih, w.b);  // [N, S, 4h]
  Tensor h = Tensor::zeros({N, hsz});
  Tensor c = Tensor::zeros({N, hsz});
  for (std::size_t step = 0; step < S; ++step) {
    const std::size_t t = reverse ? S - 1 - step : step;
    const Tensor z = ops::add(ops::reshape(ops::slice(xw, 1, t, 1), {N, 4 * hsz}), ops::matmul(h, w.w_hh));
    const Tensor i = ops::sigmoid(ops::slice(z, 1, 0, hsz));
    const Tensor f = ops::sigmoid(ops::slice(z, 1, hsz, hsz));
    const Tensor g = ops::tanh(ops::slice(z, 1, 2 * hsz, hsz));
    const Tensor o = ops::sigmoid(ops::slice(z, 1, 3 * hsz, hsz));
    c = ops::add(ops::mul(f, c), ops::mul(i, g));
    h = ops::mul(o, ops::tanh(c));
  }
  return h;
}

Tensor sinusoidal_encoding(std::size_t length, std::size_t width) {
  std::vector<double> pe(length * width);
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      pe[p * width + i] = i % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq);
    }
  return Tensor({length, width}, std::move(pe));
}

}  // namespace volab::nn
