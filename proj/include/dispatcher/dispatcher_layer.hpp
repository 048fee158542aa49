#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dispatcher/nn.hpp"
#include "dispatcher/ops.hpp"

// The Dispatcher layer: a causal token mixer that repeatedly adds a gated,
// right-rotated copy of the hidden states to themselves, doubling the shift
// each row. Row r moves information 2^r positions forward, so after
// ceil(log2 N) rows every position has received a weighted message from each
// of its predecessors through the binary decomposition of the gap.
namespace dispatcher {

// Number of shift-and-sum rows for a sequence of n tokens: rows r = 0, 1, ...
// while 2^r < n.
inline std::size_t num_rows(std::size_t n) {
  if (n == 0) throw ContractError("num_rows: sequence length must be positive");
  return static_cast<std::size_t>(std::bit_width(n - 1));
}

// mask[r][p] = 1 iff p >= 2^r, i.e. the rotated source of position p did not
// wrap around the end of the sequence.
class CausalShiftMask {
 public:
  CausalShiftMask() = default;
  CausalShiftMask(std::size_t length, std::size_t rows) : length_(length), rows_(rows) {}

  std::size_t length() const { return length_; }
  std::size_t rows() const { return rows_; }
  bool at(std::size_t row, std::size_t pos) const { return pos >= (std::size_t{1} << row); }

  // Constant gate mask laid out like the dispatching coefficients:
  // [length, rows, heads], position-major.
  Tensor as_gate_tensor(std::size_t heads) const {
    Buffer values(length_ * rows_ * heads);
    for (std::size_t p = 0; p < length_; ++p)
      for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t h = 0; h < heads; ++h)
          values[(p * rows_ + r) * heads + h] = at(r, p) ? 1.0 : 0.0;
    return Tensor({length_, rows_, heads}, std::move(values));
  }

 private:
  std::size_t length_ = 0;
  std::size_t rows_ = 0;
};

inline CausalShiftMask build_causal_mask(std::size_t length, std::size_t rows) {
  if (rows != num_rows(length)) {
    throw ContractError("build_causal_mask: " + std::to_string(rows) + " rows given for length " +
                        std::to_string(length) + ", expected " + std::to_string(num_rows(length)));
  }
  return CausalShiftMask(length, rows);
}

// Which shift-and-sum rows run in this forward pass.
struct RowDropoutMask {
  std::vector<std::uint8_t> keep;

  static RowDropoutMask all(std::size_t rows) { return {std::vector<std::uint8_t>(rows, 1)}; }
  std::size_t rows() const { return keep.size(); }
  std::size_t kept() const {
    std::size_t n = 0;
    for (auto k : keep) n += k;
    return n;
  }
};

// Each row is skipped independently with probability dropout_p.
inline RowDropoutMask sample_row_mask(std::size_t rows, double dropout_p, std::mt19937_64& rng) {
  if (!(dropout_p >= 0.0 && dropout_p <= 1.0)) {
    throw ContractError("sample_row_mask: dropout probability must lie in [0, 1]");
  }
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  RowDropoutMask mask{std::vector<std::uint8_t>(rows, 1)};
  for (auto& k : mask.keep) k = uniform(rng) < dropout_p ? 0 : 1;
  return mask;
}

// Shift-and-sum loop over already activated and masked coefficients.
//
//   v:     [..., N, d]
//   gates: [..., N, R, H]   (position-major; head h gates channels
//                            [h*d/H, (h+1)*d/H))
//
// For r = 0..R-1 with keep[r]: v <- v + gates[:, r] * roll_right(v, 2^r).
//
// Gates must be zero wherever the rotated source wrapped (p < 2^r); the
// backward pass relies on it to recover each intermediate state from the
// output instead of storing R copies of v.
inline Tensor dispatch_mix(const Tensor& v, const Tensor& gates, const RowDropoutMask& keep) {
  detail::require_rank_at_least(v, 2, "dispatch_mix");
  if (gates.rank() != v.rank() + 1) {
    throw DimensionError("dispatch_mix: gates " + to_string(gates.shape()) +
                         " do not match values " + to_string(v.shape()));
  }
  const std::size_t n = v.extent(-2), d = v.extent(-1);
  const std::size_t rows = gates.extent(-2), heads = gates.extent(-1);
  const bool lead_ok = std::equal(v.shape().begin(), v.shape().end() - 1, gates.shape().begin());
  if (!lead_ok || heads == 0 || d % heads != 0 || keep.rows() != rows) {
    throw DimensionError("dispatch_mix: values " + to_string(v.shape()) + ", gates " +
                         to_string(gates.shape()) + ", " + std::to_string(keep.rows()) +
                         " dropout rows");
  }
  if (rows > 0 && (std::size_t{1} << (rows - 1)) >= n) {
    throw DimensionError("dispatch_mix: " + std::to_string(rows) + " rows exceed length " +
                         std::to_string(n));
  }
  const std::size_t dh = d / heads;
  const std::size_t batches = v.size() / (n * d);
  auto gd = gates.data();
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t p = 0; p < std::min(n, std::size_t{1} << r); ++p)
        for (std::size_t h = 0; h < heads; ++h)
          if (std::abs(gd[((b * n + p) * rows + r) * heads + h]) > 0.0) {  // NaN passes through
            throw ContractError("dispatch_mix: gate at position " + std::to_string(p) + ", row " +
                                std::to_string(r) + " reads a wrapped source; apply the causal mask");
          }

  Buffer out(v.data().begin(), v.data().end());
  for (std::size_t b = 0; b < batches; ++b) {
    double* state = out.data() + b * n * d;
    const double* g = gd.data() + b * n * rows * heads;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!keep.keep[r]) continue;
      const std::size_t shift = std::size_t{1} << r;
      // Descending p reads state[p - shift] before it is updated. Positions
      // below the shift have zero gates, so their wrapped sources add nothing.
      for (std::size_t q = n; q-- > 0;) {
        double* dst = state + q * d;
        const double* src = state + ((q + n - shift) % n) * d;
        const double* gq = g + (q * rows + r) * heads;
        for (std::size_t h = 0; h < heads; ++h) {
          const double gate = gq[h];
          for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) dst[j] += gate * src[j];
        }
      }
    }
  }
  const std::uint64_t macs = static_cast<std::uint64_t>(batches) * keep.kept() * n * d;
  op_counters().mixing_macs += macs;
  op_counters().total_macs += macs;

  Tensor result = Tensor::from_op(v.shape(), std::move(out), "dispatch_mix", {&v, &gates}, nullptr);
  if (result.requires_grad()) {
    result.slot()->fn->backward = [ys = result.storage(), gs = gates.storage(), keep, batches, n, d,
                                   rows, heads, dh](std::span<const double> gout,
                                                    detail::GradSpans& gin) {
      Buffer state(n * d);
      Buffer gstate(n * d);
      std::uint64_t macs = 0;
      for (std::size_t b = 0; b < batches; ++b) {
        std::copy_n(ys->data() + b * n * d, n * d, state.begin());
        std::copy_n(gout.data() + b * n * d, n * d, gstate.begin());
        const double* g = gs->data() + b * n * rows * heads;
        double* ggates = gin[1].empty() ? nullptr : gin[1].data() + b * n * rows * heads;
        for (std::size_t r = rows; r-- > 0;) {
          if (!keep.keep[r]) continue;
          const std::size_t shift = std::size_t{1} << r;
          // Undo the row: ascending p, state[p - shift] is already restored.
          for (std::size_t p = shift; p < n; ++p) {
            double* dst = state.data() + p * d;
            const double* src = state.data() + (p - shift) * d;
            const double* gp = g + (p * rows + r) * heads;
            for (std::size_t h = 0; h < heads; ++h)
              for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) dst[j] -= gp[h] * src[j];
          }
          if (ggates) {
            for (std::size_t p = 0; p < n; ++p) {
              const double* gp = gstate.data() + p * d;
              const double* src = state.data() + ((p + n - shift) % n) * d;
              for (std::size_t h = 0; h < heads; ++h) {
                double acc = 0.0;
                for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) acc += gp[j] * src[j];
                ggates[(p * rows + r) * heads + h] += acc;
              }
            }
          }
          // dL/dv_r[q] = dL/dv_{r+1}[q] + gate[q + shift] * dL/dv_{r+1}[q + shift];
          // ascending q reads entries above q that are still dL/dv_{r+1}.
          for (std::size_t q = 0; q + shift < n; ++q) {
            double* dst = gstate.data() + q * d;
            const double* src = gstate.data() + (q + shift) * d;
            const double* gp = g + ((q + shift) * rows + r) * heads;
            for (std::size_t h = 0; h < heads; ++h)
              for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) dst[j] += gp[h] * src[j];
          }
          macs += 3 * n * d;
        }
        if (!gin[0].empty()) {
          double* gv = gin[0].data() + b * n * d;
          for (std::size_t i = 0; i < n * d; ++i) gv[i] += gstate[i];
        }
      }
      op_counters().total_macs += macs;
    };
  }
  return result;
}

struct DispatcherParams {
  Linear linear1;  // d -> max_rows * heads coefficient logits
  Linear linear2;  // d -> d values
  Linear linear3;  // d -> d output
  std::size_t heads = 1;
  std::size_t max_rows = 0;
  std::size_t max_seq = 0;

  // `out_stddev` scales linear3, the projection back into the residual stream.
  static DispatcherParams init(std::size_t d, std::size_t heads, std::size_t max_seq,
                               double stddev, double out_stddev, std::mt19937_64& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ContractError("DispatcherParams: d=" + std::to_string(d) +
                          " not divisible by heads=" + std::to_string(heads));
    }
    const std::size_t rows = num_rows(max_seq);
    DispatcherParams p;
    p.heads = heads;
    p.max_rows = rows;
    p.max_seq = max_seq;
    // A layer with max_seq == 1 never mixes; keep one logit so shapes stay valid.
    p.linear1 = Linear::init(d, std::max<std::size_t>(rows, 1) * heads, stddev, rng);
    p.linear2 = Linear::init(d, d, stddev, rng);
    p.linear3 = Linear::init(d, d, out_stddev, rng);
    return p;
  }

  void append_to(NamedParameters& out, const std::string& prefix) const {
    append_parameters(out, prefix + ".linear1", linear1);
    append_parameters(out, prefix + ".linear2", linear2);
    append_parameters(out, prefix + ".linear3", linear3);
  }
};

// Coefficient construction: sigmoid(linear1(input)), first num_rows(N) rows,
// multiplied by the causal shift mask. Shape [..., N, R, H].
inline Tensor dispatch_coefficients(const Tensor& input, const DispatcherParams& params) {
  const std::size_t n = input.extent(-2);
  const std::size_t rows = num_rows(n);
  Tensor c = sigmoid(params.linear1(input));
  c = slice_last(c, rows * params.heads);
  Shape shape(input.shape().begin(), input.shape().end() - 1);
  shape.push_back(rows);
  shape.push_back(params.heads);
  c = reshape(c, std::move(shape));
  return mul(c, build_causal_mask(n, rows).as_gate_tensor(params.heads));
}

// input [..., N, d] -> [..., N, d]. Output position p depends on input
// positions 0..p only. When training, each row is skipped with probability
// dropout_p (one draw per row per call, shared by the whole batch); kept rows
// are not rescaled.
inline Tensor dispatcher_forward(const Tensor& input, const DispatcherParams& params,
                                 bool training, double dropout_p, std::mt19937_64* rng) {
  detail::require_rank_at_least(input, 2, "dispatcher_forward");
  const std::size_t n = input.extent(-2);
  if (n > params.max_seq) {
    throw CapacityError("dispatcher_forward: sequence length " + std::to_string(n) +
                        " exceeds max_seq " + std::to_string(params.max_seq));
  }
  if (!(dropout_p >= 0.0 && dropout_p <= 1.0)) {
    throw ContractError("dispatcher_forward: dropout probability must lie in [0, 1]");
  }
  const std::size_t rows = num_rows(n);
  Tensor values = params.linear2(input);
  if (rows == 0) return params.linear3(values);
  RowDropoutMask keep = RowDropoutMask::all(rows);
  if (training && dropout_p > 0.0) {
    if (!rng) throw ContractError("dispatcher_forward: training with dropout needs an rng");
    keep = sample_row_mask(rows, dropout_p, *rng);
  }
  Tensor mixed = dispatch_mix(values, dispatch_coefficients(input, params), keep);
  return params.linear3(mixed);
}

}  // namespace dispatcher
