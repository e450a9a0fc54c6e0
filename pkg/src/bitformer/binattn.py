"""Binary multi-head self-attention with low-rank residual estimation.

Scores come from two-level queries and keys; the post-softmax map is
re-binarized to {0, level}, so the value mix is a selection product that the
packed kernels evaluate with whole-word operations.  Two optional estimator
paths model what weight binarization throws away:

* score path — three trainable rank-r couplings of the layer input with
  itself, added to the raw binary scores before the 1/sqrt(head width)
  scaling.  Expanding the query/key product around the binarized weights
  leaves exactly three cross terms (binary x remainder, remainder x binary,
  remainder x remainder); with rank equal to the hidden width the factors
  can hold those matrices verbatim, and binary scores plus the estimate
  reproduce the full-precision scores to float accuracy.
* value path — one rank-r map of the layer input whose per-head column block
  rides on the same selection pattern as the binary value mix, recovering
  the value-projection remainder the same way.

``attention_forward`` is the float simulation used for training and can
record onto a tape; ``attention_forward_packed`` evaluates the identical
layer with packed-word kernels and agrees with the simulation to float
accuracy (the tests pin 1e-8).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bitkernel import binary_gemm, pack_signs, ternary_binary_gemm
from .numerics import (
    Array,
    DenseMatrix,
    Tape,
    _softmax_rows_np,
    add,
    add_bias,
    add_constant,
    concat_cols,
    matmul,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)
from .quant import (
    ALPHA_FLOOR,
    ElasticQuant,
    QuantMode,
    attention_selection_bits,
    binarize_activation_pm1,
    binarize_attention_01,
    binarize_weight,
    weight_row_scales,
)

__all__ = [
    "AttentionLayerState",
    "ResidualEstimators",
    "attention_forward",
    "attention_forward_packed",
    "binary_linear",
    "binary_linear_packed",
    "init_estimators",
    "make_attention_layer",
    "score_residual",
    "zero_estimators",
]


# ---------------------------------------------------------------------------
# residual estimators
# ---------------------------------------------------------------------------


@dataclass
class ResidualEstimators:
    """Rank-r factors for the score and value residual paths.

    All factors are (hidden, rank).  The unstarred pair stands in for the
    binarized query/key weights, the starred factors for binarization
    remainders; ``u_v_star @ v_v_star.T`` approximates the value remainder
    map in input-times-matrix orientation, with head h owning rows
    ``h*head_width:(h+1)*head_width`` of ``v_v_star``.
    """

    w_q: DenseMatrix
    w_k: DenseMatrix
    w_q_star: DenseMatrix
    w_k_star: DenseMatrix
    u_v_star: DenseMatrix
    v_v_star: DenseMatrix
    use_kq: bool = True
    use_attv: bool = True

    @property
    def rank(self) -> int:
        return self.w_q.cols

    def parameters(self) -> list[DenseMatrix]:
        return [self.w_q, self.w_k, self.w_q_star, self.w_k_star, self.u_v_star, self.v_v_star]


def zero_estimators(hidden: int, rank: int, name: str = "est") -> ResidualEstimators:
    """All-zero factors: both estimator paths contribute exactly nothing."""
    if rank < 1:
        raise ValueError(f"estimator rank must be >= 1, got {rank}")

    def z(suffix: str) -> DenseMatrix:
        return DenseMatrix(np.zeros((hidden, rank)), name=f"{name}.{suffix}")

    return ResidualEstimators(
        w_q=z("w_q"),
        w_k=z("w_k"),
        w_q_star=z("w_q_star"),
        w_k_star=z("w_k_star"),
        u_v_star=z("u_v_star"),
        v_v_star=z("v_v_star"),
    )


def _spectral_factor(m: Array, rank: int) -> Array:
    """Leading left singular vectors scaled by the roots of their values."""
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    return u[:, :rank] * np.sqrt(s[:rank])


def init_estimators(
    wq: Array,
    wk: Array,
    wv: Array,
    hidden: int,
    rank: int,
    name: str = "est",
) -> ResidualEstimators:
    """Spectral initialization from the layer's projection weights.

    Score factors take the top singular directions of the matrix each slot
    stands for (binarized weight or remainder, transposed into input-times-
    matrix orientation).  The value pair splits one truncated SVD of the
    value remainder, so at full rank their product holds it exactly.
    """
    if not (1 <= rank <= hidden):
        raise ValueError(f"estimator rank must be in [1, {hidden}], got {rank}")
    est = zero_estimators(hidden, rank, name=name)
    wq = np.asarray(wq, dtype=np.float64)
    wk = np.asarray(wk, dtype=np.float64)
    wv = np.asarray(wv, dtype=np.float64)
    wq_b = binarize_weight(None, DenseMatrix(wq)).data
    wk_b = binarize_weight(None, DenseMatrix(wk)).data
    wv_b = binarize_weight(None, DenseMatrix(wv)).data

    est.w_q.data[...] = _spectral_factor(wq_b.T, rank)
    est.w_k.data[...] = _spectral_factor(wk_b.T, rank)
    est.w_q_star.data[...] = _spectral_factor((wq - wq_b).T, rank)
    est.w_k_star.data[...] = _spectral_factor((wk - wk_b).T, rank)

    u, s, vt = np.linalg.svd((wv - wv_b).T, full_matrices=False)
    root = np.sqrt(s[:rank])
    est.u_v_star.data[...] = u[:, :rank] * root
    est.v_v_star.data[...] = vt[:rank].T * root
    return est


def score_residual(tape: Tape | None, a: DenseMatrix, est: ResidualEstimators) -> DenseMatrix:
    """Three-term rank-r estimate of what weight binarization drops from scores.

    With t_x = a @ w_x, returns t_q t_ks^T + t_qs t_k^T + t_qs t_ks^T —
    shared by every head, added to raw scores before the head-width scaling.
    """
    t_q = matmul(tape, a, est.w_q)
    t_k = matmul(tape, a, est.w_k)
    t_qs = matmul(tape, a, est.w_q_star)
    t_ks = matmul(tape, a, est.w_k_star)
    term1 = matmul(tape, t_q, transpose(tape, t_ks))
    term2 = matmul(tape, t_qs, transpose(tape, t_k))
    term3 = matmul(tape, t_qs, transpose(tape, t_ks))
    return add(tape, add(tape, term1, term2), term3)


# ---------------------------------------------------------------------------
# layer state
# ---------------------------------------------------------------------------


@dataclass
class AttentionLayerState:
    """Weights and binarizers for one binary attention layer.

    Projection weights are stored (out, in) and applied as ``x @ w.T``; the
    weight binarizer therefore scales per output unit.  Every linear has its
    own input binarizer, and every head its own query/key/value (two-level,
    signed) and attention ({0, level}) binarizers.
    """

    heads: int
    wq: DenseMatrix
    wk: DenseMatrix
    wv: DenseMatrix
    wo: DenseMatrix
    bq: DenseMatrix
    bk: DenseMatrix
    bv: DenseMatrix
    bo: DenseMatrix
    in_q: ElasticQuant
    in_k: ElasticQuant
    in_v: ElasticQuant
    in_o: ElasticQuant
    head_q: list[ElasticQuant]
    head_k: list[ElasticQuant]
    head_v: list[ElasticQuant]
    head_att: list[ElasticQuant]
    estimators: ResidualEstimators | None = None

    @property
    def hidden(self) -> int:
        return self.wq.rows

    @property
    def head_width(self) -> int:
        return self.hidden // self.heads

    def binarizers(self) -> list[ElasticQuant]:
        out = [self.in_q, self.in_k, self.in_v, self.in_o]
        out += self.head_q + self.head_k + self.head_v + self.head_att
        return out

    def parameters(self) -> list[DenseMatrix]:
        out = [self.wq, self.wk, self.wv, self.wo, self.bq, self.bk, self.bv, self.bo]
        for q in self.binarizers():
            out += [q.alpha, q.beta]
        if self.estimators is not None:
            out += self.estimators.parameters()
        return out


def make_attention_layer(
    rng: np.random.Generator,
    hidden: int,
    heads: int,
    rank: int = 0,
    seq_hint: int = 64,
    name: str = "attn",
) -> AttentionLayerState:
    """Fresh layer: normal(0, 0.02) weights, zero biases, unit binarizers.

    Attention binarizer levels start at 3/seq_hint so a fresh softmax row
    (mass about 1/seq) lands mid-range of the {0, level} rounding.  With
    rank > 0 the estimators are spectrally initialized from the drawn
    query/key/value weights.
    """
    if hidden % heads != 0:
        raise ValueError(f"hidden ({hidden}) must divide evenly into {heads} heads")

    def w(suffix: str) -> DenseMatrix:
        return DenseMatrix(rng.normal(0.0, 0.02, size=(hidden, hidden)), name=f"{name}.{suffix}")

    def b(suffix: str) -> DenseMatrix:
        return DenseMatrix(np.zeros((1, hidden)), name=f"{name}.{suffix}")

    layer = AttentionLayerState(
        heads=heads,
        wq=w("wq"),
        wk=w("wk"),
        wv=w("wv"),
        wo=w("wo"),
        bq=b("bq"),
        bk=b("bk"),
        bv=b("bv"),
        bo=b("bo"),
        in_q=ElasticQuant.create(name=f"{name}.in_q"),
        in_k=ElasticQuant.create(name=f"{name}.in_k"),
        in_v=ElasticQuant.create(name=f"{name}.in_v"),
        in_o=ElasticQuant.create(name=f"{name}.in_o"),
        head_q=[ElasticQuant.create(name=f"{name}.h{h}.q") for h in range(heads)],
        head_k=[ElasticQuant.create(name=f"{name}.h{h}.k") for h in range(heads)],
        head_v=[ElasticQuant.create(name=f"{name}.h{h}.v") for h in range(heads)],
        head_att=[
            ElasticQuant.create(alpha=3.0 / seq_hint, name=f"{name}.h{h}.att") for h in range(heads)
        ],
    )
    if rank > 0:
        layer.estimators = init_estimators(
            layer.wq.data, layer.wk.data, layer.wv.data, hidden, rank, name=f"{name}.est"
        )
    return layer


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def binary_linear(
    tape: Tape | None,
    a: DenseMatrix,
    w: DenseMatrix,
    b: DenseMatrix,
    in_q: ElasticQuant,
    mode: QuantMode = "hard",
) -> DenseMatrix:
    """Binarized affine map: two-level input times two-level weights plus bias."""
    aq = binarize_activation_pm1(tape, a, in_q, mode)
    wb = binarize_weight(tape, w, mode)
    return add_bias(tape, matmul(tape, aq, transpose(tape, wb)), b)


def binary_linear_packed(a: Array, w: DenseMatrix, b: DenseMatrix, in_q: ElasticQuant) -> Array:
    """Packed-kernel twin of :func:`binary_linear` (hard mode)."""
    alpha = max(float(in_q.alpha.data[0, 0]), ALPHA_FLOOR)
    beta = float(in_q.beta.data[0, 0])
    scales = alpha * weight_row_scales(w.data)
    bits_a = pack_signs(a - beta)
    bits_w = pack_signs(w.data - w.data.mean(axis=1, keepdims=True))
    return binary_gemm(bits_a, bits_w, scales).data + b.data


def attention_forward(
    tape: Tape | None,
    a: DenseMatrix,
    layer: AttentionLayerState,
    mode: QuantMode = "hard",
    pad_bias: Array | None = None,
    trace: dict | None = None,
) -> DenseMatrix:
    """Float-simulated binary attention over one sequence (rows = positions).

    ``pad_bias`` is an additive (n, n) score bias (large negative on padded
    key columns), applied after the head-width scaling.  ``trace``, when a
    dict, receives per-head soft maps ("att") and hard selections
    ("att_selected").
    """
    dk = layer.head_width
    inv = 1.0 / math.sqrt(dk)
    est = layer.estimators

    q = binary_linear(tape, a, layer.wq, layer.bq, layer.in_q, mode)
    k = binary_linear(tape, a, layer.wk, layer.bk, layer.in_k, mode)
    v = binary_linear(tape, a, layer.wv, layer.bv, layer.in_v, mode)

    res = score_residual(tape, a, est) if est is not None and est.use_kq else None
    if est is not None and est.use_attv:
        au = matmul(tape, a, est.u_v_star)
        vt_star = transpose(tape, est.v_v_star)
    else:
        au = vt_star = None

    if trace is not None:
        trace["att"] = []
        trace["att_selected"] = []

    ctx_parts: list[DenseMatrix] = []
    for h in range(layer.heads):
        lo, hi = h * dk, (h + 1) * dk
        qb = binarize_activation_pm1(tape, slice_cols(tape, q, lo, hi), layer.head_q[h], mode)
        kb = binarize_activation_pm1(tape, slice_cols(tape, k, lo, hi), layer.head_k[h], mode)
        vb = binarize_activation_pm1(tape, slice_cols(tape, v, lo, hi), layer.head_v[h], mode)

        scores = matmul(tape, qb, transpose(tape, kb))
        if res is not None:
            scores = add(tape, scores, res)
        scores = scale(tape, scores, inv)
        if pad_bias is not None:
            scores = add_constant(tape, scores, pad_bias)

        att = softmax_rows(tape, scores)
        attb = binarize_attention_01(tape, att, layer.head_att[h], mode)

        ctx = matmul(tape, attb, vb)
        if au is not None:
            ctx = add(tape, ctx, matmul(tape, matmul(tape, attb, au), slice_cols(tape, vt_star, lo, hi)))
        ctx_parts.append(ctx)

        if trace is not None:
            trace["att"].append(att.data.copy())
            trace["att_selected"].append((attb.data != 0.0).astype(np.float64))

    ctx_all = concat_cols(tape, ctx_parts)
    return binary_linear(tape, ctx_all, layer.wo, layer.bo, layer.in_o, mode)


def attention_forward_packed(
    a: Array,
    layer: AttentionLayerState,
    pad_bias: Array | None = None,
) -> Array:
    """Packed-kernel attention: same layer, bit-level kernels, hard mode.

    Mirrors :func:`attention_forward` operation for operation so the two
    routes agree to float accuracy; only the binary products themselves run
    through popcount accumulators instead of float multiplies.  Agreement
    assumes generic binarizer parameters: if an activation lands exactly on
    a sign threshold (possible at the all-zero-threshold init, where some
    activations are exact ±1-lattice cancellations), the integer accumulator
    and float summation may resolve its sign differently.
    """
    a_np = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    dk = layer.head_width
    inv = 1.0 / math.sqrt(dk)
    est = layer.estimators

    q = binary_linear_packed(a_np, layer.wq, layer.bq, layer.in_q)
    k = binary_linear_packed(a_np, layer.wk, layer.bk, layer.in_k)
    v = binary_linear_packed(a_np, layer.wv, layer.bv, layer.in_v)

    res = score_residual(None, DenseMatrix(a_np), est).data if est is not None and est.use_kq else None
    if est is not None and est.use_attv:
        au = a_np @ est.u_v_star.data
        vt_star = np.ascontiguousarray(est.v_v_star.data.T)
    else:
        au = vt_star = None

    ctx_parts: list[Array] = []
    for h in range(layer.heads):
        lo, hi = h * dk, (h + 1) * dk
        alpha_q = max(float(layer.head_q[h].alpha.data[0, 0]), ALPHA_FLOOR)
        alpha_k = max(float(layer.head_k[h].alpha.data[0, 0]), ALPHA_FLOOR)
        alpha_v = max(float(layer.head_v[h].alpha.data[0, 0]), ALPHA_FLOOR)
        beta_q = float(layer.head_q[h].beta.data[0, 0])
        beta_k = float(layer.head_k[h].beta.data[0, 0])
        beta_v = float(layer.head_v[h].beta.data[0, 0])

        bits_q = pack_signs(q[:, lo:hi] - beta_q)
        bits_k = pack_signs(k[:, lo:hi] - beta_k)
        scores = binary_gemm(bits_q, bits_k, alpha_q * alpha_k).data
        if res is not None:
            scores = scores + res
        scores = scores * inv
        if pad_bias is not None:
            scores = scores + pad_bias

        att = _softmax_rows_np(scores)
        sel = attention_selection_bits(att, layer.head_att[h])
        alpha_att = float(layer.head_att[h].alpha.data[0, 0])

        bits_sel = pack_signs(2.0 * sel - 1.0)
        bits_v = pack_signs((v[:, lo:hi] - beta_v).T)  # gemm wants value rows as output columns
        ctx = ternary_binary_gemm(bits_sel, bits_v, alpha_att * alpha_v).data
        if au is not None:
            ctx = ctx + (alpha_att * sel) @ au @ np.ascontiguousarray(vt_star[:, lo:hi])
        ctx_parts.append(ctx)

    ctx_all = np.hstack(ctx_parts)
    return binary_linear_packed(ctx_all, layer.wo, layer.bo, layer.in_o)
