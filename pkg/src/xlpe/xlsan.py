"""Multi-head self-attention with cross-lingual position integration.

Three integration strategies share one attention core:

* input-level (InXL): the fused encoding tanh(PE_abs U + PE_xl V) is added
  to the embeddings before a standard encoder.
* head-level (HeadXL): the first ``tau`` of H heads project a stream
  positioned with cross-lingual indices, the remaining heads a stream with
  absolute indices; the query/key/value weight matrices are split into a
  ``tau * d_v`` wide XL column block and the complementary block, and one
  shared output projection recombines all heads.
* combination: HeadXL whose XL stream carries the fused encoding instead
  of the raw cross-lingual one.

The encoder/decoder stacks below are batched (batch, time, dim) float64
arrays with hand-written backward passes; every backward is validated by
the finite-difference checker in :mod:`xlpe.numkit`. ``tau = 0`` collapses
head-level integration to the plain absolute-position transformer
bit-exactly, as does ``tau = H`` under an identity permutation.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import posenc
from .btg import Permutation
from .numkit import ShapeError, matmul, softmax_rows, softmax_rows_backward
from .posenc import ConfigError, FusionParams

LN_EPS = 1e-6

VARIANTS = (
    "ape",
    "inxl",
    "headxl",
    "combination",
    "nopos",
    "cf-ape",
    "cf-inxl",
    "cf-nopos",
)

_FUSION_VARIANTS = {"inxl", "combination", "cf-inxl"}
_XL_VARIANTS = {"inxl", "headxl", "combination", "cf-inxl"}
_SPLIT_VARIANTS = {"headxl", "combination"}
_CONTEXT_FREE = {"cf-ape", "cf-inxl", "cf-nopos"}


@dataclass
class ModelConfig:
    """Architecture and seeding knobs shared by every experiment."""

    d_model: int = 64
    n_heads: int = 8
    tau: int = 2
    variant: str = "ape"
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    vocab_size: int = 50
    fusion_mode: str = "full"
    xl_inject: str = "per-layer"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )
        if self.d_model <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"head count {self.n_heads} must divide d_model {self.d_model}"
            )
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even, got {self.d_model}")
        if not 0 <= self.tau <= self.n_heads:
            raise ConfigError(
                f"tau must lie in [0, {self.n_heads}], got {self.tau}"
            )
        if self.xl_inject not in ("per-layer", "input-only"):
            raise ConfigError(f"bad xl_inject mode {self.xl_inject!r}")
        if self.fusion_mode not in ("full", "diag"):
            raise ConfigError(f"bad fusion mode {self.fusion_mode!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if min(self.enc_layers, self.dec_layers, self.d_ff) < 1:
            raise ConfigError("layer counts and d_ff must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def uses_fusion(self) -> bool:
        return self.variant in _FUSION_VARIANTS

    @property
    def uses_xl(self) -> bool:
        return self.variant in _XL_VARIANTS

    @property
    def context_free(self) -> bool:
        return self.variant in _CONTEXT_FREE

    @property
    def bos_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# primitive layers (batched, explicit backward)
# ---------------------------------------------------------------------------


def _mm(x3: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(B, T, a) @ (a, b) as one GEMM."""
    B, T, a = x3.shape
    return (x3.reshape(B * T, a) @ w).reshape(B, T, w.shape[1])


def _gram(x3: np.ndarray, y3: np.ndarray) -> np.ndarray:
    """sum over batch and time of outer products: (a, b) weight gradient."""
    n = x3.shape[0] * x3.shape[1]
    a, b = x3.shape[-1], y3.shape[-1]
    return x3.reshape(n, a).T @ y3.reshape(n, b)


def layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * istd
    return g * xhat + b, (xhat, istd, g)


def layer_norm_backward(d_out, cache):
    xhat, istd, g = cache
    axes = tuple(range(d_out.ndim - 1))
    dg = np.sum(d_out * xhat, axis=axes)
    db = np.sum(d_out, axis=axes)
    dxh = d_out * g
    dx = istd * (
        dxh
        - np.mean(dxh, axis=-1, keepdims=True)
        - xhat * np.mean(dxh * xhat, axis=-1, keepdims=True)
    )
    return dx, dg, db


def ffn_forward(x, w1, b1, w2, b2):
    pre = _mm(x, w1) + b1
    act = np.maximum(pre, 0.0)
    return _mm(act, w2) + b2, (x, pre, act)


def ffn_backward(d_out, cache, w1, w2):
    x, pre, act = cache
    d_act = _mm(d_out, w2.T)
    dw2 = _gram(act, d_out)
    db2 = d_out.reshape(-1, d_out.shape[-1]).sum(axis=0)
    d_pre = d_act * (pre > 0.0)
    dw1 = _gram(x, d_pre)
    db1 = d_pre.reshape(-1, d_pre.shape[-1]).sum(axis=0)
    dx = _mm(d_pre, w1.T)
    return dx, dw1, db1, dw2, db2


def causal_mask(T: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above."""
    m = np.zeros((T, T))
    m[np.triu_indices(T, k=1)] = -np.inf
    return m


# ---------------------------------------------------------------------------
# attention core
# ---------------------------------------------------------------------------


def _heads(x: np.ndarray, H: int) -> np.ndarray:
    B, T, d = x.shape
    return x.reshape(B, T, H, d // H).transpose(0, 2, 1, 3)


def _unheads(x: np.ndarray) -> np.ndarray:
    B, H, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dk)


def _attention_heads_forward(qh, kh, vh, mask=None):
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = np.matmul(qh, kh.swapaxes(-1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    attn = softmax_rows(scores)
    return np.matmul(attn, vh), attn, scale


def _attention_heads_backward(d_ctx, qh, kh, vh, attn, scale):
    d_attn = np.matmul(d_ctx, vh.swapaxes(-1, -2))
    d_vh = np.matmul(attn.swapaxes(-1, -2), d_ctx)
    d_scores = softmax_rows_backward(d_attn, attn)
    d_qh = np.matmul(d_scores, kh) * scale
    d_kh = np.matmul(d_scores.swapaxes(-1, -2), qh) * scale
    return d_qh, d_kh, d_vh


def _block_project(z_xl, z_abs, w, split):
    """Project the XL stream through the first ``split`` columns of ``w``
    and the absolute stream through the rest."""
    return np.concatenate(
        [_mm(z_xl, w[:, :split]), _mm(z_abs, w[:, split:])], axis=-1
    )


def _block_project_backward(d_out, z_xl, z_abs, w, split):
    d_left = np.ascontiguousarray(d_out[..., :split])
    d_right = np.ascontiguousarray(d_out[..., split:])
    dw = np.empty_like(w)
    dw[:, :split] = _gram(z_xl, d_left)
    dw[:, split:] = _gram(z_abs, d_right)
    return _mm(d_left, w[:, :split].T), _mm(d_right, w[:, split:].T), dw


def split_self_attention_forward(z_xl, z_abs, wq, wk, wv, wo, H, tau):
    """Encoder self-attention with the first ``tau`` heads fed by the XL
    stream and the rest by the absolute stream (one shared output
    projection). ``tau = 0`` is plain multi-head self-attention over
    ``z_abs``."""
    split = tau * (wq.shape[1] // H)
    q = _block_project(z_xl, z_abs, wq, split)
    k = _block_project(z_xl, z_abs, wk, split)
    v = _block_project(z_xl, z_abs, wv, split)
    qh, kh, vh = _heads(q, H), _heads(k, H), _heads(v, H)
    ctx, attn, scale = _attention_heads_forward(qh, kh, vh)
    merged = _unheads(ctx)
    out = _mm(merged, wo)
    cache = dict(
        z_xl=z_xl, z_abs=z_abs, qh=qh, kh=kh, vh=vh, attn=attn, scale=scale,
        merged=merged, split=split, H=H,
    )
    return out, cache


def split_self_attention_backward(d_out, cache, wq, wk, wv, wo):
    c = cache
    d_merged = _mm(d_out, wo.T)
    dwo = _gram(c["merged"], d_out)
    d_ctx = _heads(d_merged, c["H"])
    d_qh, d_kh, d_vh = _attention_heads_backward(
        d_ctx, c["qh"], c["kh"], c["vh"], c["attn"], c["scale"]
    )
    d_z_xl = np.zeros_like(c["z_xl"])
    d_z_abs = np.zeros_like(c["z_abs"])
    grads = {}
    for name, w, dh in (("wq", wq, d_qh), ("wk", wk, d_kh), ("wv", wv, d_vh)):
        d_proj = _unheads(dh)
        dl, dr, dw = _block_project_backward(
            d_proj, c["z_xl"], c["z_abs"], w, c["split"]
        )
        d_z_xl += dl
        d_z_abs += dr
        grads[name] = dw
    grads["wo"] = dwo
    return d_z_xl, d_z_abs, grads


def cross_attention_forward(q_in, kv_in, wq, wk, wv, wo, H, mask=None):
    """Full-matrix multi-head attention; decoder self-attention passes the
    same array for ``q_in`` and ``kv_in`` plus a causal mask."""
    qh = _heads(_mm(q_in, wq), H)
    kh = _heads(_mm(kv_in, wk), H)
    vh = _heads(_mm(kv_in, wv), H)
    ctx, attn, scale = _attention_heads_forward(qh, kh, vh, mask)
    merged = _unheads(ctx)
    out = _mm(merged, wo)
    cache = dict(
        q_in=q_in, kv_in=kv_in, qh=qh, kh=kh, vh=vh, attn=attn, scale=scale,
        merged=merged, H=H,
    )
    return out, cache


def cross_attention_backward(d_out, cache, wq, wk, wv, wo):
    c = cache
    d_merged = _mm(d_out, wo.T)
    dwo = _gram(c["merged"], d_out)
    d_ctx = _heads(d_merged, c["H"])
    d_qh, d_kh, d_vh = _attention_heads_backward(
        d_ctx, c["qh"], c["kh"], c["vh"], c["attn"], c["scale"]
    )
    dq = _unheads(d_qh)
    dk = _unheads(d_kh)
    dv = _unheads(d_vh)
    grads = {
        "wq": _gram(c["q_in"], dq),
        "wk": _gram(c["kv_in"], dk),
        "wv": _gram(c["kv_in"], dv),
        "wo": dwo,
    }
    d_q_in = _mm(dq, wq.T)
    d_kv_in = _mm(dk, wk.T) + _mm(dv, wv.T)
    return d_q_in, d_kv_in, grads


# ---------------------------------------------------------------------------
# single-sentence ops (the module surface mirrored by the batched stacks)
# ---------------------------------------------------------------------------


@dataclass
class AttentionLayer:
    """Projection weights of one attention layer; the query/key/value
    matrices are viewable as H column blocks of width d_v."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator) -> "AttentionLayer":
        bound = 1.0 / np.sqrt(d_model)
        draw = lambda: rng.uniform(-bound, bound, size=(d_model, d_model))
        return cls(draw(), draw(), draw(), draw())


def project_qkv(z: np.ndarray, layer: AttentionLayer):
    """Q = Z W_Q, K = Z W_K, V = Z W_V."""
    return matmul(z, layer.w_q), matmul(z, layer.w_k), matmul(z, layer.w_v)


def scaled_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) V for single-sentence matrices."""
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key rows {k.shape} do not match value rows {v.shape}")
    weights = softmax_rows(q @ k.T / np.sqrt(q.shape[1]))
    return weights @ v


def multi_head_forward(z: np.ndarray, layer: AttentionLayer, H: int) -> np.ndarray:
    """Standard multi-head self-attention over one sentence."""
    if z.shape[1] % H != 0:
        raise ConfigError(f"head count {H} must divide width {z.shape[1]}")
    out, _ = split_self_attention_forward(
        z[None], z[None], layer.w_q, layer.w_k, layer.w_v, layer.w_o, H, tau=0
    )
    return out[0]


def headxl_forward(
    x: np.ndarray, perm: Permutation, layer: AttentionLayer, cfg: ModelConfig
) -> np.ndarray:
    """Head-level integration over one sentence: the first tau heads attend
    over X + PE_xl, the rest over X + PE_abs."""
    cfg.validate()
    pe_abs = posenc.absolute_pe(x.shape[0], x.shape[1])
    z_abs = posenc.add_pe(x, pe_abs)
    z_xl = posenc.add_pe(x, posenc.xl_pe(perm, x.shape[1]))
    out, _ = split_self_attention_forward(
        z_xl[None], z_abs[None], layer.w_q, layer.w_k, layer.w_v, layer.w_o,
        cfg.n_heads, cfg.tau,
    )
    return out[0]


def combination_forward(
    x: np.ndarray,
    perm: Permutation,
    layer: AttentionLayer,
    params: FusionParams,
    cfg: ModelConfig,
) -> np.ndarray:
    """HeadXL with the XL stream carrying the fused encoding."""
    cfg.validate()
    pe_abs = posenc.absolute_pe(x.shape[0], x.shape[1])
    fused = posenc.fuse_inxl(pe_abs, posenc.xl_pe(perm, x.shape[1]), params)
    z_abs = posenc.add_pe(x, pe_abs)
    z_xl = posenc.add_pe(x, fused)
    out, _ = split_self_attention_forward(
        z_xl[None], z_abs[None], layer.w_q, layer.w_k, layer.w_v, layer.w_o,
        cfg.n_heads, cfg.tau,
    )
    return out[0]


# ---------------------------------------------------------------------------
# full encoder/decoder model
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape map of every trainable parameter, in creation order."""
    d, dff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (V, d),
        "tgt_emb": (V + 1, d),
    }

    def attention(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, dff)
        shapes[f"{prefix}.b1"] = (dff,)
        shapes[f"{prefix}.w2"] = (dff, d)
        shapes[f"{prefix}.b2"] = (d,)

    if not cfg.context_free:
        for i in range(cfg.enc_layers):
            attention(f"enc{i}.att")
            norm(f"enc{i}.ln1")
            ffn(f"enc{i}.ffn")
            norm(f"enc{i}.ln2")
    for i in range(cfg.dec_layers):
        attention(f"dec{i}.self")
        norm(f"dec{i}.ln1")
        attention(f"dec{i}.cross")
        norm(f"dec{i}.ln2")
        ffn(f"dec{i}.ffn")
        norm(f"dec{i}.ln3")
    shapes["out_w"] = (d, V)
    shapes["out_b"] = (V,)
    if cfg.uses_fusion:
        fshape = (d, d) if cfg.fusion_mode == "full" else (d,)
        shapes["fusion_u"] = fshape
        shapes["fusion_v"] = fshape
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    """Exact trainable-parameter count for a variant/config."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded init: embeddings uniform in [-0.5, 0.5] (comparable in scale
    to the position encodings they are summed with), projections scaled
    uniform by fan-in, norms at identity, biases at zero."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("src_emb", "tgt_emb"):
            params[name] = rng.uniform(-0.5, 0.5, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        elif leaf in ("b", "b1", "b2", "out_b") or name == "out_b":
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


class Model:
    """Encoder/decoder with explicit forward caches and backward passes.

    Forward methods take integer token arrays of shape (batch, time) plus,
    for XL variants, the per-sentence reordered slot array. Gradients come
    back as a dict keyed like the parameter dict.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    # -- encoder --------------------------------------------------------

    def encode(self, src: np.ndarray, slots: np.ndarray | None = None):
        """Run the encoder for the configured variant.

        ``slots`` holds each token's cross-lingual position (batch, time);
        required for XL variants, ignored otherwise.
        """
        cfg, p = self.cfg, self.params
        B, T = src.shape
        if cfg.uses_xl and slots is None:
            raise ConfigError(f"variant {cfg.variant!r} needs reordering slots")
        emb = p["src_emb"][src]
        pe_abs = posenc.absolute_pe(T, cfg.d_model)
        cache: dict = {"src": src, "T": T, "pe_abs": pe_abs}

        pe_xl = fused = None
        if cfg.uses_xl:
            pe_xl = pe_abs[np.asarray(slots, dtype=np.intp)]
        if cfg.uses_fusion:
            pre = _fusion_project(pe_abs, p["fusion_u"]) + _fusion_project(
                pe_xl, p["fusion_v"]
            )
            fused = np.tanh(pre)
            cache["fused"] = fused
            cache["pe_xl"] = pe_xl

        xl_base = fused if cfg.uses_fusion else pe_xl

        if cfg.variant in ("nopos", "cf-nopos"):
            h = emb
        elif cfg.variant in ("inxl", "cf-inxl"):
            h = emb + xl_base
        else:  # ape, headxl, combination, cf-ape carry the absolute stream
            h = emb + pe_abs
        cache["emb"] = emb

        if cfg.context_free:
            cache["layers"] = []
            return h, cache

        use_split = cfg.variant in _SPLIT_VARIANTS
        delta = xl_base - pe_abs if use_split else None
        layers = []
        for i in range(cfg.enc_layers):
            pre = f"enc{i}"
            lc: dict = {"h_in": h}
            if use_split:
                if i == 0:
                    z_xl = emb + xl_base
                    lc["z_xl_kind"] = "input"
                elif cfg.xl_inject == "per-layer":
                    z_xl = h + delta
                    lc["z_xl_kind"] = "delta"
                else:
                    z_xl = h
                    lc["z_xl_kind"] = "stream"
                tau = cfg.tau
            else:
                z_xl = h
                lc["z_xl_kind"] = "stream"
                tau = 0
            att, lc["att"] = split_self_attention_forward(
                z_xl, h, p[f"{pre}.att.wq"], p[f"{pre}.att.wk"],
                p[f"{pre}.att.wv"], p[f"{pre}.att.wo"], cfg.n_heads, tau,
            )
            x1, lc["ln1"] = layer_norm_forward(
                h + att, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]
            )
            ff, lc["ffn"] = ffn_forward(
                x1, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"],
                p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"],
            )
            h, lc["ln2"] = layer_norm_forward(
                x1 + ff, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]
            )
            layers.append(lc)
        cache["layers"] = layers
        return h, cache

    def encode_backward(self, d_out, cache, grads):
        cfg, p = self.cfg, self.params
        d_h = d_out
        d_emb_total = np.zeros_like(cache["emb"])
        d_fused_total = None
        if cfg.uses_fusion:
            d_fused_total = np.zeros_like(cache["fused"])
        use_split = cfg.variant in _SPLIT_VARIANTS

        for i in reversed(range(len(cache["layers"]))):
            pre = f"enc{i}"
            lc = cache["layers"][i]
            d_x1_plus_ff, dg, db = layer_norm_backward(d_h, lc["ln2"])
            grads[f"{pre}.ln2.g"] += dg
            grads[f"{pre}.ln2.b"] += db
            d_x1_ffn, dw1, db1, dw2, db2 = ffn_backward(
                d_x1_plus_ff, lc["ffn"], p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.w2"]
            )
            grads[f"{pre}.ffn.w1"] += dw1
            grads[f"{pre}.ffn.b1"] += db1
            grads[f"{pre}.ffn.w2"] += dw2
            grads[f"{pre}.ffn.b2"] += db2
            d_x1 = d_x1_plus_ff + d_x1_ffn
            d_h_plus_att, dg, db = layer_norm_backward(d_x1, lc["ln1"])
            grads[f"{pre}.ln1.g"] += dg
            grads[f"{pre}.ln1.b"] += db
            d_z_xl, d_z_abs, att_grads = split_self_attention_backward(
                d_h_plus_att, lc["att"], p[f"{pre}.att.wq"],
                p[f"{pre}.att.wk"], p[f"{pre}.att.wv"], p[f"{pre}.att.wo"],
            )
            for w, dw in att_grads.items():
                grads[f"{pre}.att.{w}"] += dw
            d_h = d_h_plus_att + d_z_abs
            kind = lc["z_xl_kind"]
            if kind == "stream":
                d_h += d_z_xl
            elif kind == "delta":
                d_h += d_z_xl
                if cfg.uses_fusion:
                    d_fused_total += d_z_xl
            else:  # input: z_xl = emb + xl_base
                d_emb_total += d_z_xl
                if cfg.uses_fusion:
                    d_fused_total += d_z_xl

        # input combination
        d_emb_total += d_h
        if cfg.variant in ("inxl", "cf-inxl"):
            d_fused_total += d_h

        if cfg.uses_fusion:
            d_pre = d_fused_total * (1.0 - cache["fused"] ** 2)
            du, dv = _fusion_grads(cache["pe_abs"], cache["pe_xl"], d_pre, cfg)
            grads["fusion_u"] += du
            grads["fusion_v"] += dv
        np.add.at(grads["src_emb"], cache["src"], d_emb_total)

    # -- decoder ---------------------------------------------------------

    def decode(self, tgt_in: np.ndarray, enc_out: np.ndarray):
        """Standard decoder over teacher-forced inputs; caches the
        per-layer cross-attention weights for alignment extraction."""
        cfg, p = self.cfg, self.params
        B, T = tgt_in.shape
        emb = p["tgt_emb"][tgt_in]
        h = emb + posenc.absolute_pe(T, cfg.d_model)
        mask = causal_mask(T)
        cache: dict = {"tgt_in": tgt_in, "layers": [], "cross_attn": []}
        for i in range(cfg.dec_layers):
            pre = f"dec{i}"
            lc: dict = {}
            satt, lc["self"] = cross_attention_forward(
                h, h, p[f"{pre}.self.wq"], p[f"{pre}.self.wk"],
                p[f"{pre}.self.wv"], p[f"{pre}.self.wo"], cfg.n_heads, mask,
            )
            x1, lc["ln1"] = layer_norm_forward(
                h + satt, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]
            )
            catt, lc["cross"] = cross_attention_forward(
                x1, enc_out, p[f"{pre}.cross.wq"], p[f"{pre}.cross.wk"],
                p[f"{pre}.cross.wv"], p[f"{pre}.cross.wo"], cfg.n_heads,
            )
            cache["cross_attn"].append(lc["cross"]["attn"])
            x2, lc["ln2"] = layer_norm_forward(
                x1 + catt, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]
            )
            ff, lc["ffn"] = ffn_forward(
                x2, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"],
                p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"],
            )
            h, lc["ln3"] = layer_norm_forward(
                x2 + ff, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"]
            )
            cache["layers"].append(lc)
        logits = _mm(h, p["out_w"]) + p["out_b"]
        cache["h_final"] = h
        return logits, cache

    def decode_backward(self, d_logits, cache, grads):
        cfg, p = self.cfg, self.params
        grads["out_w"] += _gram(cache["h_final"], d_logits)
        grads["out_b"] += d_logits.reshape(-1, d_logits.shape[-1]).sum(axis=0)
        d_h = _mm(d_logits, p["out_w"].T)
        d_enc_total = None
        for i in reversed(range(cfg.dec_layers)):
            pre = f"dec{i}"
            lc = cache["layers"][i]
            d_x2_plus_ff, dg, db = layer_norm_backward(d_h, lc["ln3"])
            grads[f"{pre}.ln3.g"] += dg
            grads[f"{pre}.ln3.b"] += db
            d_x2_ffn, dw1, db1, dw2, db2 = ffn_backward(
                d_x2_plus_ff, lc["ffn"], p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.w2"]
            )
            grads[f"{pre}.ffn.w1"] += dw1
            grads[f"{pre}.ffn.b1"] += db1
            grads[f"{pre}.ffn.w2"] += dw2
            grads[f"{pre}.ffn.b2"] += db2
            d_x2 = d_x2_plus_ff + d_x2_ffn
            d_x1_plus_catt, dg, db = layer_norm_backward(d_x2, lc["ln2"])
            grads[f"{pre}.ln2.g"] += dg
            grads[f"{pre}.ln2.b"] += db
            d_x1_att, d_enc, catt_grads = cross_attention_backward(
                d_x1_plus_catt, lc["cross"], p[f"{pre}.cross.wq"],
                p[f"{pre}.cross.wk"], p[f"{pre}.cross.wv"], p[f"{pre}.cross.wo"],
            )
            for w, dw in catt_grads.items():
                grads[f"{pre}.cross.{w}"] += dw
            d_enc_total = d_enc if d_enc_total is None else d_enc_total + d_enc
            d_x1 = d_x1_plus_catt + d_x1_att
            d_h_plus_satt, dg, db = layer_norm_backward(d_x1, lc["ln1"])
            grads[f"{pre}.ln1.g"] += dg
            grads[f"{pre}.ln1.b"] += db
            d_q, d_kv, satt_grads = cross_attention_backward(
                d_h_plus_satt, lc["self"], p[f"{pre}.self.wq"],
                p[f"{pre}.self.wk"], p[f"{pre}.self.wv"], p[f"{pre}.self.wo"],
            )
            for w, dw in satt_grads.items():
                grads[f"{pre}.self.{w}"] += dw
            d_h = d_h_plus_satt + d_q + d_kv
        np.add.at(grads["tgt_emb"], cache["tgt_in"], d_h)
        return d_enc_total

    # -- losses ----------------------------------------------------------

    def forward(self, src, tgt, slots=None):
        """Teacher-forced forward pass; returns logits and both caches."""
        enc_out, enc_cache = self.encode(src, slots)
        tgt_in = np.concatenate(
            [np.full((tgt.shape[0], 1), self.cfg.bos_id, dtype=tgt.dtype),
             tgt[:, :-1]],
            axis=1,
        )
        logits, dec_cache = self.decode(tgt_in, enc_out)
        return logits, enc_cache, dec_cache

    def loss_and_grads(self, src, tgt, slots=None):
        """Mean token cross-entropy plus gradients for every parameter."""
        logits, enc_cache, dec_cache = self.forward(src, tgt, slots)
        loss, d_logits = cross_entropy(logits, tgt)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        d_enc = self.decode_backward(d_logits, dec_cache, grads)
        self.encode_backward(d_enc, enc_cache, grads)
        aux = {
            "logits": logits,
            "cross_attn": dec_cache["cross_attn"],
        }
        return loss, grads, aux


def _fusion_project(pe, w):
    return pe @ w if w.ndim == 2 else pe * w


def _fusion_grads(pe_abs, pe_xl, d_pre, cfg: ModelConfig):
    # pe_abs is (T, d) shared across the batch; pe_xl is (B, T, d)
    if cfg.fusion_mode == "full":
        du = pe_abs.T @ d_pre.sum(axis=0)
        dv = _gram(pe_xl, d_pre)
    else:
        du = (pe_abs[None] * d_pre).sum(axis=(0, 1))
        dv = (pe_xl * d_pre).sum(axis=(0, 1))
    return du, dv


def cross_entropy(logits: np.ndarray, gold: np.ndarray):
    """Mean negative log-likelihood over all tokens, with the gradient."""
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True))
    logp = logits - lse
    B, T, V = logits.shape
    rows = np.arange(B)[:, None], np.arange(T)[None, :]
    nll = -logp[rows[0], rows[1], gold]
    loss = float(nll.mean())
    d_logits = np.exp(logp)
    d_logits[rows[0], rows[1], gold] -= 1.0
    d_logits /= B * T
    return loss, d_logits


def token_accuracy(logits: np.ndarray, gold: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == gold))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model) -> None:
    """Write config plus named float64 parameter blocks; round-trips
    bit-exactly."""
    arrays = dict(model.params)
    arrays["__config__"] = np.frombuffer(
        json.dumps(model.cfg.to_dict(), sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        buf = io.BytesIO()
        np.savez(buf, **{k.replace(".", "/"): v for k, v in arrays.items()})
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Model:
    with np.load(path) as data:
        cfg = ModelConfig.from_dict(
            json.loads(bytes(data["__config__"]).decode())
        )
        params = {
            k.replace("/", "."): data[k]
            for k in data.files
            if k != "__config__"
        }
    return Model(cfg, params)
