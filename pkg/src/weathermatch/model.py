"""The restoration network: hierarchical encoder, per-level spatial/channel
matching, and a subtractive U-shaped decoder.

Data flow for one episode: the degraded query and the support images run
through a shared encoder.  At each hierarchy level the query embedding Q is
matched against key embeddings K (encoded support inputs) and value
embeddings V (encoded support degradation patterns X - Y) by attention along
the spatial axis (tokens = positions, features = channels) and the channel
axis (tokens = channels, features = positions).  The fused matches feed a
decoder that predicts the query's degradation pattern, which is subtracted
from the query before a final projection.

With the zero-pattern initialization (pattern head zeroed, output projection
= identity) the whole network is exactly the identity map on [0,1] images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Var
from .errors import ParameterError, ShapeError

MATCH_MODES = ("both", "spatial", "channel", "none")
MATCH_FEATURES = ("pattern", "background")


@dataclass
class ModelConfig:
    levels: int = 3
    widths: list = field(default_factory=lambda: [16, 32, 64])
    heads: list = field(default_factory=lambda: [2, 4, 4])
    input_size: int = 64
    match_mode: str = "both"
    match_features: str = "pattern"

    def validate(self) -> "ModelConfig":
        if len(self.widths) != self.levels:
            raise ParameterError(f"model.widths needs {self.levels} entries, got {len(self.widths)}")
        if len(self.heads) != self.levels:
            raise ParameterError(f"model.heads needs {self.levels} entries, got {len(self.heads)}")
        for w, h in zip(self.widths, self.heads):
            if w % h:
                raise ParameterError(f"width {w} not divisible by head count {h}")
        if self.input_size % (1 << self.levels):
            raise ParameterError(f"input_size {self.input_size} not divisible by 2^levels")
        if self.input_size >> self.levels < 2:
            raise ParameterError("deepest level would be smaller than 2x2")
        for lvl, h in enumerate(self.heads):
            hw = (self.input_size >> (lvl + 1)) ** 2
            if hw % h:
                raise ParameterError(f"level {lvl}: HW={hw} not divisible by heads={h}")
        if self.match_mode not in MATCH_MODES:
            raise ParameterError(f"unknown match_mode {self.match_mode!r}")
        if self.match_features not in MATCH_FEATURES:
            raise ParameterError(f"unknown match_features {self.match_features!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "widths": list(self.widths),
            "heads": list(self.heads),
            "input_size": self.input_size,
            "match_mode": self.match_mode,
            "match_features": self.match_features,
        }


# ---------------------------------------------------------------------------
# parameter construction


def _block_params(store, rng, prefix, c):
    store.add(f"{prefix}.dw.weight", rng.normal(0, np.sqrt(1 / 9), (3, 3, c)))
    store.add(f"{prefix}.dw.bias", np.zeros(c), is_bias=True)
    store.add(f"{prefix}.norm.gamma", np.ones(c))
    store.add(f"{prefix}.norm.beta", np.zeros(c), is_bias=True)
    store.add(f"{prefix}.expand.weight", rng.normal(0, np.sqrt(1 / c), (c, 2 * c)))
    store.add(f"{prefix}.expand.bias", np.zeros(2 * c), is_bias=True)
    store.add(f"{prefix}.project.weight", rng.normal(0, np.sqrt(1 / (2 * c)), (2 * c, c)))
    store.add(f"{prefix}.project.bias", np.zeros(c), is_bias=True)


def _conv1_params(store, rng, prefix, cin, cout):
    store.add(f"{prefix}.weight", rng.normal(0, np.sqrt(1 / cin), (cin, cout)))
    store.add(f"{prefix}.bias", np.zeros(cout), is_bias=True)


def _dw_params(store, rng, prefix, c):
    store.add(f"{prefix}.weight", rng.normal(0, np.sqrt(1 / 9), (3, 3, c)))
    store.add(f"{prefix}.bias", np.zeros(c), is_bias=True)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Build and initialize the full parameter store.

    The degradation-pattern head starts at zero and the output projection at
    identity, making the untrained network an exact identity map.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParameterStore(dtype)
    widths = cfg.widths

    store.add("enc.patch.weight", rng.normal(0, np.sqrt(1 / 12), (12, widths[0])))
    store.add("enc.patch.bias", np.zeros(widths[0]), is_bias=True)
    for lvl in range(cfg.levels):
        for blk in range(2):
            _block_params(store, rng, f"enc.l{lvl}.b{blk}", widths[lvl])
        if lvl < cfg.levels - 1:
            store.add(
                f"enc.down{lvl}.weight",
                rng.normal(0, np.sqrt(1 / (4 * widths[lvl])), (4 * widths[lvl], widths[lvl + 1])),
            )
            store.add(f"enc.down{lvl}.bias", np.zeros(widths[lvl + 1]), is_bias=True)

    for lvl in range(cfg.levels):
        c = widths[lvl]
        for branch in ("spatial", "channel"):
            base = f"match.l{lvl}.{branch}"
            for proj in ("q", "k", "v"):
                _conv1_params(store, rng, f"{base}.{proj}1", c, c)
                _dw_params(store, rng, f"{base}.{proj}2", c)
            _conv1_params(store, rng, f"{base}.out", c, c)
            _conv1_params(store, rng, f"{base}.fuse", 2 * c, c)
            store.add(f"{base}.log_alpha", np.zeros(cfg.heads[lvl]))
        _conv1_params(store, rng, f"match.l{lvl}.bypass", c, c)

    for lvl in range(cfg.levels - 2, -1, -1):
        store.add(
            f"dec.up{lvl}.weight",
            rng.normal(0, np.sqrt(1 / widths[lvl + 1]), (widths[lvl + 1], 4 * widths[lvl])),
        )
        store.add(f"dec.up{lvl}.bias", np.zeros(widths[lvl]), is_bias=True)
        for blk in range(2):
            _block_params(store, rng, f"dec.l{lvl}.b{blk}", widths[lvl])
    store.add(
        "dec.final_up.weight", rng.normal(0, np.sqrt(1 / widths[0]), (widths[0], 4 * widths[0]))
    )
    store.add("dec.final_up.bias", np.zeros(widths[0]), is_bias=True)
    _block_params(store, rng, "dec.refine.b0", widths[0])
    store.add("dec.pattern.weight", np.zeros((widths[0], 3)))
    store.add("dec.pattern.bias", np.zeros(3), is_bias=True)
    store.add("dec.output.weight", np.eye(3))
    store.add("dec.output.bias", np.zeros(3), is_bias=True)
    store.check_partition()
    return store


def bias_parameters(store: ParameterStore) -> list:
    """Names of all additive-offset tensors, in stable store order."""
    return store.bias_names()


# ---------------------------------------------------------------------------
# forward pieces


def _residual_block(x: Var, store, prefix: str, train: bool) -> Var:
    p = lambda name: store.leaf(f"{prefix}.{name}", train)
    t = dc.depthwise_conv3x3(x, p("dw.weight"), p("dw.bias"))
    t = dc.layer_norm(t, p("norm.gamma"), p("norm.beta"))
    t = dc.pointwise_conv(t, p("expand.weight"), p("expand.bias"))
    t = dc.gelu(t)
    t = dc.pointwise_conv(t, p("project.weight"), p("project.bias"))
    return dc.add(x, t)


def encode(store: ParameterStore, cfg: ModelConfig, images, train: bool = False) -> list:
    """Hierarchical features for a (H,W,3) image or an (B,H,W,3) batch.

    Level l output is (H/2^(l+1), W/2^(l+1), widths[l]).
    """
    x = images if isinstance(images, Var) else dc.constant(np.asarray(images, store.dtype))
    spatial = x.value.shape[-3]
    if spatial != cfg.input_size or x.value.shape[-2] != cfg.input_size:
        raise ShapeError(
            f"encoder expects {cfg.input_size}x{cfg.input_size} input, got {x.value.shape}"
        )
    x = dc.strided_conv(x, store.leaf("enc.patch.weight", train), store.leaf("enc.patch.bias", train))
    outputs = []
    for lvl in range(cfg.levels):
        for blk in range(2):
            x = _residual_block(x, store, f"enc.l{lvl}.b{blk}", train)
        outputs.append(x)
        if lvl < cfg.levels - 1:
            x = dc.strided_conv(
                x,
                store.leaf(f"enc.down{lvl}.weight", train),
                store.leaf(f"enc.down{lvl}.bias", train),
            )
    return outputs


def mdta_core(q, k, v, log_alpha, heads: int, normalize: bool = True, return_attention: bool = False):
    """Transposed attention with learnable per-head temperature.

    q: (d, l) or (B, d, l); k, v: (N*d, l).  Heads split the feature axis l.
    Per head: att = softmax(norm(q) @ norm(k)^T / alpha); out = att @ v + q.
    The residual is added per head before heads are merged; the caller applies
    the output projection after reshaping back to the feature-map layout.
    """
    q = q if isinstance(q, Var) else dc.constant(np.asarray(q))
    k = k if isinstance(k, Var) else dc.constant(np.asarray(k))
    v = v if isinstance(v, Var) else dc.constant(np.asarray(v))
    log_alpha = log_alpha if isinstance(log_alpha, Var) else dc.constant(np.asarray(log_alpha))
    squeeze = q.value.ndim == 2
    if squeeze:
        q = dc.reshape(q, (1,) + q.value.shape)
    bsz, d, l = q.value.shape
    nd = k.value.shape[0]
    if k.value.shape != v.value.shape:
        raise ShapeError(f"k/v shape mismatch: {k.value.shape} vs {v.value.shape}")
    if l % heads:
        raise ShapeError(f"feature axis {l} not divisible by {heads} heads")
    lh = l // heads
    # (B,d,l) -> (heads, B*d, lh); (Nd,l) -> (heads, Nd, lh)
    qh = dc.reshape(dc.transpose(dc.reshape(q, (bsz, d, heads, lh)), (2, 0, 1, 3)), (heads, bsz * d, lh))
    kh = dc.reshape(dc.transpose(dc.reshape(k, (nd, heads, lh)), (1, 0, 2)), (heads, nd, lh))
    vh = dc.reshape(dc.transpose(dc.reshape(v, (nd, heads, lh)), (1, 0, 2)), (heads, nd, lh))
    qn = dc.layer_norm(qh) if normalize else qh
    kn = dc.layer_norm(kh) if normalize else kh
    inv_alpha = dc.reshape(dc.exp(dc.scale(log_alpha, -1.0)), (heads, 1, 1))
    if return_attention:
        logits = dc.matmul(qn, dc.transpose(kn, (0, 2, 1)))
        att = dc.softmax_scaled_last_axis(logits, inv_alpha)
        attended = dc.matmul(att, vh)
    else:
        attended = dc.attention_core(qn, kn, vh, inv_alpha)
    out = dc.add(attended, qh)
    out = dc.reshape(dc.transpose(dc.reshape(out, (heads, bsz, d, lh)), (1, 2, 0, 3)), (bsz, d, l))
    if squeeze:
        out = dc.reshape(out, (d, l))
    if return_attention:
        return out, att
    return out


def _project_qkv(x: Var, store, base: str, role: str, train: bool) -> Var:
    y = dc.pointwise_conv(x, store.leaf(f"{base}.{role}1.weight", train), store.leaf(f"{base}.{role}1.bias", train))
    return dc.depthwise_conv3x3(y, store.leaf(f"{base}.{role}2.weight", train), store.leaf(f"{base}.{role}2.bias", train))


def match_branch(
    q_feat: Var,
    k_feat: Var,
    v_feat: Var,
    axis: str,
    level: int,
    store: ParameterStore,
    cfg: ModelConfig,
    train: bool = False,
    return_attention: bool = False,
):
    """One matching branch at one level.

    q_feat: (B, H, W, C) query embedding; k_feat/v_feat: (N, H, W, C) support
    embeddings.  axis "spatial" matches positions (tokens d = HW, features
    l = C); axis "channel" matches channels (d = C, l = HW).  Output has the
    query's shape.
    """
    if axis not in ("spatial", "channel"):
        raise ParameterError(f"unknown matching axis {axis!r}")
    base = f"match.l{level}.{axis}"
    bsz, h, w, c = q_feat.value.shape
    n = k_feat.value.shape[0]
    qp = _project_qkv(q_feat, store, base, "q", train)
    kp = _project_qkv(k_feat, store, base, "k", train)
    vp = _project_qkv(v_feat, store, base, "v", train)
    hw = h * w
    if axis == "spatial":
        qm = dc.reshape(qp, (bsz, hw, c))
        km = dc.reshape(kp, (n * hw, c))
        vm = dc.reshape(vp, (n * hw, c))
    else:
        qm = dc.transpose(dc.reshape(qp, (bsz, hw, c)), (0, 2, 1))
        km = dc.reshape(dc.transpose(dc.reshape(kp, (n, hw, c)), (0, 2, 1)), (n * c, hw))
        vm = dc.reshape(dc.transpose(dc.reshape(vp, (n, hw, c)), (0, 2, 1)), (n * c, hw))
    attended = mdta_core(
        qm, km, vm, store.leaf(f"{base}.log_alpha", train), cfg.heads[level],
        return_attention=return_attention,
    )
    if return_attention:
        attended, attention = attended
    if axis == "spatial":
        back = dc.reshape(attended, (bsz, h, w, c))
    else:
        back = dc.reshape(dc.transpose(attended, (0, 2, 1)), (bsz, h, w, c))
    back = dc.pointwise_conv(back, store.leaf(f"{base}.out.weight", train), store.leaf(f"{base}.out.bias", train))
    fused = dc.pointwise_conv(
        dc.concat_channels([back, q_feat]),
        store.leaf(f"{base}.fuse.weight", train),
        store.leaf(f"{base}.fuse.bias", train),
    )
    if return_attention:
        return fused, attention
    return fused


def matching_module(
    q_feat: Var,
    k_feat: Var,
    v_feat: Var,
    level: int,
    store: ParameterStore,
    cfg: ModelConfig,
    mode: str = None,
    train: bool = False,
) -> Var:
    """Level-wise fusion: sum of branch outputs, a single branch, or a learned
    bypass projection of Q when matching is disabled."""
    mode = mode or cfg.match_mode
    if mode == "both":
        return dc.add(
            match_branch(q_feat, k_feat, v_feat, "spatial", level, store, cfg, train),
            match_branch(q_feat, k_feat, v_feat, "channel", level, store, cfg, train),
        )
    if mode in ("spatial", "channel"):
        return match_branch(q_feat, k_feat, v_feat, mode, level, store, cfg, train)
    if mode == "none":
        return dc.pointwise_conv(
            q_feat,
            store.leaf(f"match.l{level}.bypass.weight", train),
            store.leaf(f"match.l{level}.bypass.bias", train),
        )
    raise ParameterError(f"unknown match mode {mode!r}")


def support_arrays(support, features: str = "pattern", dtype=np.float32):
    """Stack support inputs and their matching targets.

    features="pattern": values come from the degradation patterns X - Y.
    features="background": values come from the clean images Y.
    """
    if not support:
        raise ParameterError("support set is empty")
    xs = np.stack([np.asarray(p.degraded, dtype) for p in support])
    if features == "pattern":
        targets = np.stack(
            [np.asarray(p.degraded, dtype) - np.asarray(p.clean, dtype) for p in support]
        )
    elif features == "background":
        targets = np.stack([np.asarray(p.clean, dtype) for p in support])
    else:
        raise ParameterError(f"unknown match_features {features!r}")
    return xs, targets


def encode_supports(support, store: ParameterStore, cfg: ModelConfig, features: str = "pattern", train: bool = False):
    """Per-level (K, V): stacked encodings of support inputs and targets,
    produced by the shared encoder."""
    xs, targets = support_arrays(support, features, store.dtype)
    n = xs.shape[0]
    both = np.concatenate([xs, targets], axis=0)
    feats = encode(store, cfg, both, train)
    out = []
    for f in feats:
        out.append((dc.slice0(f, 0, n), dc.slice0(f, n, 2 * n)))
    return out


def decode(
    phis: list,
    queries,
    store: ParameterStore,
    cfg: ModelConfig,
    train: bool = False,
    subtract_pattern: bool = True,
):
    """Merge per-level matches and produce the restored image.

    Returns (clipped, raw, pattern): raw is the pre-clip output, pattern the
    predicted degradation field (meaningful when subtract_pattern is True).
    """
    if len(phis) != cfg.levels:
        raise ShapeError(f"decoder expects {cfg.levels} matched levels, got {len(phis)}")
    x_q = queries if isinstance(queries, Var) else dc.constant(np.asarray(queries, store.dtype))
    d = phis[-1]
    for lvl in range(cfg.levels - 2, -1, -1):
        d = dc.transposed_upsample(
            d, store.leaf(f"dec.up{lvl}.weight", train), store.leaf(f"dec.up{lvl}.bias", train)
        )
        d = dc.add(d, phis[lvl])
        for blk in range(2):
            d = _residual_block(d, store, f"dec.l{lvl}.b{blk}", train)
    d = dc.transposed_upsample(
        d, store.leaf("dec.final_up.weight", train), store.leaf("dec.final_up.bias", train)
    )
    d = _residual_block(d, store, "dec.refine.b0", train)
    pattern = dc.pointwise_conv(
        d, store.leaf("dec.pattern.weight", train), store.leaf("dec.pattern.bias", train)
    )
    pre = dc.subtract(x_q, pattern) if subtract_pattern else pattern
    raw = dc.pointwise_conv(
        pre, store.leaf("dec.output.weight", train), store.leaf("dec.output.bias", train)
    )
    return dc.clip01(raw), raw, pattern


class SupportCache:
    """Frozen per-level (K, V) arrays for reuse across many queries."""

    def __init__(self, kv_values):
        self.kv_values = kv_values  # list of (K ndarray, V ndarray)


def build_support_cache(support, store, cfg, features: str = None) -> SupportCache:
    features = features or cfg.match_features
    kv = encode_supports(support, store, cfg, features, train=False)
    return SupportCache([(k.value, v.value) for k, v in kv])


def predict(
    store: ParameterStore,
    cfg: ModelConfig,
    queries: np.ndarray,
    support=None,
    train: bool = False,
    mode: str = None,
    features: str = None,
    cache: SupportCache = None,
):
    """Full pipeline on a query batch (B,H,W,3); returns (clipped, raw) Vars.

    During training the queries and supports are encoded as one stacked batch
    so the support embeddings are computed once per step; at inference a
    SupportCache can replace the support encodes entirely.
    """
    mode = mode or cfg.match_mode
    features = features or cfg.match_features
    queries = np.asarray(queries, store.dtype)
    if queries.ndim != 4:
        raise ShapeError(f"predict expects a (B,H,W,3) batch, got {queries.shape}")
    bsz = queries.shape[0]
    if mode == "none":
        q_feats = encode(store, cfg, queries, train)
        kv = [(None, None)] * cfg.levels
    elif train:
        # one stacked encode per step so support embeddings are shared
        xs, targets = support_arrays(support, features, store.dtype)
        n = xs.shape[0]
        stacked = np.concatenate([queries, xs, targets], axis=0)
        feats = encode(store, cfg, stacked, train)
        q_feats = [dc.slice0(f, 0, bsz) for f in feats]
        kv = [(dc.slice0(f, bsz, bsz + n), dc.slice0(f, bsz + n, bsz + 2 * n)) for f in feats]
    else:
        q_feats = encode(store, cfg, queries, train)
        if cache is None:
            cache = build_support_cache(support, store, cfg, features)
        kv = [(dc.constant(k), dc.constant(v)) for k, v in cache.kv_values]
    phis = [
        matching_module(qf, k, v, lvl, store, cfg, mode, train)
        for lvl, (qf, (k, v)) in enumerate(zip(q_feats, kv))
    ]
    clipped, raw, _ = decode(
        phis, queries, store, cfg, train, subtract_pattern=(features == "pattern")
    )
    return clipped, raw


def restore(
    query: np.ndarray,
    support,
    store: ParameterStore,
    cfg: ModelConfig,
    mode: str = None,
    features: str = None,
    cache: SupportCache = None,
) -> np.ndarray:
    """Restore one degraded image given the support set; pure inference."""
    clipped, _ = predict(
        store, cfg, np.asarray(query, store.dtype)[None], support,
        train=False, mode=mode, features=features, cache=cache,
    )
    return clipped.value[0]
