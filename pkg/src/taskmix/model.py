"""The in-context classifier: frozen feature extractor, trainable class
encoder and query token, a non-causal transformer encoder, and a linear
projection head.

Each of the Q queries in an episode gets its own sequence: the NK support
tokens (image feature concatenated with the label embedding of the
support's pseudo-label) followed by one query token (query feature
concatenated with a learned placeholder vector standing in for the unknown
label). There are no positional encodings and no attention mask, so the
transformer sees an unordered set and support permutation cannot change
any query's logits. The output at the final (query) position is projected
to class scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .container import read_bundle, write_bundle
from .episodes import Episode
from .errors import ConfigError, ContractError, ShapeError
from .rng import derive, generator
from .tensor import Tensor


# ---------------------------------------------------------------------------
# frozen feature extractors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtractorSpec:
    """Frozen embedding function from images to out_dim vectors.

    kinds:
      pixel_flatten     raw pixels, out_dim must equal H*W*C
      frozen_randconv   random strided conv stack + pooling + projection,
                        fully determined by (layers, channels, seed)
      external_table    id -> vector lookup loaded from a CMLT bundle
    """

    kind: str
    out_dim: int
    layers: int = 2
    channels: int = 32
    seed: int = 0
    table_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("pixel_flatten", "frozen_randconv", "external_table"):
            raise ConfigError(f"unknown extractor kind {self.kind!r}")
        if self.out_dim < 1:
            raise ConfigError(f"out_dim must be positive, got {self.out_dim}")
        if self.kind == "frozen_randconv" and (self.layers < 1 or self.channels < 1):
            raise ConfigError("frozen_randconv needs layers >= 1 and channels >= 1")
        if self.kind == "external_table" and not self.table_path:
            raise ConfigError("external_table needs a table_path")


_RANDCONV_CACHE: dict = {}
_TABLE_CACHE: dict = {}


def _conv_stride2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """3x3 stride-2 zero-padded convolution, NHWC layout, softsign output.

    Weight layout is (cin, 3, 3, cout) flattened over the first three axes.
    """
    b, h, wid, cin = x.shape
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # windows (b, ho, wo, cin, 3, 3) as a strided view, one copy at reshape
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    win = win[:, ::2, ::2]
    ho, wo = win.shape[1], win.shape[2]
    patches = win.reshape(b * ho * wo, cin * 9)
    out = (patches @ w.reshape(cin * 9, -1)).reshape(b, ho, wo, -1)
    return out / (1.0 + np.abs(out))


def _adaptive_avg(x: np.ndarray, target: int = 4) -> np.ndarray:
    b, h, w, c = x.shape
    t = min(target, h, w)
    ys = np.linspace(0, h, t + 1).astype(int)
    xs = np.linspace(0, w, t + 1).astype(int)
    out = np.empty((b, t, t, c))
    for i in range(t):
        for j in range(t):
            out[:, i, j] = x[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(1, 2))
    return out


def _randconv_weights(spec: ExtractorSpec, in_shape: tuple[int, int, int]):
    key = (spec, in_shape)
    cached = _RANDCONV_CACHE.get(key)
    if cached is not None:
        return cached
    h, w, c = in_shape
    convs = []
    cin = c
    for layer in range(spec.layers):
        rng = generator(spec.seed, "conv", layer)
        convs.append(rng.standard_normal((cin, 3, 3, spec.channels)) / math.sqrt(9 * cin))
        cin = spec.channels
        h = (h - 1) // 2 + 1
        w = (w - 1) // 2 + 1
    t = min(4, h, w)
    fan = t * t * cin
    proj = generator(spec.seed, "proj", t, cin).standard_normal((fan, spec.out_dim))
    proj /= math.sqrt(fan)
    # geometry-invariant branch: per-channel moments survive flips,
    # rotations, crops, and shears; luma quantiles additionally survive
    # grayscale (which preserves luminance exactly)
    n_stats = 2 * c + 5
    stats_proj = generator(spec.seed, "stats", c).standard_normal((n_stats, spec.out_dim))
    stats_proj /= math.sqrt(n_stats)
    _RANDCONV_CACHE[key] = (convs, proj, stats_proj)
    return convs, proj, stats_proj


def embed_images(spec: ExtractorSpec, images: np.ndarray, ids=None) -> np.ndarray:
    """Frozen mapping from an (n, H, W, C) stack to (n, out_dim) features."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"embed_images expects (n, H, W, C), got {images.shape}")
    if spec.kind == "pixel_flatten":
        flat_dim = int(np.prod(images.shape[1:]))
        if flat_dim != spec.out_dim:
            raise ConfigError(
                f"pixel_flatten out_dim {spec.out_dim} != H*W*C = {flat_dim}")
        return images.reshape(images.shape[0], flat_dim).copy()
    if spec.kind == "frozen_randconv":
        convs, proj, stats_proj = _randconv_weights(spec, images.shape[1:])
        x = images
        for w in convs:
            x = _conv_stride2(x, w)
        z = _adaptive_avg(x).reshape(images.shape[0], -1) @ proj
        means = images.mean(axis=(1, 2))
        stds = images.std(axis=(1, 2))
        if images.shape[3] == 3:
            luma = images @ np.array([0.299, 0.587, 0.114])
        else:
            luma = images[..., 0]
        flat_luma = luma.reshape(images.shape[0], -1)
        quants = np.quantile(flat_luma, [0.1, 0.3, 0.5, 0.7, 0.9], axis=1).T
        stats = np.concatenate(
            [(means - 0.5) * 2.0, stds * 4.0, (quants - 0.5) * 2.0], axis=1)
        z = z + stats @ stats_proj
        rms = np.sqrt((z * z).mean(axis=1, keepdims=True) + 1e-12)
        return z / rms
    # external_table
    if ids is None:
        raise ContractError("external_table embedding needs image ids")
    table = _TABLE_CACHE.get(spec.table_path)
    if table is None:
        _, table = read_bundle(spec.table_path)
        _TABLE_CACHE[spec.table_path] = table
    rows = []
    for iid in ids:
        if iid not in table:
            raise KeyError(f"embedding table has no entry for id {iid!r}")
        rows.append(table[iid])
    out = np.stack(rows)
    if out.shape[1] != spec.out_dim:
        raise ConfigError(f"table vectors have dim {out.shape[1]}, expected {spec.out_dim}")
    return out


def write_embedding_table(path, vectors: dict[str, np.ndarray]) -> None:
    write_bundle(path, vectors, meta={"format": "embedding_table"})


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    extractor: ExtractorSpec
    d_label: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    n_max: int = 16
    eps: float = 1e-5
    init_std: float = 0.08

    @property
    def d_model(self) -> int:
        return self.extractor.out_dim + self.d_label

    def __post_init__(self):
        if min(self.d_label, self.n_layers, self.n_heads, self.d_ff, self.n_max) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.init_std <= 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")


def desk_config(extractor_seed: int = 0) -> ModelConfig:
    """Small configuration sized for CPU experiments."""
    return ModelConfig(
        extractor=ExtractorSpec("frozen_randconv", out_dim=96, layers=2,
                                channels=32, seed=extractor_seed))


def paper_scale_config(extractor: ExtractorSpec | None = None) -> ModelConfig:
    """Published-scale constants: 8 layers, 8 heads, 2048+256 wide tokens."""
    extractor = extractor or ExtractorSpec("frozen_randconv", out_dim=2048,
                                           layers=3, channels=64, seed=0)
    return ModelConfig(extractor=extractor, d_label=256, n_layers=8, n_heads=8,
                       d_ff=3072, n_max=16)


class InContextClassifier:
    """Trainable parameters plus the frozen extractor spec."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def replace_params(self, new_params: dict[str, Tensor]) -> None:
        if set(new_params) != set(self.params):
            raise ContractError("parameter set changed during update")
        self.params = new_params

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["class_encoder", "query_token"]
    for i in range(cfg.n_layers):
        for part in ("ln1.g", "ln1.b", "qkv.w", "qkv.b", "o.w", "o.b",
                     "ln2.g", "ln2.b", "mlp1.w", "mlp1.b", "mlp2.w", "mlp2.b"):
            names.append(f"layer{i}.{part}")
    names += ["final_ln.g", "final_ln.b", "projection.w", "projection.b"]
    return names


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for a configuration."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = (d * 3 * d + 3 * d) + (d * d + d) + 4 * d + (d * f + f) + (f * d + d)
    return (cfg.n_max * cfg.d_label + cfg.d_label
            + cfg.n_layers * per_layer
            + 2 * d
            + d * cfg.n_max + cfg.n_max)


def init_model(cfg: ModelConfig, seed: int = 0) -> InContextClassifier:
    """Deterministic initialization from one seed.

    The class encoder uses Kaiming-style normal rows (std sqrt(2 / n_max),
    the fan-in of a one-hot input); everything else is scaled-normal with
    the configured init_std, biases zero, layer-norm gains one.
    """
    d, f = cfg.d_model, cfg.d_ff
    std = cfg.init_std
    params: dict[str, Tensor] = {}

    def normal(name, shape, std):
        rng = generator(seed, "init", name)
        params[name] = Tensor(rng.standard_normal(shape) * std, requires_grad=True)

    def const(name, shape, value):
        params[name] = Tensor(np.full(shape, float(value)), requires_grad=True)

    normal("class_encoder", (cfg.n_max, cfg.d_label), math.sqrt(2.0 / cfg.n_max))
    normal("query_token", (cfg.d_label,), std)
    for i in range(cfg.n_layers):
        const(f"layer{i}.ln1.g", (d,), 1.0)
        const(f"layer{i}.ln1.b", (d,), 0.0)
        normal(f"layer{i}.qkv.w", (d, 3 * d), std)
        const(f"layer{i}.qkv.b", (3 * d,), 0.0)
        normal(f"layer{i}.o.w", (d, d), std)
        const(f"layer{i}.o.b", (d,), 0.0)
        const(f"layer{i}.ln2.g", (d,), 1.0)
        const(f"layer{i}.ln2.b", (d,), 0.0)
        normal(f"layer{i}.mlp1.w", (d, f), std)
        const(f"layer{i}.mlp1.b", (f,), 0.0)
        normal(f"layer{i}.mlp2.w", (f, d), std)
        const(f"layer{i}.mlp2.b", (d,), 0.0)
    const("final_ln.g", (d,), 1.0)
    const("final_ln.b", (d,), 0.0)
    normal("projection.w", (d, cfg.n_max), std)
    const("projection.b", (cfg.n_max,), 0.0)
    assert list(params) == param_names(cfg)
    return InContextClassifier(cfg, params)


def encode_labels(model: InContextClassifier, labels, n_way: int) -> Tensor:
    """Rows of the class-encoder matrix for integer episode labels."""
    if n_way > model.cfg.n_max:
        raise ConfigError(f"n_way {n_way} exceeds model capacity {model.cfg.n_max}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_way):
        raise IndexError(f"labels outside [0, {n_way}): {labels}")
    return T.take_rows(model.params["class_encoder"], labels)


def assemble_sequence(support_feat: np.ndarray, support_label_emb: Tensor,
                      query_feat: np.ndarray, model: InContextClassifier) -> Tensor:
    """Per-query token sequences of shape (Q, NK+1, d_model), query last."""
    cfg = model.cfg
    support_feat = np.asarray(support_feat, dtype=np.float64)
    query_feat = np.asarray(query_feat, dtype=np.float64)
    if support_feat.ndim != 2 or support_feat.shape[0] < 1:
        raise ContractError(f"need at least one support row, got {support_feat.shape}")
    if support_feat.shape[1] != cfg.extractor.out_dim:
        raise ShapeError.mismatch("support features", support_feat.shape,
                                  (support_feat.shape[0], cfg.extractor.out_dim))
    if support_label_emb.shape != (support_feat.shape[0], cfg.d_label):
        raise ShapeError.mismatch("label embeddings", support_label_emb.shape,
                                  (support_feat.shape[0], cfg.d_label))
    if query_feat.ndim != 2 or query_feat.shape[1] != cfg.extractor.out_dim:
        raise ShapeError.mismatch("query features", query_feat.shape,
                                  (query_feat.shape[0], cfg.extractor.out_dim))
    n_query = query_feat.shape[0]
    sup_tok = T.concat(Tensor(support_feat), support_label_emb, axis=1)
    block = T.tile_first(sup_tok, n_query)                     # (Q, NK, D)
    token = T.tile_first(T.reshape(model.params["query_token"], (1, cfg.d_label)),
                         n_query)                              # (Q, 1, d_label)
    qf = T.reshape(Tensor(query_feat), (n_query, 1, cfg.extractor.out_dim))
    q_tok = T.concat(qf, token, axis=2)                        # (Q, 1, D)
    return T.concat(block, q_tok, axis=1)


def _attention_block(x: Tensor, p: dict[str, Tensor], prefix: str,
                     n_heads: int) -> Tensor:
    nq, t, d = x.shape
    dh = d // n_heads
    qkv = T.add_bias(T.matmul(x, p[f"{prefix}.qkv.w"]), p[f"{prefix}.qkv.b"])

    def heads(part: Tensor) -> Tensor:
        return T.swapaxes(T.reshape(part, (nq, t, n_heads, dh)), 1, 2)

    q = heads(T.slice_last(qkv, 0, d))
    k = heads(T.slice_last(qkv, d, 2 * d))
    v = heads(T.slice_last(qkv, 2 * d, 3 * d))
    scores = T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)              # (Q, h, T, dh)
    ctx = T.reshape(T.swapaxes(ctx, 1, 2), (nq, t, d))
    return T.add_bias(T.matmul(ctx, p[f"{prefix}.o.w"]), p[f"{prefix}.o.b"])


def transformer_apply(model: InContextClassifier, x: Tensor) -> Tensor:
    """Pre-norm encoder stack over (Q, T, d_model) sequences."""
    cfg = model.cfg
    p = model.params
    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        h = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.eps)
        x = T.add(x, _attention_block(h, p, pre, cfg.n_heads))
        h = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.eps)
        m = T.add_bias(T.matmul(h, p[f"{pre}.mlp1.w"]), p[f"{pre}.mlp1.b"])
        m = T.gelu(m)
        m = T.add_bias(T.matmul(m, p[f"{pre}.mlp2.w"]), p[f"{pre}.mlp2.b"])
        x = T.add(x, m)
    return T.layer_norm(x, p["final_ln.g"], p["final_ln.b"], cfg.eps)


def episode_embeddings(model: InContextClassifier, episode: Episode,
                       ids: tuple | None = None) -> tuple[np.ndarray, np.ndarray]:
    spec = model.cfg.extractor
    if ids is not None:
        sup_ids, qr_ids = ids
        return (embed_images(spec, episode.support_images, sup_ids),
                embed_images(spec, episode.query_images, qr_ids))
    # one batched pass over supports and queries together
    n_sup = episode.support_images.shape[0]
    both = embed_images(spec, np.concatenate(
        [episode.support_images, episode.query_images]))
    return both[:n_sup], both[n_sup:]


def forward(model: InContextClassifier, episode: Episode,
            embeddings: tuple[np.ndarray, np.ndarray] | None = None,
            return_tokens: bool = False):
    """Logits (Q, N) from one bidirectional pass per query sequence."""
    n_way = episode.n_way
    if n_way > model.cfg.n_max:
        raise ConfigError(f"episode is {n_way}-way but model caps at {model.cfg.n_max}")
    sup_feat, qr_feat = embeddings if embeddings is not None else episode_embeddings(
        model, episode)
    label_emb = encode_labels(model, episode.support_labels, n_way)
    seq = assemble_sequence(sup_feat, label_emb, qr_feat, model)
    tokens = transformer_apply(model, seq)
    q_out = T.select_token(tokens, -1)
    logits_full = T.add_bias(T.matmul(q_out, model.params["projection.w"]),
                             model.params["projection.b"])
    logits = T.slice_last(logits_full, 0, n_way)
    if return_tokens:
        return logits, tokens
    return logits


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_to_dict(cfg: ModelConfig) -> dict:
    out = asdict(cfg)
    out["extractor"] = asdict(cfg.extractor)
    return out


def config_from_dict(d: dict) -> ModelConfig:
    ex = ExtractorSpec(**d["extractor"])
    rest = {k: v for k, v in d.items() if k != "extractor"}
    return ModelConfig(extractor=ex, **rest)


def save_checkpoint(path, model: InContextClassifier, meta: dict | None = None,
                    adam=None) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    header = {"format": "checkpoint", "config": config_to_dict(model.cfg)}
    if meta:
        header["meta"] = meta
    if adam is not None:
        header["adam"] = {"step": adam.step, "beta1": adam.beta1,
                          "beta2": adam.beta2, "epsilon": adam.epsilon}
        for name in model.params:
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
    write_bundle(path, tensors, meta=header)


def load_checkpoint(path):
    """Returns (model, header, adam_state_or_None)."""
    from .optim import AdamState

    header, tensors = read_bundle(path)
    if header.get("format") != "checkpoint":
        raise ContractError(f"{path} is not a checkpoint bundle")
    cfg = config_from_dict(header["config"])
    params = {name: Tensor(tensors[name], requires_grad=True)
              for name in param_names(cfg)}
    model = InContextClassifier(cfg, params)
    adam = None
    if "adam" in header:
        a = header["adam"]
        adam = AdamState(step=a["step"],
                         m={n: tensors[f"adam.m.{n}"] for n in params},
                         v={n: tensors[f"adam.v.{n}"] for n in params},
                         beta1=a["beta1"], beta2=a["beta2"], epsilon=a["epsilon"])
    return model, header, adam
