"""Model assembly: two graph encoders, a fusion stage, a feed-forward head,
and the ordinal output layer, plus checkpoint serialization.

``strategy`` is one of the six fusion strategies or ``unimodal_a`` /
``unimodal_b`` for the single-modality baselines. Mid-fusion strategies share
the late-concatenation head layout, so zeroed cross matrices make them
reproduce the late-concatenation forward exactly.

Checkpoints are a versioned binary container of named float64 tensors with
shapes plus a JSON metadata blob; round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Endpoint, ENDPOINT_CLASSES, ModalGraph, PairedSample
from .encoder import (
    EncoderParams,
    LinearParams,
    NodeState,
    apply_normalizer,
    batch_states,
    encode,
    graph_conv,
    init_encoder,
    mean_pool,
    sagpool,
    gated_attention_pool,
)
from .errors import ContractError, ParseError
from .fusion import (
    FusionParams,
    FusionStrategy,
    MID_STRATEGIES,
    fuse_add,
    fuse_concat,
    fuse_hadamard,
    fuse_kronecker_gated,
    fused_dim,
    init_fusion,
    inter_step,
)
from .ordinal import OrdinalParams, RaterBiases
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GFCP"
CHECKPOINT_VERSION = 1

UNIMODAL_A = "unimodal_a"
UNIMODAL_B = "unimodal_b"
ALL_STRATEGIES = [s.value for s in FusionStrategy] + [UNIMODAL_A, UNIMODAL_B]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass
class HeadLayer:
    lin: LinearParams
    bn: BatchNormParams | None
    dropout: float


@dataclass
class ModelConfig:
    strategy: str
    endpoint: Endpoint
    d_in_a: int
    d_in_b: int
    d_h: int = 128
    n_conv_layers: int = 2
    sagpool_ratio: float = 0.5
    readout: str = "mean"
    fusion_dim: int = 128
    head_hidden: tuple[int, ...] | None = None
    head_dropout: float | None = None
    head_batchnorm: bool | None = None
    kron_bilinear_gate: bool = False
    gimp_inject_dropout: float = 0.4
    gaimp_proj_dropout: float = 0.2
    symmetric_edges: bool = False
    clamp_normalizer: bool = False

    def __post_init__(self):
        if self.strategy not in ALL_STRATEGIES:
            raise ContractError(f"unknown strategy '{self.strategy}'")
        if isinstance(self.endpoint, str):
            self.endpoint = Endpoint(self.endpoint)
        if self.head_hidden is not None:
            self.head_hidden = tuple(self.head_hidden)

    @property
    def n_classes(self) -> int:
        return ENDPOINT_CLASSES[self.endpoint]

    def resolved_head(self) -> tuple[tuple[int, ...], float, bool]:
        """Hidden widths, dropout, and batch-norm flag for this strategy."""
        if self.strategy in (UNIMODAL_A, UNIMODAL_B):
            defaults = ((self.d_h,), 0.5, False)
        elif self.strategy == FusionStrategy.KRONECKER_GATED.value:
            defaults = ((64,), 0.5, False)
        else:
            defaults = ((self.d_h, max(self.d_h // 2, 1)), 0.1, True)
        hidden = self.head_hidden if self.head_hidden is not None else defaults[0]
        dropout = self.head_dropout if self.head_dropout is not None else defaults[1]
        bnorm = self.head_batchnorm if self.head_batchnorm is not None else defaults[2]
        return tuple(hidden), dropout, bnorm


@dataclass
class Model:
    config: ModelConfig
    encoder_a: EncoderParams | None
    encoder_b: EncoderParams | None
    fusion: FusionParams | None
    head: list[HeadLayer]
    ordinal: OrdinalParams
    biases: RaterBiases
    split: dict | None = None


def _jk_dim(cfg: ModelConfig) -> int:
    return cfg.n_conv_layers * cfg.d_h


def init_model(cfg: ModelConfig, rater_ids: list[str], rng: np.random.Generator) -> Model:
    def glorot(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True)

    enc_a = enc_b = None
    attn = cfg.readout == "attention"
    if cfg.strategy != UNIMODAL_B:
        enc_a = init_encoder(cfg.d_in_a, cfg.d_h, rng, cfg.n_conv_layers, attention_readout=attn)
    if cfg.strategy != UNIMODAL_A:
        enc_b = init_encoder(cfg.d_in_b, cfg.d_h, rng, cfg.n_conv_layers, attention_readout=attn)

    jk = _jk_dim(cfg)
    fusion = None
    if cfg.strategy in (UNIMODAL_A, UNIMODAL_B):
        z_dim = jk
    elif cfg.strategy in (s.value for s in MID_STRATEGIES):
        fusion = init_fusion(
            FusionStrategy(cfg.strategy),
            cfg.d_h,
            cfg.d_h,
            cfg.fusion_dim,
            rng,
            inject_dropout=cfg.gimp_inject_dropout,
            proj_dropout=cfg.gaimp_proj_dropout,
        )
        z_dim = 2 * jk
    else:
        strat = FusionStrategy(cfg.strategy)
        fusion = init_fusion(
            strat, jk, jk, cfg.fusion_dim, rng, bilinear_gate=cfg.kron_bilinear_gate
        )
        z_dim = fused_dim(strat, jk, jk, cfg.fusion_dim)

    hidden, dropout, bnorm = cfg.resolved_head()
    head: list[HeadLayer] = []
    d_prev = z_dim
    for width in hidden:
        bn = None
        if bnorm:
            bn = BatchNormParams(
                gamma=Tensor(np.ones((1, width)), requires_grad=True),
                beta=Tensor(np.zeros((1, width)), requires_grad=True),
                running_mean=np.zeros((1, width)),
                running_var=np.ones((1, width)),
            )
        head.append(
            HeadLayer(
                lin=LinearParams(glorot(d_prev, width), Tensor(np.zeros((1, width)), requires_grad=True)),
                bn=bn,
                dropout=dropout,
            )
        )
        d_prev = width

    k = cfg.n_classes
    ordinal = OrdinalParams(
        n_classes=k,
        raw_thresholds=Tensor(np.linspace(-1.0, 1.0, k - 1), requires_grad=True),
        latent_weight=glorot(d_prev, 1),
    )
    biases = RaterBiases(
        rater_ids=list(rater_ids),
        values=Tensor(np.zeros((max(len(rater_ids), 1), 1)), requires_grad=True),
    )
    return Model(cfg, enc_a, enc_b, fusion, head, ordinal, biases)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, bn: BatchNormParams, training: bool) -> Tensor:
    if training:
        if x.shape[0] < 2:
            raise ContractError("batch norm needs at least 2 rows in training mode")
        mu = T.mean_rows(x)
        centered = x - mu
        var = T.mean_rows(centered * centered)
        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu.data
        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var.data
        xhat = centered / T.sqrt(var + bn.eps)
    else:
        xhat = (x - Tensor(bn.running_mean)) / Tensor(np.sqrt(bn.running_var + bn.eps))
    return bn.gamma * xhat + bn.beta


def head_forward(
    z: Tensor, head: list[HeadLayer], training: bool, rng: np.random.Generator | None
) -> Tensor:
    """Hidden layers: linear -> (batchnorm) -> relu -> dropout."""
    x = z
    for layer in head:
        x = T.matmul(x, layer.lin.w) + layer.lin.b
        if layer.bn is not None:
            x = batchnorm(x, layer.bn, training)
        x = T.relu(x)
        if layer.dropout > 0.0:
            x = T.dropout(x, layer.dropout, rng, training)
    return x


def _effective_edges(g: ModalGraph, symmetric: bool) -> np.ndarray:
    edges = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
    if not symmetric or edges.size == 0:
        return edges
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    return np.unique(both, axis=0)


def prepare_features(model: Model, samples: list[PairedSample]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Normalize node features for each sample with the fitted normalizers."""
    cfg = model.config
    out = []
    for s in samples:
        fa = fb = None
        if model.encoder_a is not None:
            fa = apply_normalizer(
                s.graph_a.node_features,
                model.encoder_a.norm_min,
                model.encoder_a.norm_max,
                clamp=cfg.clamp_normalizer,
            )
        if model.encoder_b is not None:
            fb = apply_normalizer(
                s.graph_b.node_features,
                model.encoder_b.norm_min,
                model.encoder_b.norm_max,
                clamp=cfg.clamp_normalizer,
            )
        out.append((fa, fb))
    return out


def _batched_state(
    model: Model, samples: list[PairedSample], feats, which: str
) -> NodeState:
    idx = 0 if which == "a" else 1
    graphs = [s.graph_a if which == "a" else s.graph_b for s in samples]
    arrs = [f[idx] for f in feats]
    state = batch_states(arrs, graphs)
    if model.config.symmetric_edges:
        offsets = np.cumsum([0] + [a.shape[0] for a in arrs])
        parts = [
            _effective_edges(g, True) + offsets[i] for i, g in enumerate(graphs)
        ]
        state.edges = np.concatenate(parts, axis=0) if parts else state.edges
    return state


def _mid_forward(
    model: Model,
    samples: list[PairedSample],
    feats,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    cfg = model.config
    state_a = _batched_state(model, samples, feats, "a")
    state_b = _batched_state(model, samples, feats, "b")
    a = graph_conv(state_a, model.encoder_a.conv1)
    b = graph_conv(state_b, model.encoder_b.conv1)
    a, b = inter_step(a, b, model.fusion, rng=rng, training=training)
    reads_a = [mean_pool(a)]
    reads_b = [mean_pool(b)]
    if cfg.n_conv_layers == 2:
        a = sagpool(a, model.encoder_a.score_conv, cfg.sagpool_ratio)
        b = sagpool(b, model.encoder_b.score_conv, cfg.sagpool_ratio)
        a = graph_conv(a, model.encoder_a.conv2)
        b = graph_conv(b, model.encoder_b.conv2)
        a, b = inter_step(a, b, model.fusion, rng=rng, training=training)
        reads_a.append(mean_pool(a))
        reads_b.append(mean_pool(b))
    return T.concat(reads_a + reads_b, axis=1)


def forward_fused(
    model: Model,
    samples: list[PairedSample] | PairedSample,
    features=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Forward through encoders, fusion, and head; one row per sample.

    Returns the head output that feeds the ordinal latent map.
    """
    if isinstance(samples, PairedSample):
        samples = [samples]
    cfg = model.config
    feats = features if features is not None else prepare_features(model, samples)

    if cfg.strategy in (UNIMODAL_A, UNIMODAL_B):
        which = "a" if cfg.strategy == UNIMODAL_A else "b"
        enc = model.encoder_a if which == "a" else model.encoder_b
        state = _batched_state(model, samples, feats, which)
        z, _ = encode(state, enc, cfg.readout, cfg.sagpool_ratio, rng=rng, training=training)
    elif cfg.strategy in (s.value for s in MID_STRATEGIES):
        z = _mid_forward(model, samples, feats, training, rng)
    else:
        state_a = _batched_state(model, samples, feats, "a")
        state_b = _batched_state(model, samples, feats, "b")
        emb_a, _ = encode(state_a, model.encoder_a, cfg.readout, cfg.sagpool_ratio, rng=rng, training=training)
        emb_b, _ = encode(state_b, model.encoder_b, cfg.readout, cfg.sagpool_ratio, rng=rng, training=training)
        strat = FusionStrategy(cfg.strategy)
        if strat is FusionStrategy.LATE_CONCAT:
            z = fuse_concat(emb_a, emb_b)
        elif strat is FusionStrategy.LATE_ADD:
            z = fuse_add(emb_a, emb_b, model.fusion.w_a, model.fusion.w_b)
        elif strat is FusionStrategy.LATE_HADAMARD:
            z = fuse_hadamard(emb_a, emb_b, model.fusion.w_a, model.fusion.w_b)
        else:
            z = fuse_kronecker_gated(emb_a, emb_b, model.fusion)
    return head_forward(z, model.head, training, rng)


def forward_latent(
    model: Model,
    samples,
    features=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Latent ordinal scores, one row per sample (no rater bias)."""
    h = forward_fused(model, samples, features, training, rng)
    return T.matmul(h, model.ordinal.latent_weight)


def predict_samples(model: Model, samples: list[PairedSample]) -> np.ndarray:
    """Inference-path ordinal scores (0-based), rater biases excluded."""
    from .ordinal import predict_batch

    scores = forward_latent(model, samples, training=False)
    alpha = model.ordinal.thresholds().data
    return predict_batch(scores.data[:, 0], alpha) - 1


# ---------------------------------------------------------------------------
# Parameter traversal and checkpoints
# ---------------------------------------------------------------------------

def named_parameters(model: Model) -> dict[str, Tensor]:
    """Trainable tensors in a fixed, deterministic order."""
    out: dict[str, Tensor] = {}

    def add_conv(prefix, conv):
        if conv is None:
            return
        out[f"{prefix}.w_self"] = conv.w_self
        out[f"{prefix}.w_neigh"] = conv.w_neigh
        out[f"{prefix}.bias"] = conv.bias

    def add_lin(prefix, lin):
        if lin is None:
            return
        out[f"{prefix}.w"] = lin.w
        out[f"{prefix}.b"] = lin.b

    for name, enc in (("enc_a", model.encoder_a), ("enc_b", model.encoder_b)):
        if enc is None:
            continue
        add_conv(f"{name}.conv1", enc.conv1)
        add_conv(f"{name}.conv2", enc.conv2)
        add_conv(f"{name}.score_conv", enc.score_conv)
        add_lin(f"{name}.attn_gate", enc.attn_gate)
        add_lin(f"{name}.attn_proj", enc.attn_proj)
    f = model.fusion
    if f is not None:
        for nm in ("w_a", "w_b", "gate_a", "gate_b", "cross_ba", "cross_ab"):
            t = getattr(f, nm)
            if t is not None:
                out[f"fusion.{nm}"] = t
        for nm in ("bilinear_a", "bilinear_b"):
            pair = getattr(f, nm)
            if pair is not None:
                out[f"fusion.{nm}.u"] = pair[0]
                out[f"fusion.{nm}.v"] = pair[1]
        for nm in ("attn_gate_a", "attn_proj_a", "attn_gate_b", "attn_proj_b"):
            add_lin(f"fusion.{nm}", getattr(f, nm))
    for i, layer in enumerate(model.head):
        add_lin(f"head.{i}.lin", layer.lin)
        if layer.bn is not None:
            out[f"head.{i}.bn.gamma"] = layer.bn.gamma
            out[f"head.{i}.bn.beta"] = layer.bn.beta
    out["ordinal.raw_thresholds"] = model.ordinal.raw_thresholds
    out["ordinal.latent_weight"] = model.ordinal.latent_weight
    out["biases.values"] = model.biases.values
    return out


def _state_arrays(model: Model) -> dict[str, np.ndarray]:
    """Non-trainable arrays that belong in checkpoints."""
    out: dict[str, np.ndarray] = {}
    for name, enc in (("enc_a", model.encoder_a), ("enc_b", model.encoder_b)):
        if enc is None:
            continue
        if enc.norm_min is not None:
            out[f"{name}.norm_min"] = enc.norm_min
            out[f"{name}.norm_max"] = enc.norm_max
    for i, layer in enumerate(model.head):
        if layer.bn is not None:
            out[f"head.{i}.bn.running_mean"] = layer.bn.running_mean
            out[f"head.{i}.bn.running_var"] = layer.bn.running_var
    return out


def snapshot(model: Model) -> dict[str, np.ndarray]:
    data = {k: v.data.copy() for k, v in named_parameters(model).items()}
    data.update({k: v.copy() for k, v in _state_arrays(model).items()})
    return data


def restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    params = named_parameters(model)
    for k, v in snap.items():
        if k in params:
            params[k].data = v.copy()
    for name, enc in (("enc_a", model.encoder_a), ("enc_b", model.encoder_b)):
        if enc is not None and f"{name}.norm_min" in snap:
            enc.norm_min = snap[f"{name}.norm_min"].copy()
            enc.norm_max = snap[f"{name}.norm_max"].copy()
    for i, layer in enumerate(model.head):
        if layer.bn is not None and f"head.{i}.bn.running_mean" in snap:
            layer.bn.running_mean = snap[f"head.{i}.bn.running_mean"].copy()
            layer.bn.running_var = snap[f"head.{i}.bn.running_var"].copy()


def _config_meta(cfg: ModelConfig) -> dict:
    meta = asdict(cfg)
    meta["endpoint"] = cfg.endpoint.value
    if meta["head_hidden"] is not None:
        meta["head_hidden"] = list(meta["head_hidden"])
    return meta


def write_checkpoint(model: Model, path) -> None:
    tensors: dict[str, np.ndarray] = {k: v.data for k, v in named_parameters(model).items()}
    tensors.update(_state_arrays(model))
    meta = {
        "config": _config_meta(model.config),
        "rater_ids": model.biases.rater_ids,
        "split": model.split,
        "dims": {name: list(arr.shape) for name, arr in tensors.items()},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> Model:
    from .data import _Reader

    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ParseError("bad magic, not a checkpoint", offset=0)
    version, meta_len = r.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).copy()
        tensors[name] = arr

    cfg_meta = dict(meta["config"])
    cfg = ModelConfig(**cfg_meta)
    model = init_model(cfg, meta["rater_ids"], np.random.default_rng(0))
    model.split = meta.get("split")
    params = named_parameters(model)
    for name, arr in tensors.items():
        if name in params:
            if params[name].data.shape != arr.shape:
                raise ParseError(
                    f"tensor '{name}' shape {arr.shape} != expected {params[name].data.shape}",
                    offset=0,
                )
            params[name].data = arr
    restore_state = {k: v for k, v in tensors.items() if k not in params}
    restore(model, {**restore_state})
    return model
