"""Masked segment-act language model.

A small post-layer-norm transformer encoder over act sequences, written
directly in numpy with explicit backward passes. Each input position sums an
act-token embedding, a position embedding and a speaker-type embedding.
Sequences are framed as ``BOS a_1 ... a_n EOS``; the output head predicts one
of the eleven acts at masked positions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import NUM_ACTS, ActFlow, Corpus, Dialogue, SegmentAct, act_flow

log = logging.getLogger(__name__)

PAD = NUM_ACTS
MASK = NUM_ACTS + 1
BOS = NUM_ACTS + 2
EOS = NUM_ACTS + 3
VOCAB_SIZE = NUM_ACTS + 4

CHECKPOINT_FORMAT = "actflow-actlm-v1"
_NEG_INF = -1e9


@dataclass(frozen=True)
class ActLmConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 256
    ffn_dim: int = 0  # 0 means 4 * hidden_dim
    max_seq_len: int = 128
    mask_prob: float = 0.15
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 3
    warmup_frac: float = 0.1
    seed: int = 0
    truncate: bool = True
    dtype: str = "float32"
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        if self.num_layers < 1 or self.num_heads < 1 or self.hidden_dim < 1 or self.ffn_dim < 1:
            raise ValueError("layer, head and width sizes must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in (0, 1)")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ActLmConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ActLmConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ActLmModel:
    config: ActLmConfig
    params: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)


def init_params(cfg: ActLmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, f, dt = cfg.hidden_dim, cfg.ffn_dim, np.dtype(cfg.dtype)

    def normal(*shape):
        return (rng.standard_normal(shape) * cfg.init_std).astype(dt)

    p = {
        "tok_emb": normal(VOCAB_SIZE, d),
        "pos_emb": normal(cfg.max_seq_len + 2, d),
        "type_emb": normal(2, d),
        "emb_ln_g": np.ones(d, dt),
        "emb_ln_b": np.zeros(d, dt),
    }
    for l in range(cfg.num_layers):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"l{l}.{name}"] = normal(d, d)
            p[f"l{l}.b{name[1]}"] = np.zeros(d, dt)
        p[f"l{l}.ln1_g"] = np.ones(d, dt)
        p[f"l{l}.ln1_b"] = np.zeros(d, dt)
        p[f"l{l}.w1"] = normal(d, f)
        p[f"l{l}.b1"] = np.zeros(f, dt)
        p[f"l{l}.w2"] = normal(f, d)
        p[f"l{l}.b2"] = np.zeros(d, dt)
        p[f"l{l}.ln2_g"] = np.ones(d, dt)
        p[f"l{l}.ln2_b"] = np.zeros(d, dt)
    p["out_w"] = normal(d, NUM_ACTS)
    p["out_b"] = np.zeros(NUM_ACTS, dt)
    return p


def new_model(cfg: ActLmConfig) -> ActLmModel:
    return ActLmModel(cfg, init_params(cfg, np.random.default_rng(cfg.seed)))


# -- building blocks ----------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, h):
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def _block_forward(p, l, x, bias, cfg):
    pre = f"l{l}."
    H = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.hidden_dim // H)
    q = _split_heads(x @ p[pre + "wq"] + p[pre + "bq"], H)
    k = _split_heads(x @ p[pre + "wk"] + p[pre + "bk"], H)
    v = _split_heads(x @ p[pre + "wv"] + p[pre + "bv"], H)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
    s = s - s.max(-1, keepdims=True)
    P = np.exp(s)
    P /= P.sum(-1, keepdims=True)
    ctx = _merge_heads(P @ v)
    y, ln1 = _layer_norm(x + ctx @ p[pre + "wo"] + p[pre + "bo"], p[pre + "ln1_g"], p[pre + "ln1_b"], cfg.ln_eps)
    u = y @ p[pre + "w1"] + p[pre + "b1"]
    g, t = _gelu(u)
    z, ln2 = _layer_norm(y + g @ p[pre + "w2"] + p[pre + "b2"], p[pre + "ln2_g"], p[pre + "ln2_b"], cfg.ln_eps)
    return z, (x, q, k, v, P, ctx, ln1, y, u, t, g, ln2)


def _block_backward(p, l, dz, cache, cfg, grads):
    pre = f"l{l}."
    x, q, k, v, P, ctx, ln1, y, u, t, g, ln2 = cache
    H = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.hidden_dim // H)
    d = cfg.hidden_dim

    dr2, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layer_norm_back(dz, p[pre + "ln2_g"], ln2)
    df2 = dr2.reshape(-1, d)
    grads[pre + "w2"] = g.reshape(-1, g.shape[-1]).T @ df2
    grads[pre + "b2"] = df2.sum(0)
    du = (dr2 @ p[pre + "w2"].T) * _gelu_grad(u, t)
    du2 = du.reshape(-1, du.shape[-1])
    grads[pre + "w1"] = y.reshape(-1, d).T @ du2
    grads[pre + "b1"] = du2.sum(0)
    dy = dr2 + du @ p[pre + "w1"].T

    dr1, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layer_norm_back(dy, p[pre + "ln1_g"], ln1)
    da2 = dr1.reshape(-1, d)
    grads[pre + "wo"] = ctx.reshape(-1, d).T @ da2
    grads[pre + "bo"] = da2.sum(0)
    dctx = _split_heads(dr1 @ p[pre + "wo"].T, H)
    dP = dctx @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ dctx
    ds = P * (dP - (dP * P).sum(-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    x2 = x.reshape(-1, d)
    dx = dr1
    for name, dh in (("q", dq), ("k", dk), ("v", dv)):
        dm = _merge_heads(dh)
        dm2 = dm.reshape(-1, d)
        grads[pre + "w" + name] = x2.T @ dm2
        grads[pre + "b" + name] = dm2.sum(0)
        dx = dx + dm @ p[pre + "w" + name].T
    return dx


def _embed(p, cfg, ids, types):
    T = ids.shape[1]
    x0 = p["tok_emb"][ids] + p["pos_emb"][:T][None] + p["type_emb"][types]
    return _layer_norm(x0, p["emb_ln_g"], p["emb_ln_b"], cfg.ln_eps)


def _attention_bias(valid, dtype):
    return np.where(valid, 0.0, _NEG_INF).astype(dtype)[:, None, None, :]


def hidden_states(model: ActLmModel, ids: np.ndarray, types: np.ndarray, valid: np.ndarray, upto: int) -> np.ndarray:
    """Output of encoder block ``upto`` (1-based) for a padded batch."""
    p, cfg = model.params, model.config
    x, _ = _embed(p, cfg, ids, types)
    bias = _attention_bias(valid, model.dtype)
    for l in range(upto):
        x, _ = _block_forward(p, l, x, bias, cfg)
    return x


def _head_logits(p, z):
    return z @ p["out_w"] + p["out_b"]


def _softmax(logits):
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@dataclass
class MaskedBatch:
    ids: np.ndarray  # (B, T) input ids after masking
    types: np.ndarray  # (B, T)
    valid: np.ndarray  # (B, T) bool
    rows: np.ndarray  # (M,) batch row of each masked position
    cols: np.ndarray  # (M,) column of each masked position
    targets: np.ndarray  # (M,) true act index


def loss_and_grads(params: dict[str, np.ndarray], cfg: ActLmConfig, batch: MaskedBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean masked cross-entropy and its gradient for every parameter."""
    p = params
    grads: dict[str, np.ndarray] = {}
    x, ln0 = _embed(p, cfg, batch.ids, batch.types)
    bias = _attention_bias(batch.valid, x.dtype)
    caches = []
    for l in range(cfg.num_layers):
        x, c = _block_forward(p, l, x, bias, cfg)
        caches.append(c)

    zsel = x[batch.rows, batch.cols]
    logits = _head_logits(p, zsel)
    logits = logits - logits.max(-1, keepdims=True)
    logz = np.log(np.exp(logits).sum(-1))
    M = len(batch.targets)
    loss = float((logz - logits[np.arange(M), batch.targets]).mean())

    dlogits = np.exp(logits - logz[:, None])
    dlogits[np.arange(M), batch.targets] -= 1.0
    dlogits /= M
    grads["out_w"] = zsel.T @ dlogits
    grads["out_b"] = dlogits.sum(0)
    dz = np.zeros_like(x)
    dz[batch.rows, batch.cols] = dlogits @ p["out_w"].T

    for l in reversed(range(cfg.num_layers)):
        dz = _block_backward(p, l, dz, caches[l], cfg, grads)

    dx0, grads["emb_ln_g"], grads["emb_ln_b"] = _layer_norm_back(dz, p["emb_ln_g"], ln0)
    d = cfg.hidden_dim
    dtok = np.zeros_like(p["tok_emb"])
    np.add.at(dtok, batch.ids.ravel(), dx0.reshape(-1, d))
    grads["tok_emb"] = dtok
    dpos = np.zeros_like(p["pos_emb"])
    dpos[: batch.ids.shape[1]] = dx0.sum(0)
    grads["pos_emb"] = dpos
    dtype_emb = np.zeros_like(p["type_emb"])
    np.add.at(dtype_emb, batch.types.ravel(), dx0.reshape(-1, d))
    grads["type_emb"] = dtype_emb
    return loss, grads


# -- sequence preparation -------------------------------------------------------


def _flows_of(data: Corpus | Iterable[ActFlow | Dialogue]) -> list[ActFlow]:
    flows = []
    for item in data:
        flows.append(act_flow(item) if isinstance(item, Dialogue) else item)
    if not flows:
        raise ValueError("empty corpus")
    return flows


def _fit_length(flow: ActFlow, cfg: ActLmConfig, truncate: bool) -> tuple[np.ndarray, np.ndarray]:
    acts = np.asarray(flow.indices(), dtype=np.int64)
    spk = np.asarray(flow.speakers, dtype=np.int64)
    if len(acts) > cfg.max_seq_len:
        if not truncate:
            raise ValueError(f"flow of length {len(acts)} exceeds max_seq_len {cfg.max_seq_len}")
        # keep the most recent acts
        acts, spk = acts[-cfg.max_seq_len :], spk[-cfg.max_seq_len :]
    return acts, spk


def _pad_batch(seqs: Sequence[tuple[np.ndarray, np.ndarray]]):
    T = max(len(a) for a, _ in seqs) + 2
    B = len(seqs)
    ids = np.full((B, T), PAD, dtype=np.int64)
    types = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    for i, (a, s) in enumerate(seqs):
        n = len(a)
        ids[i, 0] = BOS
        ids[i, 1 : n + 1] = a
        ids[i, n + 1] = EOS
        types[i, 1 : n + 1] = s
        types[i, n + 1] = s[-1]
        types[i, 0] = s[0]
        valid[i, : n + 2] = True
    return ids, types, valid


def _choose_masked(n: int, mask_prob: float, rng: np.random.Generator) -> np.ndarray:
    chosen = np.flatnonzero(rng.random(n) < mask_prob)
    if chosen.size == 0:
        chosen = np.array([rng.integers(n)])
    return chosen


def make_masked_batch(
    seqs: Sequence[tuple[np.ndarray, np.ndarray]],
    mask_prob: float,
    rng: np.random.Generator,
    corrupt: bool = True,
) -> MaskedBatch:
    """Pad ``seqs`` and mask positions.

    With ``corrupt`` the selected positions follow the 80/10/10 recipe (MASK,
    random act, unchanged); without it every selected position becomes MASK.
    """
    ids, types, valid = _pad_batch(seqs)
    rows, cols, targets = [], [], []
    for i, (a, _) in enumerate(seqs):
        for j in _choose_masked(len(a), mask_prob, rng):
            col = int(j) + 1
            rows.append(i)
            cols.append(col)
            targets.append(int(a[j]))
            if corrupt:
                r = rng.random()
                if r < 0.8:
                    ids[i, col] = MASK
                elif r < 0.9:
                    ids[i, col] = rng.integers(NUM_ACTS)
            else:
                ids[i, col] = MASK
    return MaskedBatch(ids, types, valid, np.array(rows), np.array(cols), np.array(targets))


# -- training ------------------------------------------------------------------


class _Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def _lr_at(step: int, total: int, cfg: ActLmConfig) -> float:
    """Linear warmup to the peak rate, then linear decay towards zero."""
    warm = max(1, int(round(cfg.warmup_frac * total)))
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    return cfg.learning_rate * max(0.0, (total - step) / max(1, total - warm))


def train_act_lm(
    corpus: Corpus | Iterable[ActFlow | Dialogue],
    cfg: ActLmConfig,
    model: ActLmModel | None = None,
) -> ActLmModel:
    flows = _flows_of(corpus)
    seqs = [_fit_length(f, cfg, cfg.truncate) for f in flows]
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = ActLmModel(cfg, init_params(cfg, rng))
    params = model.params
    opt = _Adam(params)
    steps_per_epoch = math.ceil(len(seqs) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = make_masked_batch([seqs[i] for i in idx], cfg.mask_prob, rng)
            loss, grads = loss_and_grads(params, cfg, batch)
            opt.step(params, grads, _lr_at(step, total, cfg))
            losses.append(loss)
            step += 1
        model.loss_history.append(float(np.mean(losses)))
        log.info("stage=train-actlm epoch=%d loss=%.5f", epoch + 1, model.loss_history[-1])
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite weights in {k} after training")
    return model


# -- inference -------------------------------------------------------------------


def _check_layer(model: ActLmModel, h: int) -> None:
    if not 1 <= h <= model.config.num_layers:
        raise ValueError(f"layer index {h} outside [1, {model.config.num_layers}]")


def encode_flow(model: ActLmModel, flow: ActFlow, h: int, truncate: bool = False) -> np.ndarray:
    """Hidden states after block ``h``, one row per (kept) segment."""
    _check_layer(model, h)
    seq = _fit_length(flow, model.config, truncate)
    ids, types, valid = _pad_batch([seq])
    out = hidden_states(model, ids, types, valid, h)
    return out[0, 1 : len(seq[0]) + 1].astype(np.float64)


def act_feature(model: ActLmModel, flow: ActFlow, h: int, truncate: bool = False) -> np.ndarray:
    return encode_flow(model, flow, h, truncate).max(axis=0)


def predict_masked(model: ActLmModel, flow: ActFlow, positions: Iterable[int]) -> dict[int, np.ndarray]:
    """Distribution over the eleven acts at each position, with all of them masked."""
    positions = sorted(set(int(i) for i in positions))
    n = len(flow)
    for i in positions:
        if not 0 <= i < n:
            raise IndexError(f"position {i} outside flow of length {n}")
    if n > model.config.max_seq_len:
        raise ValueError(f"flow of length {n} exceeds max_seq_len {model.config.max_seq_len}")
    seq = _fit_length(flow, model.config, False)
    ids, types, valid = _pad_batch([seq])
    for i in positions:
        ids[0, i + 1] = MASK
    z = hidden_states(model, ids, types, valid, model.config.num_layers)
    probs = _softmax(_head_logits(model.params, z[0, [i + 1 for i in positions]]).astype(np.float64))
    return {i: probs[j] for j, i in enumerate(positions)}


def masked_accuracy(
    model: ActLmModel,
    corpus: Corpus | Iterable[ActFlow | Dialogue],
    mask_prob: float = 0.15,
    seed: int = 0,
    batch_size: int = 64,
) -> float:
    """Fraction of masked positions whose argmax prediction is the true act.

    At least one position per flow is masked; every selected position is
    replaced by MASK. The selection depends only on ``seed``.
    """
    flows = _flows_of(corpus)
    cfg = model.config
    seqs = [_fit_length(f, cfg, True) for f in flows]
    rng = np.random.default_rng(seed)
    correct = total = 0
    for b in range(0, len(seqs), batch_size):
        batch = make_masked_batch(seqs[b : b + batch_size], mask_prob, rng, corrupt=False)
        z = hidden_states(model, batch.ids, batch.types, batch.valid, cfg.num_layers)
        logits = _head_logits(model.params, z[batch.rows, batch.cols])
        correct += int((logits.argmax(-1) == batch.targets).sum())
        total += len(batch.targets)
    return correct / total


def majority_baseline(corpus: Corpus | Iterable[ActFlow | Dialogue]) -> float:
    counts = np.zeros(NUM_ACTS, dtype=np.int64)
    for f in _flows_of(corpus):
        counts += np.bincount(f.indices(), minlength=NUM_ACTS)
    return float(counts.max() / counts.sum())


# -- checkpoints -----------------------------------------------------------------


def save_model(model: ActLmModel, path: str | Path) -> None:
    """Write config, loss history and all weights to one ``.npz`` container."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "loss_history": model.loss_history,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
    }
    arrays = {k: np.ascontiguousarray(v) for k, v in model.params.items()}
    with Path(path).open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path: str | Path) -> ActLmModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an act-LM checkpoint (format {meta.get('format')!r})")
        cfg = ActLmConfig.from_dict(meta["config"])
        params = {k: z[k].copy() for k in meta["shapes"]}
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"{path}: tensor {k} has shape {params[k].shape}, expected {shape}")
    expected = init_params(replace(cfg, init_std=0.0), np.random.default_rng(0))
    if set(expected) != set(params):
        raise ValueError(f"{path}: parameter set does not match config")
    return ActLmModel(cfg, params, list(meta["loss_history"]))


__all__ = [
    "ActLmConfig",
    "ActLmModel",
    "MaskedBatch",
    "new_model",
    "init_params",
    "loss_and_grads",
    "make_masked_batch",
    "train_act_lm",
    "encode_flow",
    "act_feature",
    "predict_masked",
    "masked_accuracy",
    "majority_baseline",
    "save_model",
    "load_model",
    "SegmentAct",
]
