"""Tiny decoder-only transformer used as the compression test bed.

Checkpoints hold float32 numpy arrays; all computation runs in float64 torch so that
activation capture, training and finite-difference checks are reproducible.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from errors import ContainerFormatError, InvalidInputError, TrainingDivergedError
from utils import atomic_write_bytes

logger = logging.getLogger(__name__)

META_KEY = "__meta__"
NORM_EPS = 1e-6
ROPE_BASE = 10000.0
HEAD_INIT_STD = 0.02
POOL_MODES = ("last", "mean")
TASK_KINDS = ("markov-chain", "modular-addition")
_SPLITS = {"train": 0, "eval": 1, "capture": 2}
_MARKOV_TABLE_STREAM = 7919
_MARKOV_CONCENTRATION = 0.1


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    seed: int = 0
    init_scale: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise InvalidInputError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if (self.d_model // self.n_heads) % 2:
            raise InvalidInputError("head dimension must be even for rotary position encoding")
        if self.init_scale < 0:
            raise InvalidInputError(f"init_scale must be >= 0, got {self.init_scale}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LayerParams:
    """Parameters of one pre-norm residual block. Matrices act on row vectors (x @ W)."""

    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    ffn_up: np.ndarray
    ffn_down: np.ndarray
    norm_attn: np.ndarray
    norm_ffn: np.ndarray

    TENSOR_NAMES = (
        "attn_q",
        "attn_k",
        "attn_v",
        "attn_o",
        "ffn_up",
        "ffn_down",
        "norm_attn",
        "norm_ffn",
    )

    @staticmethod
    def expected_shapes(config: ModelConfig):
        d, f = config.d_model, config.d_ff
        return {
            "attn_q": (d, d),
            "attn_k": (d, d),
            "attn_v": (d, d),
            "attn_o": (d, d),
            "ffn_up": (d, f),
            "ffn_down": (f, d),
            "norm_attn": (d,),
            "norm_ffn": (d,),
        }

    def tensors(self):
        return {name: getattr(self, name) for name in self.TENSOR_NAMES}

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors().values()])

    def copy(self):
        return LayerParams(**{k: v.copy() for k, v in self.tensors().items()})


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    embedding: np.ndarray
    layers: list
    final_norm: np.ndarray
    head: np.ndarray

    def __post_init__(self):
        if len(self.layers) != self.config.n_layers:
            raise InvalidInputError(
                f"config declares {self.config.n_layers} layers but {len(self.layers)} given"
            )

    def with_layers(self, layers):
        """New checkpoint sharing embedding/norm/head, with `layers` as its block stack."""
        return ModelCheckpoint(
            config=replace(self.config, n_layers=len(layers)),
            embedding=self.embedding,
            layers=list(layers),
            final_norm=self.final_norm,
            head=self.head,
        )

    def tensors(self):
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            for name, t in layer.tensors().items():
                out[f"layers.{i}.{name}"] = t
        out["final_norm"] = self.final_norm
        out["head"] = self.head
        return out

    def flat(self):
        return np.concatenate([t.ravel().astype(np.float64) for t in self.tensors().values()])


@dataclass
class ActivationMatrix:
    layer_index: int
    data: np.ndarray

    @property
    def n_inputs(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class ToyTask:
    """
    Seeded synthetic next-token task.

    `markov-chain` draws sequences from an order-2 Markov chain whose transition table is a
    function of the seed; `modular-addition` emits triples (a, b, (a + b) mod vocab) and only
    scores the answer tokens.
    """

    kind: str = "markov-chain"
    vocab_size: int = 16
    seq_len: int = 16
    seed: int = 0
    _table: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidInputError(f"Unknown task kind {self.kind!r}; expected {TASK_KINDS}")
        if self.vocab_size < 2:
            raise InvalidInputError("vocab_size must be >= 2")
        if self.seq_len < 2:
            raise InvalidInputError("seq_len must be >= 2")
        if self.kind == "markov-chain":
            rng = np.random.default_rng([self.seed, _MARKOV_TABLE_STREAM])
            v = self.vocab_size
            table = rng.dirichlet(np.full(v, _MARKOV_CONCENTRATION), size=(v, v))
            object.__setattr__(self, "_table", np.cumsum(table, axis=-1))

    def loss_mask(self, batch_size):
        """Which next-token targets are scored (shape batch x seq_len)."""
        if self.kind == "markov-chain":
            return np.ones((batch_size, self.seq_len), dtype=bool)
        target_pos = np.arange(1, self.seq_len + 1)
        return np.broadcast_to(target_pos % 3 == 2, (batch_size, self.seq_len)).copy()

    def _sample(self, rng, batch_size):
        n = self.seq_len + 1
        v = self.vocab_size
        if self.kind == "modular-addition":
            n_triples = math.ceil(n / 3)
            a = rng.integers(0, v, size=(batch_size, n_triples))
            b = rng.integers(0, v, size=(batch_size, n_triples))
            seq = np.stack([a, b, (a + b) % v], axis=-1).reshape(batch_size, -1)
            return seq[:, :n].astype(np.int64)
        tokens = np.empty((batch_size, n), dtype=np.int64)
        tokens[:, :2] = rng.integers(0, v, size=(batch_size, 2))
        for t in range(2, n):
            cum = self._table[tokens[:, t - 2], tokens[:, t - 1]]
            u = rng.random(batch_size)
            tokens[:, t] = np.minimum((u[:, None] > cum).sum(axis=1), v - 1)
        return tokens

    def batches(self, batch_size, split="train"):
        """
        Endless deterministic stream of (tokens, mask) for a split.

        tokens has shape (batch_size, seq_len + 1); inputs are tokens[:, :-1] and targets
        tokens[:, 1:].
        """
        if split not in _SPLITS:
            raise InvalidInputError(f"Unknown split {split!r}")
        rng = np.random.default_rng([self.seed, _SPLITS[split]])
        mask = self.loss_mask(batch_size)
        while True:
            yield self._sample(rng, batch_size), mask


# ---------------------------------------------------------------------------
# Container format
# ---------------------------------------------------------------------------


def encode_container(tensors: dict, meta: dict) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": [int(s) for s in np.shape(arr)],
            "offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    header[META_KEY] = meta
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_container(buf: bytes):
    """
    Parse a container produced by `encode_container`.

    Returns:
        tuple: (dict name -> float32 ndarray in file order, meta dict)
    """
    size = len(buf)
    if size < 8:
        raise ContainerFormatError("header length exceeds file size", 0)
    (header_len,) = struct.unpack_from("<Q", buf, 0)
    if header_len > size - 8:
        raise ContainerFormatError("header length exceeds file size", 0)
    try:
        header = json.loads(buf[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"malformed header JSON: {e}", 8)
    if not isinstance(header, dict):
        raise ContainerFormatError("header is not a JSON object", 8)

    data_start = 8 + header_len
    data_len = size - data_start
    meta = header.pop(META_KEY, {})
    if not isinstance(meta, dict):
        raise ContainerFormatError("metadata is not a JSON object", 8)
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise ContainerFormatError(f"entry for tensor {name!r} is not a JSON object", 8)
        offsets = entry.get("offsets")
        if not isinstance(offsets, list) or len(offsets) != 2:
            raise ContainerFormatError(f"offsets of {name!r} must be a [begin, end] pair", 8)
    try:
        entries = sorted(header.items(), key=lambda kv: int(kv[1]["offsets"][0]))
    except (TypeError, ValueError):
        raise ContainerFormatError("non-integer tensor offsets", 8)
    tensors = {}
    for name, entry in entries:
        try:
            dtype = entry["dtype"]
            shape = [int(s) for s in entry["shape"]]
            begin, end = (int(o) for o in entry["offsets"])
        except (KeyError, TypeError, ValueError):
            raise ContainerFormatError(f"malformed entry for tensor {name!r}", 8)
        if dtype != "f32":
            raise ContainerFormatError(f"unsupported dtype {dtype!r} for {name!r}", 8)
        if any(s < 0 for s in shape) or begin < 0 or end < begin:
            raise ContainerFormatError(f"invalid shape/offsets for {name!r}", 8)
        if end > data_len:
            raise ContainerFormatError(
                f"truncated data for {name!r}: needs {end} bytes, {data_len} present",
                data_start + min(begin, data_len),
            )
        count = int(np.prod(shape, dtype=np.int64))
        if end - begin != 4 * count:
            raise ContainerFormatError(
                f"shape {shape} of {name!r} does not match its byte range", data_start + begin
            )
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=data_start + begin)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return tensors, meta


def save_container(path, tensors: dict, meta: dict):
    atomic_write_bytes(path, encode_container(tensors, meta))


def load_container(path):
    return decode_container(Path(path).read_bytes())


def checkpoint_from_tensors(tensors: dict, meta: dict) -> ModelCheckpoint:
    if "config" not in meta:
        raise ContainerFormatError("metadata has no model config", 8)
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (TypeError, InvalidInputError) as e:
        raise ContainerFormatError(f"invalid model config: {e}", 8)

    def take(name, shape):
        if name not in tensors:
            raise ContainerFormatError(f"missing tensor {name!r}", 8)
        arr = tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise ContainerFormatError(
                f"tensor {name!r} has shape {list(arr.shape)}, expected {list(shape)}", 8
            )
        return arr

    d, v = config.d_model, config.vocab_size
    shapes = LayerParams.expected_shapes(config)
    layers = [
        LayerParams(**{n: take(f"layers.{i}.{n}", s) for n, s in shapes.items()})
        for i in range(config.n_layers)
    ]
    extra = []
    for n in tensors:
        if not n.startswith("layers."):
            continue
        index = n.split(".")[1]
        if not index.isdigit():
            raise ContainerFormatError(f"malformed layer tensor name {n!r}", 8)
        if int(index) >= len(layers):
            extra.append(n)
    if extra:
        raise ContainerFormatError(f"tensors beyond declared layer count: {extra[:3]}", 8)
    return ModelCheckpoint(
        config=config,
        embedding=take("embedding", (v, d)),
        layers=layers,
        final_norm=take("final_norm", (d,)),
        head=take("head", (d, v)),
    )


def checkpoint_to_bytes(ckpt: ModelCheckpoint) -> bytes:
    return encode_container(ckpt.tensors(), {"config": ckpt.config.to_dict(), "kind": "checkpoint"})


def save_checkpoint(ckpt: ModelCheckpoint, path):
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))
    logger.info("Saved %d-layer checkpoint to %s", ckpt.config.n_layers, path)


def load_checkpoint(path) -> ModelCheckpoint:
    tensors, meta = load_container(path)
    return checkpoint_from_tensors(tensors, meta)


def save_activations(path, activations, meta: dict):
    tensors = {f"layer.{a.layer_index}.activations": a.data for a in activations}
    save_container(path, tensors, {"kind": "activations", **meta})


def load_activations(path):
    """
    Returns:
        tuple: (list of ActivationMatrix ordered by layer index, meta dict)
    """
    tensors, meta = load_container(path)
    acts = []
    for name, arr in tensors.items():
        parts = name.split(".")
        if (len(parts) != 3 or parts[0] != "layer" or parts[2] != "activations"
                or not parts[1].isdigit()):
            raise ContainerFormatError(f"unexpected tensor {name!r} in activation dump", 8)
        if arr.ndim != 2:
            raise ContainerFormatError(f"{name!r} must be 2-D", 8)
        acts.append(ActivationMatrix(int(parts[1]), arr.astype(np.float64)))
    acts.sort(key=lambda a: a.layer_index)
    return acts, meta


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def init_model(config: ModelConfig) -> ModelCheckpoint:
    """
    Seeded initialisation. Residual-branch output projections use init_scale/sqrt(n_layers)
    so that blocks start close to the identity.
    """
    rng = np.random.default_rng(config.seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    branch_std = config.init_scale / math.sqrt(config.n_layers)

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    embedding = normal((v, d), 1.0)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                attn_q=normal((d, d), config.init_scale),
                attn_k=normal((d, d), config.init_scale),
                attn_v=normal((d, d), config.init_scale),
                attn_o=normal((d, d), branch_std),
                ffn_up=normal((d, f), config.init_scale),
                ffn_down=normal((f, d), branch_std),
                norm_attn=np.ones(d, dtype=np.float32),
                norm_ffn=np.ones(d, dtype=np.float32),
            )
        )
    head = normal((d, v), HEAD_INIT_STD)
    return ModelCheckpoint(config, embedding, layers, np.ones(d, dtype=np.float32), head)


def plant_redundancy(ckpt: ModelCheckpoint, position: int, epsilon: float, seed=None):
    """
    Insert a near-identity block at `position` (0 = before the first block).

    Every matrix of the new block is an i.i.d. standard normal draw times `epsilon`; norm
    scales are ones. With epsilon = 0 the residual branch outputs zero and the model
    function is unchanged.
    """
    n = ckpt.config.n_layers
    if not 0 <= position <= n:
        raise InvalidInputError(f"position must be in [0, {n}], got {position}")
    if epsilon < 0:
        raise InvalidInputError(f"epsilon must be >= 0, got {epsilon}")
    seed = ckpt.config.seed if seed is None else seed
    rng = np.random.default_rng([seed, position, 1])
    shapes = LayerParams.expected_shapes(ckpt.config)
    tensors = {}
    for name, shape in shapes.items():
        if name.startswith("norm_"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * epsilon).astype(np.float32)
    layers = list(ckpt.layers)
    layers.insert(position, LayerParams(**tensors))
    return ckpt.with_layers(layers)


def rms_norm(x, scale):
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + NORM_EPS) * scale


def rotary_tables(seq_len, head_dim, dtype=torch.float64):
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-torch.arange(half, dtype=dtype) / half)
    angles = torch.arange(seq_len, dtype=dtype)[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rotary(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _param(arr):
    return nn.Parameter(torch.from_numpy(np.asarray(arr, dtype=np.float64).copy()))


class DecoderBlock(nn.Module):
    def __init__(self, params: LayerParams, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        for name, tensor in params.tensors().items():
            setattr(self, name, _param(tensor))

    def attention(self, x, cos, sin):
        b, t, d = x.shape
        hd = d // self.n_heads

        def heads(w):
            return (x @ w).view(b, t, self.n_heads, hd).transpose(1, 2)

        q = apply_rotary(heads(self.attn_q), cos, sin)
        k = apply_rotary(heads(self.attn_k), cos, sin)
        v = heads(self.attn_v)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.ones(t, t, dtype=torch.bool).triu(diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return y.transpose(1, 2).reshape(b, t, d) @ self.attn_o

    def forward(self, x, cos, sin):
        x = x + self.attention(rms_norm(x, self.norm_attn), cos, sin)
        return x + F.gelu(rms_norm(x, self.norm_ffn) @ self.ffn_up) @ self.ffn_down

    def to_params(self):
        return LayerParams(
            **{
                name: getattr(self, name).detach().numpy().astype(np.float32)
                for name in LayerParams.TENSOR_NAMES
            }
        )


class TinyDecoder(nn.Module):
    """Float64 torch view of a ModelCheckpoint."""

    def __init__(self, ckpt: ModelCheckpoint):
        super().__init__()
        self.config = ckpt.config
        self.embedding = _param(ckpt.embedding)
        self.blocks = nn.ModuleList(DecoderBlock(p, ckpt.config.n_heads) for p in ckpt.layers)
        self.final_norm = _param(ckpt.final_norm)
        self.head = _param(ckpt.head)

    def forward(self, tokens, capture=False):
        """
        Args:
            tokens: LongTensor (batch, seq)
            capture: also return the hidden states after the embedding and every block

        Returns:
            logits (batch, seq, vocab) and, when capturing, a list of L + 1 hidden states
        """
        t = tokens.shape[1]
        cos, sin = rotary_tables(t, self.config.head_dim)
        x = self.embedding[tokens]
        hidden = [x] if capture else None
        for block in self.blocks:
            x = block(x, cos, sin)
            if capture:
                hidden.append(x)
        logits = rms_norm(x, self.final_norm) @ self.head
        return (logits, hidden) if capture else logits

    def to_checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint(
            config=self.config,
            embedding=self.embedding.detach().numpy().astype(np.float32),
            layers=[b.to_params() for b in self.blocks],
            final_norm=self.final_norm.detach().numpy().astype(np.float32),
            head=self.head.detach().numpy().astype(np.float32),
        )


def _check_tokens(config: ModelConfig, batch):
    tokens = np.asarray(batch)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise InvalidInputError(f"batch must be a 2-D array of token ids, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InvalidInputError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InvalidInputError(f"token ids must lie in [0, {config.vocab_size})")
    if tokens.shape[1] > config.max_seq_len:
        raise InvalidInputError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    return torch.from_numpy(tokens.astype(np.int64))


def pool_hidden(hidden, pool):
    if pool == "last":
        return hidden[:, -1, :]
    if pool == "mean":
        return hidden.mean(dim=1)
    raise InvalidInputError(f"Unknown pool mode {pool!r}; expected {POOL_MODES}")


def forward_with_capture(ckpt: ModelCheckpoint, batch, pool="last"):
    """
    Run the model and collect one activation vector per input and layer.

    Returns:
        tuple: (last-position logits as an N x vocab float64 array,
                list of L + 1 ActivationMatrix; index 0 is the post-embedding state)
    """
    tokens = _check_tokens(ckpt.config, batch)
    model = TinyDecoder(ckpt)
    with torch.no_grad():
        logits, hidden = model(tokens, capture=True)
    acts = [
        ActivationMatrix(layer_index=i, data=pool_hidden(h, pool).numpy().copy())
        for i, h in enumerate(hidden)
    ]
    return logits[:, -1, :].numpy().copy(), acts


def _check_task(config: ModelConfig, task: ToyTask):
    if task.vocab_size != config.vocab_size:
        raise InvalidInputError(
            f"task vocab {task.vocab_size} does not match model vocab {config.vocab_size}"
        )
    if task.seq_len > config.max_seq_len:
        raise InvalidInputError(
            f"task seq_len {task.seq_len} exceeds model max_seq_len {config.max_seq_len}"
        )


def capture_activations(ckpt: ModelCheckpoint, task: ToyTask, n_inputs: int, pool="last",
                        batch_size=64):
    """
    Draw `n_inputs` capture sequences from the task and record per-layer activations.

    Returns:
        tuple: (list of ActivationMatrix for layers 0..L, next-token labels of length N)
    """
    _check_task(ckpt.config, task)
    if n_inputs < 2:
        raise InvalidInputError(f"need at least 2 inputs, got {n_inputs}")
    stream = task.batches(batch_size, split="capture")
    chunks = []
    while sum(len(c) for c in chunks) < n_inputs:
        tokens, _ = next(stream)
        chunks.append(tokens)
    tokens = np.concatenate(chunks)[:n_inputs]
    _, acts = forward_with_capture(ckpt, tokens[:, :-1], pool=pool)
    return acts, tokens[:, -1].copy()


def _masked_loss(logits, targets, mask):
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[mask].mean()


def task_loss_fn(ckpt: ModelCheckpoint, task: ToyTask, n_batches=1, batch_size=32, split="eval"):
    """
    Fixed evaluation batch and a closure computing its masked cross-entropy for a module.

    Returns:
        callable: model -> scalar torch loss
    """
    _check_task(ckpt.config, task)
    stream = task.batches(batch_size, split=split)
    batches = [next(stream) for _ in range(n_batches)]
    tokens = torch.from_numpy(np.concatenate([b[0] for b in batches]))
    mask = torch.from_numpy(np.concatenate([b[1] for b in batches]))

    def loss(model):
        return _masked_loss(model(tokens[:, :-1]), tokens[:, 1:], mask)

    return loss


def evaluate(ckpt: ModelCheckpoint, task: ToyTask, n_batches=20, batch_size=32):
    """
    Masked next-token cross-entropy and accuracy on the task's eval split.

    Returns:
        dict: {"cross_entropy": float, "next_token_accuracy": float}
    """
    _check_task(ckpt.config, task)
    if n_batches < 1:
        raise InvalidInputError("n_batches must be >= 1")
    model = TinyDecoder(ckpt)
    stream = task.batches(batch_size, split="eval")
    total_nll = 0.0
    correct = 0
    count = 0
    with torch.no_grad():
        for _ in range(n_batches):
            tokens, mask = next(stream)
            tokens = torch.from_numpy(tokens)
            mask = torch.from_numpy(mask)
            logits = model(tokens[:, :-1])
            targets = tokens[:, 1:]
            logp = F.log_softmax(logits, dim=-1)
            nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
            total_nll += float(nll[mask].sum())
            correct += int((logits.argmax(dim=-1) == targets)[mask].sum())
            count += int(mask.sum())
    return {"cross_entropy": total_nll / count, "next_token_accuracy": correct / count}


def train_toy_with_history(config: ModelConfig, task: ToyTask, steps=2000, learning_rate=3e-3,
                           batch_size=32, momentum=0.9, clip_norm=1.0, progress=False):
    """
    SGD (with momentum) on the task's train split with gradient-norm clipping.

    Returns:
        tuple: (trained ModelCheckpoint, list of per-step training losses)

    Raises:
        TrainingDivergedError: the loss became NaN/Inf
    """
    if steps < 0:
        raise InvalidInputError(f"steps must be >= 0, got {steps}")
    _check_task(config, task)
    ckpt = init_model(config)
    if steps == 0:
        return ckpt, []
    model = TinyDecoder(ckpt)
    optimizer = torch.optim.SGD(model.parameters(), lr=learning_rate, momentum=momentum)
    stream = task.batches(batch_size, split="train")
    losses = []
    for step in tqdm(range(steps), desc="Training", disable=not progress):
        tokens, mask = next(stream)
        tokens = torch.from_numpy(tokens)
        loss = _masked_loss(model(tokens[:, :-1]), tokens[:, 1:], torch.from_numpy(mask))
        value = float(loss)
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        losses.append(value)
        optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
        optimizer.step()
    logger.info("Trained %d steps: loss %.4f -> %.4f", steps, losses[0], losses[-1])
    return model.to_checkpoint(), losses


def train_toy(config: ModelConfig, task: ToyTask, steps=2000, learning_rate=3e-3, **kwargs):
    return train_toy_with_history(config, task, steps, learning_rate, **kwargs)[0]
