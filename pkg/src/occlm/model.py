"""Decoder-only transformer: embeddings, pre-LN masked-attention blocks,
tied output head, plus parameter-set bookkeeping and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, LengthError, TokenIndexError

CKPT_MAGIC = b"OCCLMCKPT1\n"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    block_size: int = 128
    d_model: int = 256
    n_layers: int = 6
    n_heads: int = 4
    dropout: float = 0.3
    ffn_mult: int = 4
    tie_embeddings: bool = True

    def check(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not (0 <= self.dropout < 1):
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers {self.n_layers} must be >= 1")
        if self.block_size < 2:
            raise ConfigError(f"block_size {self.block_size} must be >= 2")
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size {self.vocab_size} must be >= 1")
        return self

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


def config_from_dict(d):
    names = {f.name for f in fields(ModelConfig)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown ModelConfig fields: {sorted(extra)}")
    return ModelConfig(**d).check()


class ParameterSet:
    """Ordered name -> Tensor map; shapes are a pure function of the config."""

    def __init__(self, config, tensors):
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grads(self):
        for t in self._tensors.values():
            t.zero_grad()

    def n_params(self):
        return sum(t.size for t in self._tensors.values())

    def copy(self):
        dup = {
            name: T.Tensor(t.data.copy(), requires_grad=True, name=name)
            for name, t in self._tensors.items()
        }
        return ParameterSet(self.config, dup)

    @staticmethod
    def group(name):
        """Map a tensor name to its freeze group: embeddings, block{i}, head."""
        if name in ("tok_emb", "pos_emb"):
            return "embeddings"
        if name.startswith("block"):
            return name.split(".")[0]
        return "head"


def param_shapes(config):
    """The full named-shape table; insertion order is the init draw order."""
    c = config
    d, f = c.d_model, c.ffn_mult * c.d_model
    shapes = {"tok_emb": (c.vocab_size, d), "pos_emb": (c.block_size, d)}
    for i in range(c.n_layers):
        p = f"block{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.wk"] = (d, d)
        shapes[f"{p}.attn.wv"] = (d, d)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    if not c.tie_embeddings:
        shapes["head.w"] = (d, c.vocab_size)
    return shapes


def param_count(config):
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init(config, seed):
    """Normal(0, 0.02) weights, zero biases, unit layer-norm scales."""
    config.check()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf in ("b", "b1", "b2"):
            data = np.zeros(shape, dtype=T.DTYPE)
        elif leaf == "g":
            data = np.ones(shape, dtype=T.DTYPE)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(T.DTYPE)
        tensors[name] = T.Tensor(data, requires_grad=True, name=name)
    return ParameterSet(config, tensors)


def _attention(params, config, prefix, x, train, rng):
    B, S, d = x.shape
    H, hd = config.n_heads, config.head_dim
    q = T.matmul(x, params[f"{prefix}.attn.wq"])
    k = T.matmul(x, params[f"{prefix}.attn.wk"])
    v = T.matmul(x, params[f"{prefix}.attn.wv"])
    # (B,S,d) -> (B,H,S,hd)
    q = T.transpose(T.reshape(q, (B, S, H, hd)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (B, S, H, hd)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (B, S, H, hd)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    att = T.softmax_lastdim(T.causal_mask_fill(scores))
    att = T.dropout(att, config.dropout, train, rng)
    ctx = T.matmul(att, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
    out = T.matmul(ctx, params[f"{prefix}.attn.wo"])
    return T.dropout(out, config.dropout, train, rng)


def _block(params, config, i, x, train, rng):
    p = f"block{i}"
    h = T.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    x = T.add(x, _attention(params, config, p, h, train, rng))
    h = T.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    h = T.gelu(T.add(T.matmul(h, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
    h = T.add(T.matmul(h, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"])
    h = T.dropout(h, config.dropout, train, rng)
    return T.add(x, h)


def forward(params, config, ids, train=False, rng=None):
    """Run the decoder; returns logits of shape B x T x V.

    Position t logits depend only on ids[..t] (causal mask). With tied
    embeddings the output head reuses tok_emb storage.
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise LengthError(f"ids must be 1-D or 2-D, got shape {ids.shape}")
    B, S = ids.shape
    if S < 1:
        raise LengthError("forward needs at least one token")
    if S > config.block_size:
        raise LengthError(f"sequence length {S} exceeds block_size {config.block_size}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise TokenIndexError(f"token id {bad} outside vocab of {config.vocab_size}")

    tok = T.embedding_lookup(params["tok_emb"], ids)
    pos = T.embedding_lookup(params["pos_emb"], np.arange(S))
    x = T.dropout(T.add(tok, pos), config.dropout, train, rng)
    for i in range(config.n_layers):
        x = _block(params, config, i, x, train, rng)
    x = T.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    if config.tie_embeddings:
        return T.matmul(x, T.transpose(params["tok_emb"], (1, 0)))
    return T.matmul(x, params["head.w"])


def sequence_logprob(params, config, ids):
    """log P(ids) under the model: sum of per-step next-token log-probs."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or ids.shape[0] < 2:
        raise LengthError(f"need a 1-D sequence of length >= 2, got {ids.shape}")
    logits = forward(params, config, ids[:-1], train=False).data[0]
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(logp[np.arange(len(ids) - 1), ids[1:]].sum())


@dataclass
class FreezeMask:
    """Trainable flags per freeze group."""

    embeddings: bool
    blocks: tuple
    head: bool = True

    def check(self, config):
        if len(self.blocks) != config.n_layers:
            raise ConfigError(
                f"freeze mask has {len(self.blocks)} block flags for "
                f"{config.n_layers} layers"
            )
        if not (self.embeddings or self.head or any(self.blocks)):
            raise ConfigError("freeze mask leaves no layer trainable")
        return self

    @classmethod
    def all_trainable(cls, config):
        return cls(embeddings=True, blocks=(True,) * config.n_layers, head=True)

    def allows(self, name):
        group = ParameterSet.group(name)
        if group == "embeddings":
            return self.embeddings
        if group == "head":
            return self.head
        return self.blocks[int(group[len("block"):])]

    def trainable_names(self, params):
        return [name for name in params.names() if self.allows(name)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params, vocab_hash, metadata=None, extras=None):
    """Header (version, config, vocab hash, metadata) + named float32 blobs.

    extras: optional name -> float32/float64/int64 arrays (optimizer moments
    and similar training state), stored after the parameter blobs.
    """
    names = params.names()
    extras = extras or {}
    header = {
        "format_version": CKPT_VERSION,
        "config": asdict(params.config),
        "vocab_hash": vocab_hash,
        "metadata": metadata or {},
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extras": [
            {"name": n, "shape": list(np.asarray(a).shape), "dtype": np.asarray(a).dtype.str}
            for n, a in extras.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())
        for n, a in extras.items():
            a = np.asarray(a)
            fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())


def read_checkpoint_header(path):
    """Parse just the JSON header; no tensor payloads are read."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
            size = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(size).decode("utf-8"))
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('format_version')}"
        )
    return header


def load_checkpoint(path, expect_config=None, expect_vocab_hash=None):
    """Read a checkpoint; fails loudly on corruption or config/hash mismatch.

    Returns (params, header_dict, extras_dict).
    """
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
            size = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(size).decode("utf-8"))
            if header.get("format_version") != CKPT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version {header.get('format_version')}"
                )
            config = config_from_dict(header["config"])
            tensors = {}
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                n_bytes = int(np.prod(shape)) * 4 if shape else 4
                raw = fh.read(n_bytes)
                if len(raw) != n_bytes:
                    raise CheckpointError(f"{path} truncated at tensor {entry['name']}")
                data = np.frombuffer(raw, dtype="<f4").reshape(shape)
                tensors[entry["name"]] = T.Tensor(
                    data.copy(), requires_grad=True, name=entry["name"]
                )
            extras = {}
            for entry in header["extras"]:
                shape = tuple(entry["shape"])
                dt = np.dtype(entry["dtype"])
                n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
                raw = fh.read(n_bytes)
                if len(raw) != n_bytes:
                    raise CheckpointError(f"{path} truncated at extra {entry['name']}")
                extras[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    expected_names = list(param_shapes(config))
    if list(tensors) != expected_names:
        raise CheckpointError(f"{path} tensor names do not match its config")
    for name, shape in param_shapes(config).items():
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path} tensor {name} has shape {tensors[name].shape}, "
                f"config implies {shape}"
            )
    if expect_config is not None and asdict(expect_config) != asdict(config):
        diff = [
            f.name
            for f in fields(ModelConfig)
            if getattr(expect_config, f.name) != getattr(config, f.name)
        ]
        raise CheckpointError(f"checkpoint config mismatch in fields: {diff}")
    if expect_vocab_hash is not None and header["vocab_hash"] != expect_vocab_hash:
        raise CheckpointError(
            f"checkpoint was trained with vocab {header['vocab_hash'][:12]}, "
            f"current vocab is {expect_vocab_hash[:12]}"
        )
    return ParameterSet(config, tensors), header, extras
