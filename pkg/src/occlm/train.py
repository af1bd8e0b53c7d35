"""Training engine: standard and occlusion objectives, AdamW with linear
warmup/decay, early stopping, gradual unfreezing, and the JSONL metrics sink.

The occlusion objective corrupts only the inputs: eligible positions are
replaced by the occlusion id at probability p, while the loss targets stay
exactly the pack() targets, so the model must recover occluded tokens from
the surrounding left context.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, model
from . import tensor as T
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    NumericsError,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SINK_FIELDS = (
    "run_id", "epoch", "step", "split", "loss", "perplexity", "lr",
    "occlusion_prob", "wall_ms",
)


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    base_lr: float = 1e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 1e-2
    patience: int = 5
    occlusion_prob: float = 0.0
    seed: int = 0
    grad_clip: float | None = None
    unfreeze_top_k: int = 2
    unfreeze_interval_epochs: int = 2
    # experiment switch: extra loss weight on positions whose target token
    # was occluded in the input (1.0 = uniform, the default reading)
    occlusion_loss_weight: float = 1.0

    def check(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not (0.0 <= self.occlusion_prob <= 1.0):
            raise ConfigError(
                f"occlusion_prob {self.occlusion_prob} outside [0, 1]"
            )
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ConfigError(
                f"warmup_fraction {self.warmup_fraction} outside [0, 1)"
            )
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.unfreeze_top_k < 1 or self.unfreeze_interval_epochs < 1:
            raise ConfigError("unfreeze_top_k and interval must be >= 1")
        if self.occlusion_loss_weight <= 0:
            raise ConfigError("occlusion_loss_weight must be > 0")
        return self


@dataclass
class TrainState:
    step: int
    epoch: int
    m: dict
    v: dict
    t: dict
    best_valid_loss: float
    epochs_since_improvement: int
    freeze_mask: model.FreezeMask
    rng: np.random.Generator
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str | None = None


def init_state(params, cfg, freeze_mask=None):
    mask = freeze_mask or model.FreezeMask.all_trainable(params.config)
    return TrainState(
        step=0,
        epoch=0,
        m={n: np.zeros(params[n].shape, dtype=T.DTYPE) for n in params.names()},
        v={n: np.zeros(params[n].shape, dtype=T.DTYPE) for n in params.names()},
        t={n: 0 for n in params.names()},
        best_valid_loss=math.inf,
        epochs_since_improvement=0,
        freeze_mask=mask.check(params.config),
        rng=np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x0CC])),
    )


def occlude_batch(inputs, p, occ_id, rng, special_ids=()):
    """Replace eligible (non-special) positions with occ_id at probability p.

    Returns (occluded copy, flags). Targets are never touched here; callers
    keep using the original pack() targets.
    """
    if not (0.0 <= p <= 1.0):
        raise ConfigError(f"occlusion probability {p} outside [0, 1]")
    protected = set(special_ids) | {occ_id}
    if special_ids and occ_id not in special_ids:
        raise ConfigError(
            f"occ_id {occ_id} is a content token for this dataset"
        )
    inputs = np.asarray(inputs)
    out = inputs.copy()
    if p == 0.0:
        return out, np.zeros(inputs.shape, dtype=bool)
    eligible = ~np.isin(inputs, sorted(protected))
    flags = eligible & (rng.random(inputs.shape) < p)
    out[flags] = occ_id
    return out, flags


def lr_at(step, total_steps, cfg):
    """Linear 0 -> base_lr ramp over the warmup span, then linear decay to 0."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if warm > 0 and step <= warm:
        return cfg.base_lr * step / warm
    return cfg.base_lr * (total_steps - step) / (total_steps - warm)


def _occlusion_weights(flags, weight):
    """Per-target-position loss weights from input occlusion flags.

    The token occluded at input position i is the target at position i-1,
    so flags shift left by one; the first input position has no target."""
    w = np.ones(flags.shape, dtype=np.float32)
    w[:, :-1][flags[:, 1:]] = weight
    return w


def train_step(params, state, batch, cfg, lr=None, batch_index=None):
    """One forward/backward/AdamW update on a Batch. Returns (loss, state).

    Only parameters allowed by state.freeze_mask move; frozen parameters and
    their moments stay bit-identical. Decoupled weight decay is scaled by lr
    and applied to matrix-shaped parameters only."""
    lr = cfg.base_lr if lr is None else lr
    x = batch.inputs
    flags = None
    if cfg.occlusion_prob > 0:
        x, flags = occlude_batch(
            x, cfg.occlusion_prob, batch.occ_id, state.rng, batch.special_ids
        )
    weights = None
    if flags is not None and cfg.occlusion_loss_weight != 1.0:
        weights = _occlusion_weights(flags, cfg.occlusion_loss_weight)

    params.zero_grads()
    try:
        with T.Tape() as tape:
            logits = model.forward(
                params, params.config, x, train=True, rng=state.rng
            )
            loss = T.cross_entropy(
                logits, batch.targets, ignore_mask=batch.ignore, weights=weights
            )
            T.backward(loss, tape)
        loss_val = float(loss.data)
    except NumericsError as exc:
        raise DivergenceError(
            f"non-finite value during training step: {exc}",
            step=state.step, lr=lr, batch_index=batch_index,
        ) from exc
    if not math.isfinite(loss_val):
        raise DivergenceError(
            "training loss is not finite",
            step=state.step, lr=lr, batch_index=batch_index,
        )

    trainable = state.freeze_mask.trainable_names(params)
    if cfg.grad_clip is not None:
        sq = 0.0
        for name in trainable:
            g = params[name].grad
            if g is not None:
                sq += float((g.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        if norm > cfg.grad_clip:
            scale = T.DTYPE(cfg.grad_clip / norm)
            for name in trainable:
                if params[name].grad is not None:
                    params[name].grad *= scale

    adamw_update(params, state, trainable, lr, cfg)
    state.step += 1
    return loss_val, state


def adamw_update(params, state, names, lr, cfg):
    """AdamW with bias correction and decoupled, lr-scaled weight decay.

    Decay applies to matrix-shaped parameters only (embeddings, projections);
    vectors (biases, layer-norm) are exempt. Per-parameter step counters keep
    bias correction right when parameters unfreeze at different epochs."""
    for name in names:
        p = params[name]
        g = p.grad
        if g is None:
            continue
        state.t[name] += 1
        tt = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / T.DTYPE(1 - ADAM_BETA1**tt)
        v_hat = v / T.DTYPE(1 - ADAM_BETA2**tt)
        if cfg.weight_decay and p.data.ndim >= 2:
            p.data -= T.DTYPE(lr * cfg.weight_decay) * p.data
        p.data -= T.DTYPE(lr) * m_hat / (np.sqrt(v_hat) + T.DTYPE(ADAM_EPS))


class EarlyStopper:
    """Patience counter over validation losses; improvement is strict <."""

    def __init__(self, patience, best=math.inf, since=0, best_epoch=None):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = best
        self.since = since
        self.best_epoch = best_epoch

    def update(self, loss, epoch=None):
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.since = 0
            return True
        self.since += 1
        return False

    @property
    def should_stop(self):
        return self.since >= self.patience


def unfreeze_schedule(config, cfg):
    """Gradual unfreezing: top-k blocks + head first, one more block every
    interval (top to bottom); embeddings open once every block is open."""

    def mask_at(epoch):
        n_open = min(config.n_layers, cfg.unfreeze_top_k + epoch // cfg.unfreeze_interval_epochs)
        blocks = tuple(i >= config.n_layers - n_open for i in range(config.n_layers))
        return model.FreezeMask(
            embeddings=(n_open >= config.n_layers), blocks=blocks, head=True
        )

    return mask_at


def _epoch_order(cfg, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5EED, epoch]))
    return rng.permutation(n)


def fit(
    params,
    train_ds,
    valid_ds,
    cfg,
    sink=None,
    run_id="",
    freeze_schedule=None,
    abort_rule=None,
    state=None,
    best_params=None,
):
    """Train until early-stop/max-epochs; returns (best params, TrainState).

    Per epoch: full train pass (shuffled deterministically per seed+epoch),
    validation loss + perplexity without occlusion or dropout, both recorded
    to the sink. The returned parameters are the best-validation snapshot,
    not the last. A DivergenceError carries the history accumulated so far.
    Pass a previously saved state to resume mid-run; abort_rule(history) may
    end the run early with stop_reason "diverged".
    """
    cfg.check()
    if len(train_ds) == 0 or len(valid_ds) == 0:
        raise DataError("fit needs nonempty train and validation datasets")
    if state is None:
        state = init_state(params, cfg)
    n_batches = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = n_batches * cfg.max_epochs
    stopper = EarlyStopper(
        cfg.patience,
        best=state.best_valid_loss,
        since=state.epochs_since_improvement,
        best_epoch=state.best_epoch,
    )
    if best_params is None:
        best_params = params.copy()
    state.stop_reason = None

    while state.epoch < cfg.max_epochs:
        epoch = state.epoch
        if freeze_schedule is not None:
            state.freeze_mask = freeze_schedule(epoch).check(params.config)
        order = _epoch_order(cfg, epoch, len(train_ds))
        start_index = state.step - epoch * n_batches
        if not (0 <= start_index < n_batches):
            raise ContractError(
                f"resume state is inconsistent: step {state.step} vs epoch {epoch}"
            )
        t0 = time.perf_counter()
        nll_sum = 0.0
        tok_sum = 0
        lr = cfg.base_lr
        for b in range(start_index, n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = train_ds.minibatch(idx)
            lr = lr_at(state.step, total_steps, cfg)
            try:
                loss_val, _ = train_step(
                    params, state, batch, cfg, lr=lr, batch_index=b
                )
            except DivergenceError as exc:
                exc.history = state.history
                raise
            n_tok = int((~batch.ignore).sum())
            nll_sum += loss_val * n_tok
            tok_sum += n_tok
        train_loss = nll_sum / max(tok_sum, 1)
        try:
            valid_loss, valid_ppl = metrics.perplexity(
                params, params.config, valid_ds
            )
        except NumericsError as exc:
            err = DivergenceError(
                f"non-finite value during validation: {exc}",
                step=state.step, lr=lr, batch_index=None,
            )
            err.history = state.history
            raise err from exc
        wall_ms = (time.perf_counter() - t0) * 1000.0

        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_ppl": metrics.safe_exp(train_loss),
            "valid_loss": valid_loss,
            "valid_ppl": valid_ppl,
            "lr": lr,
            "wall_ms": wall_ms,
        }
        state.history.append(record)
        if sink is not None:
            for split, loss_v, ppl_v in (
                ("train", train_loss, metrics.safe_exp(train_loss)),
                ("valid", valid_loss, valid_ppl),
            ):
                sink.emit(
                    run_id=run_id,
                    epoch=epoch,
                    step=state.step,
                    split=split,
                    loss=loss_v,
                    perplexity=ppl_v,
                    lr=lr,
                    occlusion_prob=cfg.occlusion_prob,
                    wall_ms=wall_ms,
                )

        if stopper.update(valid_loss, epoch):
            best_params = params.copy()
        state.best_valid_loss = stopper.best
        state.epochs_since_improvement = stopper.since
        state.best_epoch = stopper.best_epoch
        state.epoch = epoch + 1

        if abort_rule is not None and abort_rule(state.history):
            state.stop_reason = "diverged"
            break
        if stopper.should_stop:
            state.stop_reason = "early_stop"
            break
    if state.stop_reason is None:
        state.stop_reason = "max_epochs"
    return best_params, state


def finetune(params, train_ds, valid_ds, cfg, sink=None, run_id="", state=None):
    """Fine-tune with gradual unfreezing (top cfg.unfreeze_top_k blocks first,
    one more every cfg.unfreeze_interval_epochs). Checkpoint/config agreement
    is enforced where the checkpoint is loaded."""
    schedule = unfreeze_schedule(params.config, cfg)
    return fit(
        params,
        train_ds,
        valid_ds,
        cfg,
        sink=sink,
        run_id=run_id,
        freeze_schedule=schedule,
        state=state,
    )


# ---------------------------------------------------------------------------
# Training checkpoints (parameters + optimizer state, resumable)
# ---------------------------------------------------------------------------


def save_train_checkpoint(path, params, state, vocab_hash, metadata=None, best_params=None):
    extras = {}
    for name in params.names():
        extras[f"adam.m.{name}"] = state.m[name]
        extras[f"adam.v.{name}"] = state.v[name]
    if best_params is not None:
        for name in best_params.names():
            extras[f"best.{name}"] = best_params[name].data
    meta = dict(metadata or {})
    meta["train_state"] = {
        "step": state.step,
        "epoch": state.epoch,
        "t": state.t,
        "best_valid_loss": state.best_valid_loss,
        "epochs_since_improvement": state.epochs_since_improvement,
        "best_epoch": state.best_epoch,
        "stop_reason": state.stop_reason,
        "freeze_mask": {
            "embeddings": state.freeze_mask.embeddings,
            "blocks": list(state.freeze_mask.blocks),
            "head": state.freeze_mask.head,
        },
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
    }
    model.save_checkpoint(path, params, vocab_hash, metadata=meta, extras=extras)


def load_train_checkpoint(path, expect_config=None, expect_vocab_hash=None):
    """Returns (params, state, best_params or None, header)."""
    params, header, extras = model.load_checkpoint(
        path, expect_config=expect_config, expect_vocab_hash=expect_vocab_hash
    )
    meta = header["metadata"]["train_state"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    mask = model.FreezeMask(
        embeddings=meta["freeze_mask"]["embeddings"],
        blocks=tuple(meta["freeze_mask"]["blocks"]),
        head=meta["freeze_mask"]["head"],
    )
    state = TrainState(
        step=meta["step"],
        epoch=meta["epoch"],
        m={n: extras[f"adam.m.{n}"] for n in params.names()},
        v={n: extras[f"adam.v.{n}"] for n in params.names()},
        t={n: int(meta["t"][n]) for n in params.names()},
        best_valid_loss=meta["best_valid_loss"],
        epochs_since_improvement=meta["epochs_since_improvement"],
        freeze_mask=mask,
        rng=rng,
        history=list(meta["history"]),
        best_epoch=meta["best_epoch"],
        stop_reason=meta["stop_reason"],
    )
    best_params = None
    if any(k.startswith("best.") for k in extras):
        tensors = {
            n: T.Tensor(extras[f"best.{n}"].copy(), requires_grad=True, name=n)
            for n in params.names()
        }
        best_params = model.ParameterSet(params.config, tensors)
    return params, state, best_params, header


# ---------------------------------------------------------------------------
# Metrics sink
# ---------------------------------------------------------------------------


class ListSink:
    """In-memory sink for tests."""

    def __init__(self):
        self.records = []

    def emit(self, **fields):
        _check_sink_fields(fields)
        self.records.append(fields)

    def close(self):
        pass


def _check_sink_fields(fields):
    if set(fields) != set(SINK_FIELDS):
        missing = set(SINK_FIELDS) - set(fields)
        extra = set(fields) - set(SINK_FIELDS)
        raise ContractError(
            f"bad metrics record: missing {sorted(missing)}, extra {sorted(extra)}"
        )


class MetricsSink:
    """Append-only JSONL metrics writer.

    Records flow through a bounded queue to a writer thread; when the queue
    is full, emit() blocks rather than dropping, so history stays complete.
    """

    _CLOSE = object()

    def __init__(self, path, maxsize=1024):
        self._fh = open(path, "a", encoding="utf-8", newline="\n")
        self._q = queue.Queue(maxsize=maxsize)
        self._err = None
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()

    def _drain(self):
        while True:
            rec = self._q.get()
            if rec is self._CLOSE:
                break
            try:
                self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            except Exception as exc:  # surfaced on close
                self._err = exc

    def emit(self, **fields):
        _check_sink_fields(fields)
        self._q.put(fields)  # blocks when full; drops are forbidden

    def close(self):
        self._q.put(self._CLOSE)
        self._thread.join()
        self._fh.flush()
        self._fh.close()
        if self._err is not None:
            raise self._err

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
