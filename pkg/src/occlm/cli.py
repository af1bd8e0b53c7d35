"""Command-line entry point wiring the pipeline end to end.

Subcommands: tokenizer, corpus, pretrain, finetune, eval, sweep, generate,
plus quickstart for a self-contained desk-scale demo. Config precedence is
flags > config file > presets; OCCLM_SEED overrides any configured seed but
yields to an explicit --seed. Every training run writes a RunManifest before
the first step and finalizes it on exit, error exits included.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import stat
import sys
import time
from dataclasses import dataclass

from . import __version__, bpe, corpus, demo, metrics, model, sweep, train
from .errors import ConfigError, DataError, OcclmError

PRESETS = {
    # Optimal published configurations for the two objectives; vocab target
    # listed for the tokenizer stage, occlusion_prob 0 means standard causal.
    "table3-std": {
        "model": {"n_layers": 8, "n_heads": 8, "dropout": 0.3},
        "train": {
            "batch_size": 512, "base_lr": 2e-4, "weight_decay": 1e-2,
            "max_epochs": 100, "patience": 5, "occlusion_prob": 0.0,
        },
        "tokenizer": {"target_size": 50225},
    },
    "table3-occ": {
        "model": {"n_layers": 6, "n_heads": 4, "dropout": 0.3},
        "train": {
            "batch_size": 512, "base_lr": 2e-4, "weight_decay": 1e-2,
            "max_epochs": 100, "patience": 5, "occlusion_prob": 0.3,
        },
        "tokenizer": {"target_size": 50225},
    },
}

MODEL_FIELDS = ("block_size", "d_model", "n_layers", "n_heads", "dropout",
                "ffn_mult")
TRAIN_FIELDS = ("batch_size", "max_epochs", "base_lr", "warmup_fraction",
                "weight_decay", "patience", "occlusion_prob", "seed",
                "grad_clip", "unfreeze_top_k", "unfreeze_interval_epochs",
                "occlusion_loss_weight")


def file_sha256(path):
    return metrics.file_sha256(path)


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    run_id: str
    command_line: list
    resolved_config: dict
    vocab_hash: str
    data_hashes: dict
    seed: int
    version: str
    started_at: str
    finished_at: str = ""
    status: str = "running"

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def make_run_id(command, resolved, data_hashes, vocab_hash, deterministic):
    if deterministic:
        # content hashes only, no paths: byte-identical reruns from any cwd
        payload = json.dumps(
            {"cmd": command, "config": resolved,
             "data": sorted(data_hashes.values()), "vocab": vocab_hash},
            sort_keys=True,
        ).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]
    return f"{time.strftime('%Y%m%d-%H%M%S')}-{os.urandom(3).hex()}"


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_manifest(path, manifest):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(manifest.to_json() + "\n")


def finalize_manifest(path, manifest, status):
    manifest.status = status
    manifest.finished_at = _now()
    write_manifest(path, manifest)


# ---------------------------------------------------------------------------
# Config resolution: flags > config file > preset > built-in defaults
# ---------------------------------------------------------------------------


def load_config_source(name):
    if name.startswith("preset:"):
        preset = name[len("preset:"):]
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; available: {sorted(PRESETS)}"
            )
        return PRESETS[preset]
    with open(name, encoding="utf-8") as fh:
        return json.load(fh)


def resolve_configs(args, train_defaults=None, model_defaults=None):
    """Layer defaults, preset, config file, OCCLM_SEED, and flags into one
    (model dict, train dict) pair. Flag values win; None means unset."""
    model_cfg = {
        f.name: f.default
        for f in dataclasses.fields(model.ModelConfig)
        if f.name != "vocab_size"
    }
    for key, val in (model_defaults or {}).items():
        if key in model_cfg:
            model_cfg[key] = val
    train_cfg = {f.name: f.default for f in dataclasses.fields(train.TrainConfig)}
    for key, val in (train_defaults or {}).items():
        train_cfg[key] = val

    layers = []
    preset = getattr(args, "preset", None)
    if preset:
        layers.append(load_config_source(f"preset:{preset}"))
    config = getattr(args, "config", None)
    if config:
        layers.append(load_config_source(config))
    for layer in layers:
        unknown = set(layer) - {"model", "train", "tokenizer"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for key, val in layer.get("model", {}).items():
            if key not in model_cfg:
                raise ConfigError(f"unknown model field {key!r}")
            model_cfg[key] = val
        for key, val in layer.get("train", {}).items():
            if key not in train_cfg:
                raise ConfigError(f"unknown train field {key!r}")
            train_cfg[key] = val

    env_seed = os.environ.get("OCCLM_SEED")
    if env_seed is not None:
        try:
            train_cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"OCCLM_SEED must be an integer, got {env_seed!r}")

    for name in MODEL_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            model_cfg[name] = val
    for name in TRAIN_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            train_cfg[name] = val
    return model_cfg, train_cfg


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"missing required input: --{name.replace('_', '-')}")


def _load_split(data_dir, name):
    path = os.path.join(data_dir, f"{name}.txt")
    if not os.path.exists(path):
        raise DataError(f"missing split file: {path}")
    return list(corpus.read_lines(path)), path


def _build_datasets(args, model_cfg, objective=None, train_cfg=None):
    """Shared pretrain/finetune setup: vocab, packed splits, and hashes."""
    _require(args, "data", "vocab", "out")
    vocab = bpe.load_vocab(args.vocab)
    vocab_hash = bpe.vocab_sha256(args.vocab)
    train_lines, train_path = _load_split(args.data, "train")
    valid_lines, valid_path = _load_split(args.data, "valid")

    if objective == "standard" and train_cfg["occlusion_prob"] not in (0, 0.0):
        if args.occlusion_prob is not None:
            raise ConfigError(
                "--objective standard contradicts --occlusion-prob "
                f"{args.occlusion_prob}"
            )
        train_cfg["occlusion_prob"] = 0.0
    if objective == "occlusion" and train_cfg["occlusion_prob"] in (0, 0.0):
        train_cfg["occlusion_prob"] = 0.3

    mcfg = model.ModelConfig(vocab_size=vocab.size, **model_cfg).check()
    tcfg = train.TrainConfig(**train_cfg).check()
    train_ds = corpus.pack(train_lines, vocab, mcfg.block_size)
    valid_ds = corpus.pack(valid_lines, vocab, mcfg.block_size)
    data_hashes = {
        train_path: file_sha256(train_path),
        valid_path: file_sha256(valid_path),
    }
    return vocab, vocab_hash, mcfg, tcfg, train_ds, valid_ds, data_hashes


def _run_training(args, command, train_defaults=None, model_defaults=None,
                  finetune_from=None):
    model_cfg, train_cfg = resolve_configs(args, train_defaults, model_defaults)
    objective = getattr(args, "objective", None)
    vocab, vocab_hash, mcfg, tcfg, train_ds, valid_ds, data_hashes = (
        _build_datasets(args, model_cfg, objective, train_cfg)
    )

    resolved = {
        "command": command,
        "model": dataclasses.asdict(mcfg),
        "train": dataclasses.asdict(tcfg),
    }
    run_id = make_run_id(command, resolved, data_hashes, vocab_hash,
                         args.deterministic)
    manifest_path = args.out + ".manifest.json"
    manifest = RunManifest(
        run_id=run_id,
        command_line=[command] + list(args.raw_argv),
        resolved_config=resolved,
        vocab_hash=vocab_hash,
        data_hashes=data_hashes,
        seed=tcfg.seed,
        version=__version__,
        started_at=_now(),
    )
    write_manifest(manifest_path, manifest)

    metrics_path = args.metrics or args.out + ".metrics.jsonl"
    _ensure_parent(metrics_path)
    status = "error"
    try:
        if finetune_from is not None:
            params, header, _ = model.load_checkpoint(
                finetune_from, expect_config=mcfg, expect_vocab_hash=vocab_hash
            )
            runner = train.finetune
        else:
            params = model.init(mcfg, seed=tcfg.seed)
            runner = train.fit
        with train.MetricsSink(metrics_path) as sink:
            best, state = runner(
                params, train_ds, valid_ds, tcfg, sink=sink, run_id=run_id
            )
        model.save_checkpoint(
            args.out, best, vocab_hash,
            metadata={
                "run_id": run_id,
                "manifest": os.path.basename(manifest_path),
                "command": command,
                "best_valid_loss": state.best_valid_loss,
                "best_epoch": state.best_epoch,
                "epochs": state.epoch,
                "stop_reason": state.stop_reason,
            },
        )
        status = "ok"
    finally:
        finalize_manifest(manifest_path, manifest, status)
    print(
        f"{command}: {state.epoch} epochs ({state.stop_reason}), "
        f"best valid loss {state.best_valid_loss:.4f} "
        f"(epoch {state.best_epoch}) -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_tokenizer(args):
    _require(args, "data", "out")
    target = args.target_size
    if target is None:
        for name in (args.config, f"preset:{args.preset}" if args.preset else None):
            if name:
                target = load_config_source(name).get("tokenizer", {}).get(
                    "target_size", target
                )
    if target is None:
        target = 512
    lines = list(corpus.read_lines(args.data))
    data_hash = file_sha256(args.data)
    run_id = make_run_id(
        "tokenizer", {"target_size": target}, {args.data: data_hash}, "",
        args.deterministic,
    )
    vocab = bpe.train_bpe(lines, target_size=target)
    _ensure_parent(args.out)
    bpe.save_vocab(vocab, args.out, run_id=run_id)
    print(
        f"tokenizer: {vocab.size} tokens ({len(vocab.merges)} merges) "
        f"-> {args.out}"
    )
    return 0


def cmd_corpus(args):
    _require(args, "data", "out_dir")
    spec = corpus.SplitSpec(
        args.train_frac, args.valid_frac, args.test_frac, seed=args.seed or 0
    ).check()
    lines = list(corpus.read_lines(args.data))
    if not args.no_clean:
        lines = list(corpus.clean(lines))
    train_l, valid_l, test_l = corpus.split(lines, spec)
    named = {"train": train_l, "valid": valid_l, "test": test_l}
    os.makedirs(args.out_dir, exist_ok=True)
    vocab = bpe.load_vocab(args.vocab) if args.vocab else None
    for name, split_lines in named.items():
        path = os.path.join(args.out_dir, f"{name}.txt")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in split_lines:
                fh.write(line + "\n")
    stats = corpus.stats(named, vocab=vocab)
    with open(os.path.join(args.out_dir, "stats.json"), "w",
              encoding="utf-8") as fh:
        fh.write(corpus.stats_to_json(stats) + "\n")
    print(corpus.render_stats_table(stats))
    return 0


def cmd_pretrain(args):
    return _run_training(args, "pretrain")


def cmd_finetune(args):
    _require(args, "checkpoint")
    # architecture comes from the checkpoint; flags may still override it,
    # and an override that disagrees with the stored config is an error
    header = model.read_checkpoint_header(args.checkpoint)
    # published fine-tuning budget: 50 epochs
    return _run_training(
        args, "finetune", train_defaults={"max_epochs": 50},
        model_defaults=header["config"], finetune_from=args.checkpoint,
    )


def cmd_eval(args):
    _require(args, "checkpoint", "vocab", "split")
    vocab = bpe.load_vocab(args.vocab)
    vocab_hash = bpe.vocab_sha256(args.vocab)
    lines = list(corpus.read_lines(args.split))
    params, header, _ = model.load_checkpoint(
        args.checkpoint, expect_vocab_hash=vocab_hash
    )
    ds = corpus.pack(lines, vocab, params.config.block_size)
    split_name = args.split_name or os.path.splitext(
        os.path.basename(args.split)
    )[0]
    gen = metrics.GenerationConfig(
        max_new_tokens=args.max_new_tokens,
        strategy=args.strategy,
        temperature=args.temperature,
        top_k=args.top_k,
        seed=args.gen_seed,
    ).check()
    report = metrics.evaluate(
        args.checkpoint, ds, split=split_name, vocab=vocab,
        vocab_hash=vocab_hash,
        bleu_sentences=lines if args.bleu else None,
        prompt_frac=args.prompt_frac, gen=gen,
    )
    text = report.to_json()
    if args.out:
        _ensure_parent(args.out)
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_sweep(args):
    _require(args, "spec", "data", "out")
    vocab_path = args.vocab or os.path.join(args.data, "vocab.tsv")
    if not os.path.exists(vocab_path):
        raise DataError(f"missing vocabulary: {vocab_path}")
    vocab = bpe.load_vocab(vocab_path)
    vocab_hash = bpe.vocab_sha256(vocab_path)
    with open(args.spec, encoding="utf-8") as fh:
        raw = json.load(fh)
    # spec files omit vocab_size; it always comes from the actual vocabulary
    declared = raw.get("base_model", {}).setdefault("vocab_size", vocab.size)
    if declared != vocab.size:
        raise ConfigError(
            f"spec pins vocab_size {declared} but {vocab_path} has {vocab.size}"
        )
    spec = sweep.spec_from_dict(raw)
    train_lines, train_path = _load_split(args.data, "train")
    valid_lines, valid_path = _load_split(args.data, "valid")
    block = spec.base_model.block_size
    train_ds = corpus.pack(train_lines, vocab, block)
    valid_ds = corpus.pack(valid_lines, vocab, block)
    data_hashes = {p: file_sha256(p) for p in (train_path, valid_path)}

    parallel = 0 if args.deterministic else (args.parallel or 0)
    resolved = {"command": "sweep", "spec": sweep.spec_to_dict(spec),
                "parallel": parallel}
    run_id = make_run_id("sweep", resolved, data_hashes, vocab_hash,
                         args.deterministic)
    os.makedirs(args.out, exist_ok=True)
    manifest_path = os.path.join(args.out, "manifest.json")
    manifest = RunManifest(
        run_id=run_id, command_line=["sweep"] + list(args.raw_argv),
        resolved_config=resolved, vocab_hash=vocab_hash,
        data_hashes=data_hashes, seed=spec.seed, version=__version__,
        started_at=_now(),
    )
    write_manifest(manifest_path, manifest)
    status = "error"
    try:
        best, board = sweep.run_sweep(
            spec, train_ds, valid_ds, args.out, vocab_hash=vocab_hash,
            run_id=run_id, parallel=parallel,
        )
        sweep.write_sweep_report(os.path.join(args.out, "report.json"), board)
        status = "ok"
    finally:
        finalize_manifest(manifest_path, manifest, status)
    print(
        f"sweep: best trial {best.trial_id} "
        f"(valid loss {best.best_valid_loss:.4f}, {best.stop_reason}); "
        f"{len(board)} trials -> {args.out}"
    )
    return 0


def cmd_generate(args):
    _require(args, "checkpoint", "vocab", "prompt")
    vocab = bpe.load_vocab(args.vocab)
    vocab_hash = bpe.vocab_sha256(args.vocab)
    params, _, _ = model.load_checkpoint(
        args.checkpoint, expect_vocab_hash=vocab_hash
    )
    gen = metrics.GenerationConfig(
        max_new_tokens=args.max_new_tokens,
        strategy=args.strategy,
        temperature=args.temperature,
        top_k=args.top_k,
        seed=args.gen_seed,
    ).check()
    prompt_ids = bpe.encode(vocab, args.prompt).ids
    out = metrics.generate(params, params.config, vocab, prompt_ids, gen)
    print(bpe.decode(vocab, out))
    return 0


QUICKSTART_CONFIG = {
    "model": {"block_size": 64, "d_model": 64, "n_layers": 2, "n_heads": 2,
              "dropout": 0.1, "ffn_mult": 4},
    "train": {"batch_size": 32, "max_epochs": 12, "base_lr": 3e-3,
              "warmup_fraction": 0.1, "weight_decay": 1e-2, "patience": 5,
              "seed": 0},
    "tokenizer": {"target_size": 512},
}

COMPARE_SH = """\
#!/bin/sh
# Standard vs occlusion pretraining on the bundled corpus: trains one model
# per (seed, objective) pair and evaluates each on the validation split.
# Override SEEDS / PROBS for a quicker pass, e.g. SEEDS=0 PROBS=0.3 ./compare.sh
set -e
cd "$(dirname "$0")"
SEEDS="${SEEDS:-0 1 2 3 4}"
PROBS="${PROBS:-0.1 0.3 0.5}"

mkdir -p work
occlm tokenizer --data corpus/mono.txt --out work/vocab.tsv \\
    --config config.json --deterministic
occlm corpus --data corpus/mono.txt --out-dir work --seed 0

for seed in $SEEDS; do
  occlm pretrain --data work --vocab work/vocab.tsv --config config.json \\
      --objective standard --seed "$seed" --deterministic \\
      --out "work/std_$seed.ckpt"
  for p in $PROBS; do
    occlm pretrain --data work --vocab work/vocab.tsv --config config.json \\
        --objective occlusion --occlusion-prob "$p" --seed "$seed" \\
        --deterministic --out "work/occ${p}_$seed.ckpt"
  done
done

for ckpt in work/*.ckpt; do
  occlm eval --checkpoint "$ckpt" --vocab work/vocab.tsv \\
      --split work/valid.txt --out "${ckpt%.ckpt}.report.json"
done
echo "reports written to work/*.report.json"
"""


def cmd_quickstart(args):
    _require(args, "out")
    out = args.out
    targets = [
        os.path.join(out, "corpus", "mono.txt"),
        os.path.join(out, "corpus", "news.txt"),
        os.path.join(out, "config.json"),
        os.path.join(out, "compare.sh"),
    ]
    existing = [t for t in targets if os.path.exists(t)]
    if existing and not args.force:
        raise ConfigError(
            f"refusing to overwrite {existing[0]} (use --force)"
        )
    os.makedirs(os.path.join(out, "corpus"), exist_ok=True)
    demo.write_corpus(targets[0], 4800, seed=0, style="mono")
    demo.write_corpus(targets[1], 800, seed=0, style="news")
    with open(targets[2], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(QUICKSTART_CONFIG, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(targets[3], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(COMPARE_SH)
    os.chmod(targets[3], os.stat(targets[3]).st_mode | stat.S_IXUSR
             | stat.S_IXGRP | stat.S_IXOTH)
    print(f"quickstart: corpus, config.json, compare.sh -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="config file path or preset:NAME")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="built-in preset name")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded bit-reproducible mode")
    p.add_argument("--seed", type=int, dest="seed")


def _add_model_flags(p):
    p.add_argument("--block-size", type=int, dest="block_size")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--dropout", type=float, dest="dropout")
    p.add_argument("--ffn-mult", type=int, dest="ffn_mult")


def _add_train_flags(p):
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--base-lr", type=float, dest="base_lr")
    p.add_argument("--warmup-fraction", type=float, dest="warmup_fraction")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--patience", type=int, dest="patience")
    p.add_argument("--occlusion-prob", type=float, dest="occlusion_prob")
    p.add_argument("--grad-clip", type=float, dest="grad_clip")
    p.add_argument("--occlusion-loss-weight", type=float,
                   dest="occlusion_loss_weight")
    p.add_argument("--metrics", help="metrics JSONL path")


def _add_gen_flags(p):
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens",
                   default=32)
    p.add_argument("--strategy", choices=("greedy", "sample", "topk"),
                   default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, dest="top_k", default=0)
    p.add_argument("--gen-seed", type=int, dest="gen_seed", default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="occlm",
        description="Occlusion vs standard causal pretraining toolkit",
    )
    parser.add_argument("--version", action="version",
                        version=f"occlm {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("tokenizer", help="train a byte-level BPE vocabulary")
    p.add_argument("--data", help="raw text file, one sentence per line")
    p.add_argument("--out", help="vocabulary output path")
    p.add_argument("--target-size", type=int, dest="target_size")
    _add_common(p)
    p.set_defaults(func=cmd_tokenizer)

    p = sub.add_parser("corpus", help="clean and split a raw corpus")
    p.add_argument("--data", help="raw text file")
    p.add_argument("--out-dir", dest="out_dir", help="split output directory")
    p.add_argument("--vocab", help="optional vocabulary for token stats")
    p.add_argument("--train-frac", type=float, dest="train_frac", default=0.8)
    p.add_argument("--valid-frac", type=float, dest="valid_frac", default=0.1)
    p.add_argument("--test-frac", type=float, dest="test_frac", default=0.1)
    p.add_argument("--no-clean", action="store_true", dest="no_clean")
    _add_common(p)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("pretrain", help="pretrain from scratch")
    p.add_argument("--data", help="directory holding train.txt and valid.txt")
    p.add_argument("--vocab", help="vocabulary path")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--objective", choices=("standard", "occlusion"),
                   default=None)
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune with gradual unfreezing")
    p.add_argument("--checkpoint", help="pretrained checkpoint path")
    p.add_argument("--data", help="directory holding train.txt and valid.txt")
    p.add_argument("--vocab", help="vocabulary path")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--objective", choices=("standard", "occlusion"),
                   default=None)
    p.add_argument("--unfreeze-top-k", type=int, dest="unfreeze_top_k")
    p.add_argument("--unfreeze-interval-epochs", type=int,
                   dest="unfreeze_interval_epochs")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--vocab", help="vocabulary path")
    p.add_argument("--split", help="text file with evaluation sentences")
    p.add_argument("--split-name", dest="split_name")
    p.add_argument("--bleu", action="store_true",
                   help="run the generation BLEU protocol")
    p.add_argument("--prompt-frac", type=float, dest="prompt_frac",
                   default=0.25)
    p.add_argument("--out", help="report output path (JSON)")
    _add_gen_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="random hyperparameter search")
    p.add_argument("--spec", help="SweepSpec JSON path")
    p.add_argument("--data", help="directory holding train.txt and valid.txt")
    p.add_argument("--vocab", help="vocabulary path (default <data>/vocab.tsv)")
    p.add_argument("--out", help="sweep output directory")
    p.add_argument("--parallel", type=int, default=0,
                   help="worker count for parallel trials")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("generate", help="generate text from a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--vocab", help="vocabulary path")
    p.add_argument("--prompt", help="prompt text")
    _add_gen_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("quickstart", help="materialize the bundled demo")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_quickstart)

    return parser


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    args.raw_argv = list(argv)
    try:
        return args.func(args)
    except OcclmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
