"""``tqat`` command line: train, continue, eval, pack, bench, plot.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

log = logging.getLogger("tqat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every knob of a training run. Config-file keys use these names; flags override them."""

    # model
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    seq_len: int = 64
    ffn_multiplier: int = 4
    # plan
    regime: str = "full16"
    steps: int = 2500
    transition_step: int | None = None
    phase_in_start: int | None = None
    retain_optimizer: bool = False
    seed: int = 0
    # optimizer
    batch_size: int = 8
    lr_peak: float = 2e-3
    lr_min: float = 2e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    # io
    data: str = "builtin:pydoc"
    out: str = "runs/default"
    ckpt_every: int = 0
    eval_every_frac: float = 0.05
    eval_tasks_per_family: int = 20

    def hash(self) -> str:
        from .checkpoint import stable_hash

        # the output location does not change the experiment
        return stable_hash({k: v for k, v in asdict(self).items() if k != "out"})


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(s) -> bool:
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected true or false, got {s!r}")


def _coerce(name: str, raw):
    default = getattr(RunConfig, name)
    if name in ("transition_step", "phase_in_start"):
        return None if str(raw).strip().lower() in ("", "none") else int(raw)
    if isinstance(default, bool):
        return _parse_bool(raw)
    return type(default)(raw)


def load_run_config(path) -> dict:
    """Read a flat ``key = value`` file (an optional ``[run]`` header is allowed)."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key not in _FIELDS:
                raise UsageError(f"unknown config key {key!r} in {path}")
            try:
                out[key] = _coerce(key, raw)
            except ValueError as e:
                raise UsageError(f"bad value for {key!r} in {path}: {e}") from None
    return out


# ---------------------------------------------------------------- builders


def _model_config(rc: RunConfig):
    from .nn import ModelConfig

    return ModelConfig(d_model=rc.d_model, n_layers=rc.n_layers, n_heads=rc.n_heads,
                       max_seq_len=rc.seq_len, ffn_multiplier=rc.ffn_multiplier)


def _plan(rc: RunConfig):
    from .trainer import RunPlan

    if rc.regime != "cpt":
        return RunPlan(rc.steps, rc.regime, seed=rc.seed)
    s = rc.transition_step if rc.phase_in_start is None else rc.phase_in_start
    return RunPlan(rc.steps, "cpt", s, rc.transition_step, rc.retain_optimizer, s < rc.transition_step, rc.seed)


def _validate(rc: RunConfig):
    if rc.regime not in ("full16", "full158", "cpt"):
        raise UsageError(f"--regime must be full16, full158 or cpt, got {rc.regime!r}")
    if rc.regime == "cpt":
        if rc.transition_step is None:
            raise UsageError("--regime cpt requires --transition-step")
        if not 0 <= rc.transition_step < rc.steps:
            raise UsageError(f"--transition-step must be in [0, {rc.steps})")
        if rc.phase_in_start is not None and not 0 <= rc.phase_in_start <= rc.transition_step:
            raise UsageError("--phase-in-start must be in [0, --transition-step]")
    else:
        if rc.transition_step is not None:
            raise UsageError("--transition-step is only valid with --regime cpt")
        if rc.phase_in_start is not None:
            raise UsageError("--phase-in-start is only valid with --regime cpt")
        if rc.retain_optimizer:
            raise UsageError("--retain-optimizer is only valid with --regime cpt")
    if rc.steps < 1 or rc.batch_size < 1 or rc.seq_len < 1:
        raise UsageError("--steps, batch_size and seq_len must be positive")
    if rc.d_model % rc.n_heads:
        raise UsageError("d_model must be divisible by n_heads")


def _evaluator(rc: RunConfig, corpus):
    from .data import BatchStream
    from .evaluate import accuracy, make_synthetic_suite, perplexity

    suite = make_synthetic_suite(rc.seed, rc.eval_tasks_per_family)
    heldout = BatchStream(corpus, rc.seq_len, rc.batch_size, seed=rc.seed, split="heldout")

    def evaluate(model, t):
        rows = [{"suite": f"synthetic/{k}", "accuracy": v} for k, v in accuracy(model, suite).items()]
        rows.append({"suite": "heldout", "perplexity": perplexity(model, heldout, 2)})
        return rows

    return evaluate


def _build_trainer(rc: RunConfig, out: Path, resume_from=None):
    from .data import BatchStream, load_corpus
    from .nn import TransformerModel
    from .optim import AdamW, AdamWConfig
    from .trainer import Trainer

    corpus = load_corpus(rc.data)
    model = TransformerModel(_model_config(rc), seed=rc.seed)
    opt = AdamW(model.named_parameters(), AdamWConfig.for_run(
        rc.steps, rc.warmup_frac, lr_peak=rc.lr_peak, lr_min=rc.lr_min, weight_decay=rc.weight_decay,
        beta1=rc.beta1, beta2=rc.beta2))
    stream = BatchStream(corpus, rc.seq_len, rc.batch_size, seed=rc.seed)
    eval_every = int(round(rc.eval_every_frac * rc.steps)) if rc.eval_every_frac > 0 else 0
    trainer = Trainer(
        model, opt, stream, _plan(rc), grad_clip=rc.grad_clip,
        metrics_path=out / "metrics.jsonl", ckpt_dir=out / "checkpoints", ckpt_every=rc.ckpt_every,
        evaluator=_evaluator(rc, corpus) if eval_every else None, eval_every=eval_every,
        eval_path=out / "eval.jsonl",
        extra_meta={"run_config": asdict(rc), "config_hash": rc.hash()},
    )
    if resume_from is not None:
        from .checkpoint import load_checkpoint

        trainer.restore(load_checkpoint(resume_from, expected_config=model.config))
        if trainer.eval_path.exists():
            _truncate_jsonl(trainer.eval_path, trainer.step)
    return trainer


def _truncate_jsonl(path: Path, step: int):
    rows = [line for line in path.read_text().splitlines(keepends=True)
            if line.strip() and json.loads(line)["step"] <= step]
    path.write_text("".join(rows))


def _finish_training(trainer, out: Path):
    from .trainer import read_metrics

    trainer.run()
    recs = read_metrics(out / "metrics.jsonl")
    summary = {"out": str(out), "step": trainer.step, "phase": trainer.model.mode,
               "final_loss": recs[-1].loss if recs else None,
               "final_smoothed_loss": recs[-1].smoothed_loss if recs else None}
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    if args.resume:
        extra = [n for n in _FIELDS if n != "out" and getattr(args, n, None) is not None]
        return _resume(args.resume, args.out, extra + (["config"] if args.config else []))
    rc_kw = load_run_config(args.config) if args.config else {}
    for name in _FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            rc_kw[name] = val
    rc = RunConfig(**rc_kw)
    _validate(rc)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("metrics.jsonl", "eval.jsonl"):
        (out / name).unlink(missing_ok=True)
    (out / "config.json").write_text(json.dumps({**asdict(rc), "config_hash": rc.hash()}, indent=2) + "\n")
    return _finish_training(_build_trainer(rc, out), out)


def _resume(ckpt, out, extra_flags) -> int:
    from .checkpoint import load_checkpoint

    if extra_flags:
        flags = ", ".join("--" + f.replace("_", "-") for f in extra_flags)
        raise UsageError(f"{flags} cannot be combined with --resume; the run config comes from the checkpoint")
    saved = load_checkpoint(ckpt).meta.get("run_config")
    if saved is None:
        raise UsageError(f"{ckpt} carries no run config; cannot resume from it")
    rc = RunConfig(**saved)
    old_out = Path(rc.out)
    if out is not None:
        rc.out = out
    new_out = Path(rc.out)
    new_out.mkdir(parents=True, exist_ok=True)
    if new_out.resolve() != old_out.resolve():
        # carry the history over; restore() trims it back to the checkpoint step
        for name in ("metrics.jsonl", "eval.jsonl"):
            if (old_out / name).exists():
                shutil.copyfile(old_out / name, new_out / name)
        rc = RunConfig(**{**saved, "out": rc.out})
    return _finish_training(_build_trainer(rc, new_out, ckpt), new_out)


def cmd_continue(args) -> int:
    return _resume(args.checkpoint, args.out, [])


def _load_any(path):
    """Packed model or (model, checkpoint) from a checkpoint, detected by magic."""
    from .checkpoint import load_checkpoint
    from .infer.packed import MAGIC as PACKED_MAGIC, load_packed
    from .nn import FULL_PRECISION, QUANTIZED, SOFT, TransformerModel
    from .trainer import RunPlan

    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == PACKED_MAGIC:
        return load_packed(path), None
    ck = load_checkpoint(path)
    model = TransformerModel(ck.config, seed=0)
    model.load_state_dict(ck.tensors)
    phase = ck.phase or FULL_PRECISION
    if phase == SOFT:
        model.set_mode(SOFT, RunPlan(**ck.meta["plan"]).lam_at(ck.step))
    else:
        model.set_mode(phase if phase in (FULL_PRECISION, QUANTIZED) else FULL_PRECISION)
    return model, ck


def cmd_eval(args) -> int:
    from .data import BatchStream, load_corpus
    from .evaluate import accuracy, make_synthetic_suite, perplexity

    model, ck = _load_any(args.model)
    data = args.data or ((ck.meta.get("run_config") or {}).get("data") if ck else None) or "builtin:pydoc"
    cfg = model.config
    stream = BatchStream(load_corpus(data), cfg.max_seq_len, args.batch_size, seed=args.seed, split="heldout")
    suite = make_synthetic_suite(args.suite_seed, args.tasks_per_family)
    report = {
        "model": str(args.model),
        "kind": "packed" if ck is None else "checkpoint",
        "step": ck.step if ck else None,
        "heldout_perplexity": perplexity(model, stream, args.n_batches),
        "accuracy": accuracy(model, suite),
        "n_tasks": len(suite),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_pack(args) -> int:
    from .checkpoint import load_checkpoint
    from .errors import ContractError
    from .infer.packed import export_packed, save_packed

    ck = load_checkpoint(args.checkpoint)
    try:
        packed = export_packed(ck, force=args.force)
    except ContractError as e:
        raise UsageError(f"{e} (use --force)") from None
    save_packed(args.out, packed)
    ratio = packed.linear_bytes() / packed.linear_float_bytes()
    print(json.dumps({"out": str(args.out), "linear_bytes": packed.linear_bytes(),
                      "linear_float_bytes": packed.linear_float_bytes(), "memory_ratio": ratio}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .infer.bench import bench, kernel_bench
    from .infer.packed import load_packed
    from .nn import QUANTIZED

    packed = load_packed(args.packed)
    model, _ = _load_any(args.checkpoint)
    if not hasattr(model, "forward"):
        raise UsageError("second argument must be a training checkpoint, not a packed model")
    model.set_mode(QUANTIZED)
    rep = bench(packed, model, batch_size=args.batch_size, trials=args.trials)
    rows = [
        ("tokens/s packed", f"{rep['tokens_per_s_packed']:.1f}"),
        ("tokens/s float", f"{rep['tokens_per_s_float']:.1f}"),
        ("linear bytes packed", str(rep["bytes_packed"])),
        ("linear bytes f32", str(rep["bytes_float"])),
        ("memory ratio", f"{rep['memory_ratio']:.4f} (1/{1 / rep['memory_ratio']:.1f})"),
        ("kernel backend", rep["backend"]),
    ]
    if args.kernels:
        for r in kernel_bench(trials=args.trials):
            rows.append((f"kernel {r['backend']} MAC/s", f"{r['macs_per_s']:.3e}"))
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plot import plot_metrics

    written = plot_metrics(args.metrics, args.out, window=args.window)
    if not written:
        log.warning("no non-empty metrics files; nothing plotted")
        return EXIT_RUNTIME
    print(json.dumps({k: str(v) for k, v in written.items()}))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tqat", description="Ternary quantization-aware training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model under one regime")
    t.add_argument("--config", help="key = value run config file")
    t.add_argument("--regime", choices=("full16", "full158", "cpt"))
    t.add_argument("--steps", type=int)
    t.add_argument("--transition-step", dest="transition_step", type=int)
    t.add_argument("--phase-in-start", dest="phase_in_start", type=int)
    t.add_argument("--retain-optimizer", dest="retain_optimizer", type=_parse_bool, metavar="{true,false}")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="corpus path or builtin:<sample|pydoc>")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seq-len", dest="seq_len", type=int)
    t.add_argument("--d-model", dest="d_model", type=int)
    t.add_argument("--n-layers", dest="n_layers", type=int)
    t.add_argument("--lr-peak", dest="lr_peak", type=float)
    t.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    t.add_argument("--eval-every-frac", dest="eval_every_frac", type=float)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("continue", help="resume a run from one of its checkpoints")
    c.add_argument("checkpoint")
    c.add_argument("--out", help="output directory (default: the run's own)")
    c.set_defaults(func=cmd_continue)

    e = sub.add_parser("eval", help="held-out perplexity and synthetic zero-shot accuracy")
    e.add_argument("model", help="checkpoint or packed model")
    e.add_argument("--data")
    e.add_argument("--n-batches", dest="n_batches", type=int, default=8)
    e.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--suite-seed", dest="suite_seed", type=int, default=0)
    e.add_argument("--tasks-per-family", dest="tasks_per_family", type=int, default=100)
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("pack", help="quantize a checkpoint once and write the packed model")
    k.add_argument("checkpoint")
    k.add_argument("--out", required=True)
    k.add_argument("--force", action="store_true", help="pack even if the run did not end quantized")
    k.set_defaults(func=cmd_pack)

    b = sub.add_parser("bench", help="packed vs float throughput and memory")
    b.add_argument("packed")
    b.add_argument("checkpoint")
    b.add_argument("--batch-size", dest="batch_size", type=int, default=4)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--kernels", action="store_true", help="also time each kernel backend")
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="overlay smoothed loss curves")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--window", type=int, default=64)
    pl.add_argument("--out", default="losses", help="output prefix; writes <out>.svg and <out>.csv")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    from .errors import CompatibilityError, ContractError, FormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"tqat: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CompatibilityError, ContractError, FloatingPointError, OSError, ValueError) as e:
        print(f"tqat: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
