"""The desk-scale reference configuration and a small cached runner for its training grid.

A run is identified by its variant name and seed. Results (the raw loss
series) are stored as JSON keyed by a hash of the full configuration, the
corpus bytes and the training sources, so editing that code invalidates them.

``COPY_PROBE`` is a separate, longer full16 run on a code corpus. The grid's
small budget is not enough for a model to pick up in-context copying; this one
is, which makes it the model the copy-task family is checked against.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .checkpoint import save_checkpoint
from .data import BatchStream, load_corpus
from .nn import ModelConfig, TransformerModel
from .optim import AdamW, AdamWConfig
from .trainer import RunPlan, Trainer, smooth

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferenceConfig:
    total_steps: int = 2500
    batch_size: int = 8
    seq_len: int = 64
    lr_peak: float = 2e-3
    lr_min: float = 2e-4
    warmup_frac: float = 0.05
    phase_in_frac: float = 0.05
    smoothing_window: int = 64
    data: str = "builtin:pydoc"
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d_model=128, n_layers=2, n_heads=4, max_seq_len=64))

    def step_at(self, frac: float) -> int:
        return int(round(frac * self.total_steps))


REFERENCE = ReferenceConfig()
SEEDS = (0, 1, 2)

COPY_PROBE = ReferenceConfig(
    total_steps=8000, batch_size=16, seq_len=128, data="builtin:stdlib",
    model=ModelConfig(d_model=128, n_layers=2, n_heads=4, max_seq_len=128),
)

# name -> (regime, transition fraction, phase-in, retain optimizer)
VARIANTS = {
    "full16": ("full16", 0.0, False, False),
    "full158": ("full158", 0.0, False, False),
    "cpt20": ("cpt", 0.2, False, False),
    "cpt40": ("cpt", 0.4, False, False),
    "cpt60": ("cpt", 0.6, False, False),
    "cpt20_retain": ("cpt", 0.2, False, True),
    "cpt20_phasein": ("cpt", 0.2, True, False),
}


def plan_for(variant: str, seed: int, cfg: ReferenceConfig = REFERENCE) -> RunPlan:
    regime, frac, phase_in, retain = VARIANTS[variant]
    n = cfg.total_steps
    if regime != "cpt":
        return RunPlan(n, regime, seed=seed)
    ramp = cfg.step_at(cfg.phase_in_frac) if phase_in else 0
    return RunPlan.cpt(n, cfg.step_at(frac), phase_in_steps=ramp, retain_optimizer=retain, seed=seed)


# modules on the training path; a change in any of them invalidates cached runs
_TRAINING_SOURCES = ("tensor", "quant", "nn", "optim", "data", "trainer", "checkpoint")


def source_fingerprint() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _TRAINING_SOURCES:
        h.update(name.encode())
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


@functools.lru_cache(maxsize=None)
def corpus_digest(data: str) -> str:
    return hashlib.sha256(load_corpus(data)).hexdigest()[:16]


def _key(plan: RunPlan, cfg: ReferenceConfig) -> str:
    blob = json.dumps({"plan": plan.to_dict(), "cfg": asdict(cfg), "corpus": corpus_digest(cfg.data),
                       "src": source_fingerprint()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def train_reference(plan: RunPlan, cfg: ReferenceConfig = REFERENCE, metrics_path=None):
    """Train one run of the reference config; returns (raw per-step losses, final checkpoint)."""
    corpus = load_corpus(cfg.data)
    model = TransformerModel(cfg.model, seed=plan.seed)
    opt = AdamW(model.named_parameters(),
                AdamWConfig.for_run(cfg.total_steps, cfg.warmup_frac, lr_peak=cfg.lr_peak, lr_min=cfg.lr_min))
    stream = BatchStream(corpus, cfg.seq_len, cfg.batch_size, seed=plan.seed)
    records, final = Trainer(model, opt, stream, plan, metrics_path=metrics_path).run()
    return [r.loss for r in records], final


def run_cached(variant: str, seed: int, cache_dir, cfg: ReferenceConfig = REFERENCE) -> dict:
    """Losses, smoothed losses, plan and final-checkpoint path of one run; trains only on a cache miss."""
    plan = plan_for(variant, seed, cfg)
    cache_dir = Path(cache_dir)
    stem = f"{variant}-s{seed}-{_key(plan, cfg)}"
    path, ckpt = cache_dir / f"{stem}.json", cache_dir / f"{stem}.ckpt"
    if path.exists() and ckpt.exists():
        losses = json.loads(path.read_text())["loss"]
    else:
        log.info("training %s seed %d (%d steps)", variant, seed, cfg.total_steps)
        losses, final = train_reference(plan, cfg)
        cache_dir.mkdir(parents=True, exist_ok=True)
        final.optimizer = None  # weights are enough for evaluation; keeps the cache small
        save_checkpoint(ckpt, final)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"variant": variant, "seed": seed, "plan": plan.to_dict(), "loss": losses}))
        tmp.replace(path)
    return {"loss": losses, "smoothed": smooth(losses, cfg.smoothing_window), "plan": plan.to_dict(),
            "checkpoint": ckpt}


def main(argv=None):
    import argparse

    ap = argparse.ArgumentParser(description="Populate the reference-grid cache.")
    ap.add_argument("--cache", default=".reference_runs")
    ap.add_argument("--variants", nargs="*", default=list(VARIANTS))
    ap.add_argument("--seeds", nargs="*", type=int, default=list(SEEDS))
    ap.add_argument("--no-copy-probe", action="store_true", help="skip the longer copy-probe run")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for seed in args.seeds:
        for v in args.variants:
            r = run_cached(v, seed, args.cache)
            print(f"{v:14s} seed={seed} final_smoothed={r['smoothed'][-1]:.4f}", flush=True)
    if not args.no_copy_probe:
        r = run_cached("full16", 0, args.cache, COPY_PROBE)
        print(f"copy-probe     seed=0 final_smoothed={r['smoothed'][-1]:.4f}", flush=True)


if __name__ == "__main__":
    main()
