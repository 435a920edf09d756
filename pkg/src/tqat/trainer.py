"""Training controller for full 16-bit, full 1.58-bit and 16-to-1.58-bit continual pre-training.

Step numbering: optimizer steps are counted ``t = 1..N``. Step ``t`` consumes
batch ``t - 1``, uses learning rate ``lr_at(t - 1)`` and quantization strength
``lambda_schedule(t)``. Steps ``t <= s`` run in full precision, ``s < t <= t_star``
soft-quantized, and ``t > t_star`` fully quantized. With ``t_star = 0`` the
whole run is quantized, identical to the full 1.58-bit regime.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, stable_hash
from .errors import CompatibilityError, ContractError
from .nn import FULL_PRECISION, QUANTIZED, SOFT
from .optim import clip_grad_norm
from .quant import ScheduleConfig, lambda_schedule

log = logging.getLogger(__name__)

REGIMES = ("full16", "full158", "cpt")


@dataclass(frozen=True)
class RunPlan:
    total_steps: int
    regime: str = "full16"
    s: int = 0
    t_star: int = 0
    retain_optimizer: bool = False
    phase_in: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.regime == "cpt":
            if not 0 <= self.s <= self.t_star < self.total_steps:
                raise ValueError(
                    f"cpt needs 0 <= s <= t_star < total_steps, got s={self.s}, "
                    f"t_star={self.t_star}, total_steps={self.total_steps}"
                )
            if self.phase_in != (self.s < self.t_star):
                raise ValueError("phase_in must be true exactly when s < t_star")

    @classmethod
    def cpt(cls, total_steps, t_star, phase_in_steps=0, retain_optimizer=False, seed=0):
        s = max(0, t_star - phase_in_steps)
        return cls(total_steps, "cpt", s, t_star, retain_optimizer, s < t_star, seed)

    def to_dict(self):
        return asdict(self)

    @property
    def hash(self) -> str:
        return stable_hash(self.to_dict())

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.s, self.t_star)

    def lam_at(self, t: int) -> float:
        if self.regime == "full16":
            return 0.0
        if self.regime == "full158":
            return 1.0
        return lambda_schedule(t, self.schedule())

    def mode_at(self, t: int) -> str:
        if self.regime == "full16":
            return FULL_PRECISION
        if self.regime == "full158":
            return QUANTIZED
        if t <= self.s:
            return FULL_PRECISION
        if t <= self.t_star:
            return SOFT
        return QUANTIZED


@dataclass
class MetricsRecord:
    step: int
    loss: float
    lr: float
    lam: float
    phase: str
    tokens: int
    smoothed_loss: float = float("nan")

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "loss": self.loss, "lr": self.lr, "lambda": self.lam,
             "phase": self.phase, "tokens": self.tokens}
        )

    @classmethod
    def from_json(cls, line: str):
        d = json.loads(line)
        return cls(d["step"], d["loss"], d["lr"], d["lambda"], d["phase"], d["tokens"])


def smooth(losses, window: int = 64) -> list:
    """Exponential moving average with alpha = 2 / (window + 1), seeded by the first value."""
    if window < 1:
        raise ValueError("window must be >= 1")
    alpha = 2.0 / (window + 1)
    out = []
    y = None
    for x in losses:
        y = float(x) if y is None else alpha * float(x) + (1.0 - alpha) * y
        out.append(y)
    return out


def read_metrics(path) -> list:
    recs = []
    with open(path) as f:
        for line in f:
            if line.strip():
                recs.append(MetricsRecord.from_json(line))
    for r, s in zip(recs, smooth([r.loss for r in recs])):
        r.smoothed_loss = s
    return recs


def transition(model, optimizer, retain: bool, state: dict | None = None):
    """Switch ``model`` to quantized mode; reset ``optimizer`` unless ``retain``.

    ``state`` (a dict with a ``transitioned`` flag) guards against a second call.
    """
    if state is not None:
        if state.get("transitioned"):
            raise ContractError("transition already happened in this run")
        state["transitioned"] = True
    model.set_mode(QUANTIZED)
    if not retain:
        optimizer.reset()


class Trainer:
    def __init__(self, model, optimizer, stream, plan: RunPlan, grad_clip: float = 1.0,
                 metrics_path=None, ckpt_dir=None, ckpt_every: int = 0,
                 evaluator=None, eval_every: int = 0, eval_path=None, extra_meta=None):
        self.model = model
        self.optimizer = optimizer
        self.stream = stream
        self.plan = plan
        self.grad_clip = grad_clip
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        self.ckpt_every = ckpt_every
        self.evaluator = evaluator
        self.eval_every = eval_every
        self.eval_path = Path(eval_path) if eval_path else None
        self.extra_meta = dict(extra_meta or {})
        self.step = 0
        self.flags = {"transitioned": False}
        self.rng = np.random.default_rng(plan.seed)
        self.records = []
        self.retain_possible = True
        self._metrics_fh = None
        self._sync_mode()

    # -- state -----------------------------------------------------------------

    def _sync_mode(self):
        t = self.step + 1
        mode = self.plan.mode_at(t)
        if mode == SOFT:
            self.model.set_mode(SOFT, self.plan.lam_at(t))
        else:
            self.model.set_mode(mode)

    def checkpoint(self) -> Checkpoint:
        meta = {
            "regime": self.plan.regime,
            "phase": self.model.mode,
            "plan": self.plan.to_dict(),
            "plan_hash": self.plan.hash,
            "transitioned": self.flags["transitioned"],
            "stream": {"seq_len": self.stream.seq_len, "batch_size": self.stream.batch_size,
                       "seed": self.stream.seed, "cursor": self.stream.cursor},
            **self.extra_meta,
        }
        return Checkpoint(
            config=self.model.config,
            tensors=self.model.state_dict(),
            step=self.step,
            optimizer=self.optimizer.state if self.optimizer is not None else None,
            rng_state=self.rng.bit_generator.state,
            meta=meta,
        )

    def restore(self, ck: Checkpoint):
        """Adopt a checkpoint written by a run with the same plan."""
        if ck.config != self.model.config:
            raise CompatibilityError("checkpoint model config does not match the model")
        if ck.meta.get("plan_hash") not in (None, self.plan.hash):
            raise CompatibilityError("checkpoint was written under a different run plan")
        self.model.load_state_dict(ck.tensors)
        if ck.optimizer is not None:
            self.optimizer.load_bytes(_state_bytes(ck.optimizer))
        else:
            self.optimizer.reset()
            self.retain_possible = False
        self.step = ck.step
        self.flags["transitioned"] = bool(ck.meta.get("transitioned", False))
        if ck.rng_state:
            self.rng.bit_generator.state = ck.rng_state
        self.stream.cursor = ck.meta.get("stream", {}).get("cursor", ck.step)
        self._sync_mode()
        if self.metrics_path and self.metrics_path.exists():
            _truncate_metrics(self.metrics_path, ck.step)

    def save(self, path=None):
        path = path or (self.ckpt_dir / f"step{self.step:07d}.ckpt")
        self._flush()
        save_checkpoint(path, self.checkpoint())
        return path

    # -- loop ------------------------------------------------------------------

    def _flush(self):
        if self._metrics_fh is not None:
            self._metrics_fh.flush()

    def train_step(self) -> MetricsRecord:
        plan = self.plan
        t = self.step + 1
        if t > plan.total_steps:
            raise ContractError("run already finished")
        if plan.regime == "cpt" and t == plan.t_star + 1:
            transition(self.model, self.optimizer, plan.retain_optimizer, self.flags)
        mode, lam = plan.mode_at(t), plan.lam_at(t)
        if mode == SOFT:
            self.model.set_mode(SOFT, lam)
        else:
            self.model.set_mode(mode)

        x, y = self.stream.next_batch(t - 1)
        params = self.model.parameters()
        self.model.zero_grad()
        loss = self.model.loss(x, y)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            if self.ckpt_dir is not None:
                self.save(self.ckpt_dir / "diagnostic.ckpt")
            raise FloatingPointError(f"non-finite loss {loss_val} at step {t}")
        loss.backward()
        clip_grad_norm(params, self.grad_clip)
        lr = self.optimizer.step(t - 1)
        self.step = t
        rec = MetricsRecord(t, loss_val, lr, lam, mode, t * x.size)
        self.records.append(rec)
        if self._metrics_fh is not None:
            self._metrics_fh.write(rec.to_json() + "\n")
        if self.ckpt_dir is not None and self.ckpt_every and t % self.ckpt_every == 0:
            self.save()
        if self.evaluator is not None and self.eval_every and (t % self.eval_every == 0 or t == plan.total_steps):
            self._evaluate(t)
        return rec

    def _evaluate(self, t):
        rows = self.evaluator(self.model, t)
        if self.eval_path is not None:
            with open(self.eval_path, "a") as f:
                for row in rows:
                    f.write(json.dumps({"step": t, **row}) + "\n")

    def run(self, until: int | None = None):
        """Train to ``until`` (default: the plan's total). Returns (records, final checkpoint)."""
        until = self.plan.total_steps if until is None else min(until, self.plan.total_steps)
        if self.metrics_path is not None:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            self._metrics_fh = open(self.metrics_path, "a")
        try:
            while self.step < until:
                self.train_step()
            final = self.checkpoint()
            if self.ckpt_dir is not None:
                self.save(self.ckpt_dir / "final.ckpt" if self.step == self.plan.total_steps else None)
        finally:
            if self._metrics_fh is not None:
                self._metrics_fh.close()
                self._metrics_fh = None
        for r, s in zip(self.records, smooth([r.loss for r in self.records])):
            r.smoothed_loss = s
        return self.records, final


def _state_bytes(state):
    from .optim import serialize_state

    return serialize_state(state)


def _truncate_metrics(path: Path, step: int):
    keep = []
    with open(path) as f:
        for line in f:
            if line.strip() and json.loads(line)["step"] <= step:
                keep.append(line)
    with open(path, "w") as f:
        f.writelines(keep)


def run(plan: RunPlan, data, model, optimizer, **kw):
    """Functional entry point: build a :class:`Trainer` and run it to completion."""
    return Trainer(model, optimizer, data, plan, **kw).run()


def resume(path, model, optimizer, stream, plan: RunPlan | None = None, **kw) -> Trainer:
    ck = load_checkpoint(path, expected_config=model.config)
    plan = plan or RunPlan(**ck.meta["plan"])
    trainer = Trainer(model, optimizer, stream, plan, **kw)
    trainer.restore(ck)
    return trainer
