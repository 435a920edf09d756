import json

import numpy as np
import pytest

from tqat.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from tqat.errors import CompatibilityError, ContractError, FormatError
from tqat.nn import FULL_PRECISION, QUANTIZED, SOFT, ModelConfig, TransformerModel
from tqat.optim import AdamW, AdamWConfig
from tqat.quant import ScheduleConfig, lambda_schedule
from tqat.trainer import RunPlan, Trainer, read_metrics, resume, smooth, transition


def _setup(cfg, corpus, seed=0, total=40):
    from tqat.data import BatchStream

    model = TransformerModel(cfg, seed=seed)
    opt = AdamW(model.named_parameters(), AdamWConfig.for_run(total, lr_peak=3e-3, lr_min=3e-4))
    stream = BatchStream(corpus, cfg.max_seq_len, 4, seed=seed)
    return model, opt, stream


def _losses(cfg, corpus, plan, **kw):
    model, opt, stream = _setup(cfg, corpus, plan.seed, plan.total_steps)
    recs, _ = Trainer(model, opt, stream, plan, **kw).run()
    return [r.loss for r in recs], recs, model, opt


# -- smoothing ------------------------------------------------------------------


def test_smooth_examples():
    y = smooth([0.0] + [1.0] * 10, window=64)
    assert y[0] == 0.0
    assert y[1] == pytest.approx(0.030769, abs=1e-6)
    assert y[2] == pytest.approx(0.060592, abs=1e-6)
    assert smooth([2.5] * 20) == [2.5] * 20
    xs = [3.0, 1.0, 4.0, 1.0, 5.0]
    assert smooth(xs, window=1) == xs
    assert smooth([]) == []
    with pytest.raises(ValueError):
        smooth([1.0], window=0)


# -- plans ----------------------------------------------------------------------


def test_run_plan_validation():
    RunPlan(10, "cpt", s=3, t_star=5, phase_in=True)
    with pytest.raises(ValueError):
        RunPlan(10, "cpt", s=6, t_star=5, phase_in=True)
    with pytest.raises(ValueError):
        RunPlan(10, "cpt", s=0, t_star=10)
    with pytest.raises(ValueError):
        RunPlan(10, "cpt", s=3, t_star=5, phase_in=False)
    with pytest.raises(ValueError):
        RunPlan(10, "bogus")
    p = RunPlan.cpt(100, 20, phase_in_steps=5)
    assert (p.s, p.t_star, p.phase_in) == (15, 20, True)
    assert RunPlan.cpt(100, 20).hash != p.hash


def test_regime_modes_and_logged_lambda(tiny_config, sample_corpus):
    for plan, expect in [
        (RunPlan(12, "full16"), lambda t: (FULL_PRECISION, 0.0)),
        (RunPlan(12, "full158"), lambda t: (QUANTIZED, 1.0)),
    ]:
        _, recs, _, _ = _losses(tiny_config, sample_corpus, plan)
        assert [(r.phase, r.lam) for r in recs] == [expect(r.step) for r in recs]
    plan = RunPlan.cpt(20, 10, phase_in_steps=4)
    _, recs, _, _ = _losses(tiny_config, sample_corpus, plan)
    sched = ScheduleConfig(6, 10)
    assert [r.step for r in recs] == list(range(1, 21))
    for r in recs:
        assert r.lam == lambda_schedule(r.step, sched)
        assert r.phase == (FULL_PRECISION if r.step <= 6 else SOFT if r.step <= 10 else QUANTIZED)
    assert recs[-1].tokens == 20 * 4 * tiny_config.max_seq_len


def test_regimes_share_batches(tiny_config, sample_corpus):
    seen = {}
    for regime in ("full16", "full158"):
        model, opt, stream = _setup(tiny_config, sample_corpus)
        batches = []
        orig = stream.next_batch
        stream.next_batch = lambda t, orig=orig: batches.append(orig(t)[0]) or orig(t)
        Trainer(model, opt, stream, RunPlan(8, regime)).run()
        seen[regime] = batches
    assert all(np.array_equal(a, b) for a, b in zip(seen["full16"], seen["full158"]))


# -- degenerate equivalences --------------------------------------------------------


def test_cpt_tstar_zero_equals_full158(tiny_config, sample_corpus):
    a, _, _, _ = _losses(tiny_config, sample_corpus, RunPlan(30, "full158"))
    b, _, _, _ = _losses(tiny_config, sample_corpus, RunPlan.cpt(30, 0))
    assert a == b


def test_cpt_at_last_step_equals_full16_until_final(tiny_config, sample_corpus):
    a, _, _, _ = _losses(tiny_config, sample_corpus, RunPlan(30, "full16"))
    b, _, _, _ = _losses(tiny_config, sample_corpus, RunPlan.cpt(30, 29))
    assert a[:-1] == b[:-1]
    assert a[-1] != b[-1]


# -- transition -----------------------------------------------------------------


def _warm(tiny_config, sample_corpus):
    model, opt, stream = _setup(tiny_config, sample_corpus)
    Trainer(model, opt, stream, RunPlan(5, "full16")).run()
    return model, opt


def test_transition_retain_and_reset(tiny_config, sample_corpus):
    model, opt = _warm(tiny_config, sample_corpus)
    w = model.state_dict()
    m = {k: v.copy() for k, v in opt.state.m.items()}
    transition(model, opt, retain=True)
    assert model.mode == QUANTIZED
    assert all(np.array_equal(m[k], opt.state.m[k]) for k in m)
    assert all(np.array_equal(w[k], v) for k, v in model.state_dict().items())

    model, opt = _warm(tiny_config, sample_corpus)
    transition(model, opt, retain=False)
    assert all(not v.any() for v in opt.state.m.values())
    assert all(not v.any() for v in opt.state.v.values())
    assert opt.state.step_count == 0


def test_double_transition_is_contract_error(tiny_config, sample_corpus):
    model, opt = _warm(tiny_config, sample_corpus)
    flags = {}
    transition(model, opt, False, flags)
    with pytest.raises(ContractError):
        transition(model, opt, False, flags)


def test_trainer_resets_optimizer_at_boundary(tiny_config, sample_corpus):
    model, opt, stream = _setup(tiny_config, sample_corpus)
    tr = Trainer(model, opt, stream, RunPlan.cpt(12, 6))
    tr.run(until=6)
    assert opt.state.step_count == 6
    tr.train_step()
    assert opt.state.step_count == 1 and tr.flags["transitioned"]

    model, opt, stream = _setup(tiny_config, sample_corpus)
    tr = Trainer(model, opt, stream, RunPlan.cpt(12, 6, retain_optimizer=True))
    tr.run(until=7)
    assert opt.state.step_count == 7


def test_nonfinite_loss_writes_diagnostic(tiny_config, sample_corpus, tmp_path):
    model, opt, stream = _setup(tiny_config, sample_corpus)
    model.head.data[:] = np.nan
    tr = Trainer(model, opt, stream, RunPlan(5), ckpt_dir=tmp_path)
    with pytest.raises(FloatingPointError):
        tr.train_step()
    assert (tmp_path / "diagnostic.ckpt").exists()


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tiny_config, sample_corpus, tmp_path):
    model, opt, stream = _setup(tiny_config, sample_corpus)
    tr = Trainer(model, opt, stream, RunPlan.cpt(10, 4))
    tr.run(until=7)
    ck = tr.checkpoint()
    blob = to_bytes(ck)
    back = from_bytes(blob)
    assert to_bytes(back) == blob
    assert back.step == 7 and back.config == tiny_config and back.phase == QUANTIZED
    for k, v in ck.tensors.items():
        assert np.array_equal(v, back.tensors[k]) and v.dtype == back.tensors[k].dtype
    for k in ck.optimizer.m:
        assert np.array_equal(ck.optimizer.m[k], back.optimizer.m[k])
    assert back.rng_state == ck.rng_state
    save_checkpoint(tmp_path / "a.ckpt", ck)
    assert (tmp_path / "a.ckpt").read_bytes() == blob


def test_checkpoint_corruption_and_mismatch(tiny_config, sample_corpus, tmp_path):
    model, opt, stream = _setup(tiny_config, sample_corpus)
    tr = Trainer(model, opt, stream, RunPlan(4))
    tr.run()
    blob = to_bytes(tr.checkpoint())
    for cut in (0, 4, 30, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError):
            from_bytes(blob[:cut])
    with pytest.raises(FormatError):
        from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        from_bytes(blob + b"\0")
    path = tmp_path / "x.ckpt"
    path.write_bytes(blob)
    wrong = ModelConfig(**{**tiny_config.to_dict(), "d_model": 32})
    with pytest.raises(CompatibilityError, match="d_model"):
        load_checkpoint(path, expected_config=wrong)


def test_checkpoint_without_optimizer(tiny_config, sample_corpus, tmp_path):
    model, opt, stream = _setup(tiny_config, sample_corpus)
    tr = Trainer(model, opt, stream, RunPlan.cpt(10, 5, retain_optimizer=True))
    tr.run(until=3)
    ck = tr.checkpoint()
    ck.optimizer = None
    back = from_bytes(to_bytes(ck))
    assert back.optimizer is None and not back.retain_possible
    model2, opt2, stream2 = _setup(tiny_config, sample_corpus)
    tr2 = Trainer(model2, opt2, stream2, tr.plan)
    tr2.restore(back)
    assert not tr2.retain_possible and opt2.state.step_count == 0


def test_resume_is_bit_exact(tiny_config, sample_corpus, tmp_path):
    plan = RunPlan.cpt(24, 10, phase_in_steps=4, seed=3)
    full = tmp_path / "full"
    model, opt, stream = _setup(tiny_config, sample_corpus, seed=3, total=24)
    Trainer(model, opt, stream, plan, metrics_path=full / "metrics.jsonl").run()

    part = tmp_path / "part"
    model, opt, stream = _setup(tiny_config, sample_corpus, seed=3, total=24)
    tr = Trainer(model, opt, stream, plan, metrics_path=part / "metrics.jsonl", ckpt_dir=part, ckpt_every=8)
    tr.run(until=13)
    # steps 9..13 are on disk but after the last checkpoint; resume must drop and redo them
    model, opt, stream = _setup(tiny_config, sample_corpus, seed=3, total=24)
    tr2 = resume(part / "step0000008.ckpt", model, opt, stream, metrics_path=part / "metrics.jsonl")
    assert tr2.step == 8
    tr2.run()
    assert (full / "metrics.jsonl").read_bytes() == (part / "metrics.jsonl").read_bytes()
    assert (full / "metrics.jsonl").read_text().count("\n") == 24


def test_metrics_file_format(tiny_config, sample_corpus, tmp_path):
    path = tmp_path / "m.jsonl"
    _losses(tiny_config, sample_corpus, RunPlan.cpt(10, 5), metrics_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert set(rows[0]) == {"step", "loss", "lr", "lambda", "phase", "tokens"}
    recs = read_metrics(path)
    assert [r.step for r in recs] == list(range(1, 11))
    assert recs[-1].smoothed_loss == pytest.approx(smooth([r["loss"] for r in rows])[-1])


def test_same_seed_same_metrics(tiny_config, sample_corpus, tmp_path):
    for name in ("a", "b"):
        _losses(tiny_config, sample_corpus, RunPlan.cpt(15, 5, seed=7), metrics_path=tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
