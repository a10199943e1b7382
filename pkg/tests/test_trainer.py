import json
import math

import numpy as np
import pytest

from taskmoe import trainer
from taskmoe.checkpoint import load_checkpoint, save_checkpoint
from taskmoe.config import DitConfig, MoeConfig, TrainConfig
from taskmoe.errors import DivergenceError
from taskmoe.optim import Adam


def tiny_config(**kw) -> TrainConfig:
    dit = DitConfig(d_in=4, d_model=8, n_heads=2, n_blocks=2, n_tgt=8, n_src=8, grid_width=4, time_dim=8,
                    mlp_ratio=2, moe=MoeConfig(n_experts=4, top_k=2, rank=2, emb_width=4, n_tasks=6))
    base = dict(dit=dit, steps=6, batch_size=6, n_data_tasks=3, warmup_steps=5, val_per_task=4, lr=1e-2)
    base.update(kw)
    return TrainConfig(**base).validate()


def snapshot(d):
    return {k: v.copy() for k, v in d.items()}


def test_lr_zero_leaves_parameters_unchanged():
    cfg = tiny_config(lr=0.0)
    model = trainer.init_model(cfg)
    before = snapshot(model.state())
    sampler = trainer.SamplerState(cfg.n_data_tasks)
    rec = trainer.train_step(model, trainer.step_batch(cfg, sampler, 1), cfg, Adam(), 1)
    assert set(rec) == {"step", "l_diff", "l_task", "total", "grad_norm", "sep_ratio", "expert_util"}
    assert rec["grad_norm"] > 0 and math.isfinite(rec["total"])
    for k, v in model.state().items():
        assert np.array_equal(v, before[k])


def test_trainable_set_discipline():
    cfg = tiny_config()
    model = trainer.init_model(cfg)
    before = snapshot(model.state())
    opt = Adam()
    sampler = trainer.SamplerState(cfg.n_data_tasks)
    for step in range(1, 4):
        trainer.train_step(model, trainer.step_batch(cfg, sampler, step), cfg, opt, step)
    changed = {k for k, v in model.state().items() if not np.array_equal(v, before[k])}
    expected = {k for k in model.trainable()}
    assert changed == expected
    kinds = {k.split(".", 2)[-1] if k.startswith("adapters.") else k for k in changed}
    assert kinds == {"gate.weight", "gate.bias", "task_table"} | {
        f"{p}.{part}.{w}" for p in "qkv" for part in ("experts", "shared") for w in ("down", "up")}


def test_task_weight_zero_reports_diffusion_path():
    cfg = tiny_config(task_weight=0.0)
    model = trainer.init_model(cfg)
    rec = trainer.train_step(model, trainer.step_batch(cfg, trainer.SamplerState(3), 1), cfg, Adam(), 1)
    assert rec["total"] == pytest.approx(cfg.lam * rec["l_diff"], rel=1e-15)
    assert rec["l_task"] > 0


def test_divergence_error_carries_step():
    cfg = tiny_config()
    model = trainer.init_model(cfg)
    model.adapters[0].gate.weight[0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        trainer.train_step(model, trainer.step_batch(cfg, trainer.SamplerState(3), 1), cfg, Adam(), 17)
    assert info.value.step == 17


def test_backbone_frozen_through_training(tmp_path):
    cfg = tiny_config(steps=8)
    init = trainer.init_model(cfg)
    res = trainer.train_loop(cfg, out_dir=tmp_path)
    for k, v in init.backbone_params().items():
        assert np.array_equal(res.model.backbone_params()[k], v)
    assert (tmp_path / "checkpoints" / "step_8.x2el").exists()


def test_steps_zero_checkpoint_is_initialisation(tmp_path):
    cfg = tiny_config(steps=0)
    res = trainer.train_loop(cfg, out_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "checkpoints" / "step_0.x2el")
    init = trainer.init_model(cfg)
    for k, v in init.state().items():
        assert np.array_equal(ck.tensors[k], v)
    assert res.metrics == [] and (tmp_path / "metrics.jsonl").read_text() == ""


def test_identical_runs_give_identical_logs(tmp_path):
    cfg = tiny_config(steps=5)
    trainer.train_loop(cfg, out_dir=tmp_path / "a")
    trainer.train_loop(cfg, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert [json.loads(x)["step"] for x in a.decode().splitlines()] == [1, 2, 3, 4, 5]
    assert (tmp_path / "a" / "checkpoints" / "step_5.x2el").read_bytes() == \
        (tmp_path / "b" / "checkpoints" / "step_5.x2el").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_config(steps=8, checkpoint_every=3)
    full = trainer.train_loop(cfg, out_dir=tmp_path / "full")
    ck = tmp_path / "full" / "checkpoints" / "step_3.x2el"
    part = tmp_path / "part"
    part.mkdir()
    (part / "metrics.jsonl").write_text(
        "".join(ln + "\n" for ln in (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()[:3]))
    resumed = trainer.train_loop(cfg, out_dir=part, resume=ck)
    assert [m["step"] for m in resumed.metrics] == [4, 5, 6, 7, 8]
    assert (part / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()
    for k, v in full.model.state().items():
        assert np.array_equal(resumed.model.state()[k], v)
    assert (part / "checkpoints" / "step_8.x2el").read_bytes() == \
        (tmp_path / "full" / "checkpoints" / "step_8.x2el").read_bytes()


def test_checkpoint_save_load_save(tmp_path):
    cfg = tiny_config(steps=3)
    trainer.train_loop(cfg, out_dir=tmp_path)
    path = tmp_path / "checkpoints" / "step_3.x2el"
    ck = load_checkpoint(path)
    _, model, opt, sampler = trainer.restore(ck)
    again = save_checkpoint(tmp_path / "again.x2el", trainer.checkpoint_tensors(model, opt),
                            trainer.checkpoint_meta(cfg, ck.step, opt, sampler))
    assert again.read_bytes() == path.read_bytes()


def test_sharded_training_matches_single_worker():
    cfg1 = tiny_config(steps=100, batch_size=8, workers=1)
    cfg2 = tiny_config(steps=100, batch_size=8, workers=2)
    a = trainer.train_loop(cfg1).metrics
    b = trainer.train_loop(cfg2).metrics
    worst = max(abs(x[k] - y[k]) for x, y in zip(a, b) for k in ("total", "l_task", "l_diff"))
    assert len(a) == len(b) == 100
    assert worst <= 1e-9


def test_evaluation_fields():
    cfg = tiny_config()
    model = trainer.init_model(cfg)
    ev = trainer.evaluate(model, trainer.validation_set(cfg), chunk=5)
    assert ev.l_diff > 0 and 0 < ev.sep_ratio
    counts = ev.routing.counts
    # every token routes to exactly K experts in every layer
    assert np.all(counts.sum(axis=(1, 2)) == 12 * 16 * 2)
    assert set(ev.to_dict()) == {"l_diff", "sep_ratio", "routing"}
