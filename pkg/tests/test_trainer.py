import json
import math

import pytest
import torch

from itportrait.backends import parameter_hash
from itportrait.backends.toy import make_toy_backends
from itportrait.config import build_config
from itportrait.errors import ConfigurationError, DivergenceError, IncompatibleCheckpointError
from itportrait.trainer import (TrainConfig, alternate_train, generator_from_state, latest_checkpoint,
                                load_checkpoint, moving_average, pti_invert_edit, save_checkpoint)


def run(cfg, toy_case, backends=None, **kwargs):
    backends = backends or make_toy_backends()
    return alternate_train(cfg, backends, toy_case.style_image, toy_case.w3d, toy_case.pose, **kwargs)


def losses(state):
    return [a["loss"] for a in state.apt_losses], [f["L_IT"] for f in state.fusion]


# -- configuration -----------------------------------------------------------

def test_defaults():
    cfg = TrainConfig()
    assert cfg.epochs == 400 and cfg.lr == 2e-3 and cfg.batch_size == 2
    assert (cfg.apt_steps, cfg.ite_steps) == (1, 1)
    assert cfg.trainable == ("synthesis", "superresolution", "decoder")


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"apt_steps": 0}, {"ite_steps": 1.5}, {"lr": -1.0},
                                    {"trainable": ()}, {"trainable": ("renderer",)}, {"checkpoint_every": -1}])
def test_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_to_dict_roundtrip():
    cfg = TrainConfig(epochs=7, stylize={"beta": 0.05}, fusion={"xi": 30})
    again, backend = build_config({"backend": "toy", **cfg.to_dict()})
    assert again == cfg and backend == "toy"
    json.dumps(cfg.to_dict())


# -- alternating loop --------------------------------------------------------

def test_cadence_counts(toy_case):
    state, _, _ = run(TrainConfig(epochs=10), toy_case)
    assert len(state.apt_losses) == 10 and len(state.fusion) == 10
    assert [f["epoch"] for f in state.fusion] == list(range(10))
    state, _, _ = run(TrainConfig(epochs=4, apt_steps=2, ite_steps=3), toy_case)
    assert len(state.apt_losses) == 8 and len(state.fusion) == 12


def test_isolation_and_frozen_generator(toy_case):
    backends = make_toy_backends()
    h_o = parameter_hash(backends.g3d)
    h_embed = parameter_hash(backends.embedder)
    state, g_s, g_t = run(TrainConfig(epochs=8, verify_isolation=True), toy_case, backends)
    assert parameter_hash(backends.g3d) == h_o
    assert parameter_hash(backends.embedder) == h_embed
    assert parameter_hash(g_s) != h_o and parameter_hash(g_t) != h_o
    for g in (g_s, g_t):
        assert parameter_hash(g.mapping) == parameter_hash(backends.g3d.mapping)


def test_custom_trainable_set_respected(toy_case):
    backends = make_toy_backends()
    state, g_s, g_t = run(TrainConfig(epochs=4, trainable=("decoder",)), toy_case, backends)
    for name in ("synthesis", "mapping", "superresolution"):
        assert parameter_hash(g_s.submodule(name)) == parameter_hash(backends.g3d.submodule(name))
        assert parameter_hash(g_t.submodule(name)) == parameter_hash(backends.g3d.submodule(name))


def test_deterministic_streams(toy_case):
    a, _, _ = run(TrainConfig(epochs=6, seed=3), toy_case)
    b, _, _ = run(TrainConfig(epochs=6, seed=3), toy_case)
    c, _, _ = run(TrainConfig(epochs=6, seed=4), toy_case)
    assert a.fusion == b.fusion and a.apt_losses == b.apt_losses
    assert a.fusion != c.fusion


def test_divergence_names_stage_and_epoch(toy_case):
    bad = torch.full_like(toy_case.style_image, float("nan"))
    with pytest.raises(DivergenceError) as info:
        alternate_train(TrainConfig(epochs=3), make_toy_backends(), bad, toy_case.w3d, toy_case.pose)
    assert info.value.stage == "apt" and info.value.step == 0


def test_callback_sees_every_epoch(toy_case):
    seen = []
    run(TrainConfig(epochs=3), toy_case, callback=lambda e, a, f: seen.append((e, len(a), len(f))))
    assert seen == [(0, 1, 1), (1, 1, 1), (2, 1, 1)]


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, toy_case):
    backends = make_toy_backends()
    state, g_s, g_t = run(TrainConfig(epochs=3), toy_case, backends)
    path = save_checkpoint(state, tmp_path / "ck")
    assert sorted(p.name for p in path.iterdir()) == ["meta.json", "state.pt"]
    back = load_checkpoint(path)
    assert back.epoch == 3 and back.w3d == state.w3d and back.pose == state.pose
    assert back.fusion == state.fusion and back.rng == state.rng
    assert parameter_hash(generator_from_state(backends.g3d, back.g_s)) == parameter_hash(g_s)
    assert parameter_hash(generator_from_state(backends.g3d, back.g_t)) == parameter_hash(g_t)
    assert not list(tmp_path.glob("*.tmp-*"))


def test_checkpoint_corruption_and_version(tmp_path, toy_case):
    state, _, _ = run(TrainConfig(epochs=1), toy_case)
    path = save_checkpoint(state, tmp_path / "ck")
    blob = bytearray((path / "state.pt").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (path / "state.pt").write_bytes(bytes(blob))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path)
    path = save_checkpoint(state, tmp_path / "ck2")
    meta = json.loads((path / "meta.json").read_text())
    meta["format_version"] = 99
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path)
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_resume_matches_uninterrupted(tmp_path, toy_case):
    cfg = TrainConfig(epochs=10, checkpoint_every=5)
    full, _, _ = run(cfg, toy_case, run_dir=tmp_path / "a")
    ck = latest_checkpoint(tmp_path / "a" / "train" / "checkpoints")
    assert ck.name == "epoch_0010"
    mid = load_checkpoint(tmp_path / "a" / "train" / "checkpoints" / "epoch_0005")
    resumed, _, _ = run(cfg, toy_case, state=mid, run_dir=tmp_path / "b")
    apt_a, it_a = losses(full)
    apt_b, it_b = losses(resumed)
    assert len(apt_b) == len(apt_a) == 10
    assert all(abs(x - y) <= 1e-6 for x, y in zip(apt_a[5:], apt_b[5:]))
    assert all(abs(x - y) <= 1e-6 for x, y in zip(it_a[5:], it_b[5:]))


def test_run_dir_streams(tmp_path, toy_case):
    run(TrainConfig(epochs=4, checkpoint_every=2), toy_case, run_dir=tmp_path)
    train = tmp_path / "train"
    assert len((train / "apt_loss.jsonl").read_text().splitlines()) == 4
    records = [json.loads(line) for line in (train / "fusion_state.jsonl").read_text().splitlines()]
    assert len(records) == 4
    assert set(records[0]) == {"epoch", "D", "draw", "gamma", "L_I", "L_T", "L_IT", "skipped", "poses"}
    assert sorted(p.name for p in (train / "checkpoints").iterdir()) == ["epoch_0002", "epoch_0004"]


def test_latest_checkpoint_empty(tmp_path):
    assert latest_checkpoint(tmp_path / "none") is None


def test_moving_average():
    assert moving_average([1, 2, 3, 4], 2) == [1.5, 2.5, 3.5]
    with pytest.raises(ValueError):
        moving_average([1], 2)


# -- pivotal tuning ----------------------------------------------------------

@pytest.fixture(scope="module")
def pivots(toy, toy_case):
    artistic = pti_invert_edit(toy_case.style_image, toy_case.pose, toy)
    in_domain = pti_invert_edit(toy_case.photo, toy_case.pose, toy)
    return artistic, in_domain


def test_pti_zero_steps_is_identity(toy, toy_case):
    from itportrait.inversion import InversionConfig
    res = pti_invert_edit(toy_case.style_image, toy_case.pose, toy, inversion=InversionConfig(steps=5), steps=0)
    assert res.param_delta == 0.0 and res.losses == []
    assert parameter_hash(res.generator) == parameter_hash(toy.g3d)


def test_pti_in_domain_target_barely_moves(pivots):
    artistic, in_domain = pivots
    assert in_domain.param_delta < 0.01 * artistic.param_delta


def test_pti_stage_two_improves_reconstruction(pivots):
    artistic, _ = pivots
    assert artistic.stage2_mse < artistic.stage1_mse
    assert math.isfinite(artistic.losses[-1]) and artistic.losses[-1] < artistic.losses[0]


def test_pti_leaves_source_generator(toy, pivots):
    artistic, _ = pivots
    assert parameter_hash(artistic.generator.mapping) == parameter_hash(toy.g3d.mapping)
