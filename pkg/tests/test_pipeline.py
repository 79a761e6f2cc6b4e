import copy
import math

import numpy as np
import pytest
import torch

from labelenc.checkpoint import CheckpointError
from labelenc.config import ConfigError
from labelenc.datasets import collate
from labelenc.detector import build_backbone, build_head
from labelenc.distance import build_adaptation
from labelenc.encoder import build_encoder
from labelenc.nn import is_frozen
from labelenc.pipeline import (
    TrainingDiverged,
    lr_at,
    lr_boundaries,
    step1_length,
    step1_losses,
    step2_aux_stop,
    step2_losses,
    train_baseline,
    train_step1,
    train_step2,
)

from helpers import tiny_config, tiny_dataset


# --- gradient routing -----------------------------------------------------------------


def _stores(cfg):
    return {
        "encoder": build_encoder(cfg.encoder, 1),
        "head": build_head(cfg.detector, 2),
        "backbone": build_backbone(cfg.detector, 3),
        "adapt": build_adaptation(cfg.detector.fpn_channels, 3, 4),
    }


def _batch(cfg):
    ds = tiny_dataset(4)
    return collate(ds.samples, *ds.channel_stats(), 2, render=True, aug_rng=np.random.default_rng(0))


def _touched(stores, loss):
    for m in stores.values():
        m.zero_grad(set_to_none=True)
    loss.backward()
    out = {}
    for name, m in stores.items():
        grads = [p.grad for p in m.parameters()]
        exact_zero = all(g is None or torch.count_nonzero(g) == 0 for g in grads)
        out[name] = not exact_zero
    return out


STEP1_MATRIX = {
    "L1": {"encoder", "head"},
    "L2": {"backbone", "head"},
    "L3": {"backbone", "adapt"},
}
STEP2_MATRIX = {"det": {"backbone", "head"}, "dis": {"backbone", "adapt"}}


@pytest.mark.parametrize("term", sorted(STEP1_MATRIX))
def test_step1_gradient_routing(term):
    cfg = tiny_config(fpn=64)
    stores = _stores(cfg)
    batch = _batch(cfg)
    losses = step1_losses(stores["encoder"], stores["head"], stores["backbone"], stores["adapt"], batch, cfg.detector)
    touched = _touched(stores, losses[term])
    assert {k for k, v in touched.items() if v} == STEP1_MATRIX[term]


@pytest.mark.parametrize("term", sorted(STEP2_MATRIX))
def test_step2_gradient_routing(term):
    cfg = tiny_config(fpn=64)
    stores = _stores(cfg)
    batch = _batch(cfg)
    losses = step2_losses(stores["backbone"], stores["head"], stores["encoder"], stores["adapt"], batch, cfg.detector, True)
    touched = _touched(stores, losses[term])
    assert {k for k, v in touched.items() if v} == STEP2_MATRIX[term]


def test_reconstruction_only_omits_image_terms():
    cfg = tiny_config()
    stores = _stores(cfg)
    losses = step1_losses(stores["encoder"], stores["head"], None, None, _batch(cfg), cfg.detector, False, False)
    assert set(losses) == {"L1"}


# --- schedule -------------------------------------------------------------------------------


def test_lr_segments_exact():
    b = lr_boundaries(90, (2 / 3, 8 / 9))
    assert b == (60, 80)
    lrs = [lr_at(i, 0.01, b) for i in range(90)]
    assert set(lrs[:60]) == {0.01}
    assert set(lrs[60:80]) == {0.01 / 10}
    assert set(lrs[80:]) == {0.01 / 100}


def test_step1_schedule_offsets_by_warmup():
    cfg = tiny_config(iters=90).train
    warmup, total = step1_length(cfg)
    assert (warmup, total) == (30, 120)
    assert lr_boundaries(cfg.total_iters, cfg.lr_decay_points, offset=warmup) == (90, 110)
    assert step2_aux_stop(cfg) == 80


def test_warmup_fraction_validated():
    cfg = tiny_config()
    cfg.train.step1_warmup_frac = 1.0
    with pytest.raises(ConfigError, match="warmup"):
        cfg.validate()


def test_optimizer_uses_scheduled_rates(monkeypatch):
    seen = []
    orig = torch.optim.SGD.step

    def spy(self, *a, **k):
        seen.append(self.param_groups[0]["lr"])
        return orig(self, *a, **k)

    monkeypatch.setattr(torch.optim.SGD, "step", spy)
    cfg = tiny_config(iters=9)
    train_baseline(tiny_dataset(8), cfg)
    lr = cfg.train.lr
    assert seen == [lr] * 6 + [lr / 10] * 2 + [lr / 100]


# --- Step 1 ------------------------------------------------------------------------------


def test_step1_warmup_total_is_l1_plus_l2():
    cfg = tiny_config(iters=6)
    cfg.train.lam1 = 0.5
    s1 = train_step1(tiny_dataset(8), cfg)
    warmup, total = step1_length(cfg.train)
    assert warmup == 2
    recs = {}
    for it, name, v in s1.history.records:
        recs.setdefault(it, {})[name] = v
    assert sorted(recs) == list(range(total))
    for it in range(total):
        r = recs[it]
        if it < warmup:
            assert "L3" not in r
            assert r["total"] == float(np.float32(r["L1"]) + np.float32(0.5) * np.float32(r["L2"]))
        else:
            assert "L3" in r
            assert r["total"] == pytest.approx(r["L1"] + 0.5 * r["L2"] + r["L3"], rel=1e-6)


def test_step1_discards_auxiliary_by_default():
    cfg = tiny_config(iters=2)
    s1 = train_step1(tiny_dataset(8), cfg)
    assert s1.auxiliary is None
    s1 = train_step1(tiny_dataset(8), cfg, keep_auxiliary=True)
    assert s1.auxiliary is not None and s1.auxiliary.head is not s1.head


def test_step1_reconstruction_only_logs_only_l1():
    cfg = tiny_config(iters=3)
    cfg.train.step1_reconstruction_only = True
    s1 = train_step1(tiny_dataset(8), cfg)
    assert {n for _, n, _ in s1.history.records} == {"L1", "total"}


# --- Step 2 -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def step1_small():
    return train_step1(tiny_dataset(8), tiny_config(iters=3))


def test_head_init_copies_step1_head(step1_small):
    cfg = tiny_config(iters=0)
    det = train_step2(tiny_dataset(8), step1_small, cfg)
    for (k, a), (_, b) in zip(det.head.state_dict().items(), step1_small.head.state_dict().items()):
        assert torch.equal(a, b), k
    assert det.head is not step1_small.head


def test_encoder_bit_identical_after_step2(step1_small):
    before = {k: v.clone() for k, v in step1_small.encoder.state_dict().items()}
    head_before = {k: v.clone() for k, v in step1_small.head.state_dict().items()}
    det = train_step2(tiny_dataset(8), step1_small, tiny_config(iters=4))
    assert is_frozen(step1_small.encoder)
    for k, v in step1_small.encoder.state_dict().items():
        assert torch.equal(v, before[k]), k
    # Training the copied head leaves the Step-1 head untouched.
    for k, v in step1_small.head.state_dict().items():
        assert torch.equal(v, head_before[k]), k
    assert set(vars(det)) == {"backbone", "head", "history"}


def test_aux_loss_dropped_for_final_fraction(step1_small):
    cfg = tiny_config(iters=9)
    det = train_step2(tiny_dataset(8), step1_small, cfg)
    its = sorted({it for it, n, _ in det.history.records if n == "dis"})
    assert its == list(range(step2_aux_stop(cfg.train))) == list(range(8))


def test_step2_rejects_incompatible_step1(step1_small):
    cfg = tiny_config(iters=1, fpn=32)
    with pytest.raises(CheckpointError, match="shape"):
        train_step2(tiny_dataset(8), step1_small, cfg)


def test_both_toggles_off_matches_baseline(step1_small):
    cfg = tiny_config(iters=10)
    base = train_baseline(tiny_dataset(8), cfg)
    c = copy.deepcopy(cfg)
    c.train.step2_use_supervision = c.train.step2_use_head_init = False
    red = train_step2(tiny_dataset(8), step1_small, c)
    assert base.history.records == red.history.records
    for (k, a), (_, b) in zip(base.backbone.state_dict().items(), red.backbone.state_dict().items()):
        assert torch.equal(a, b), k


# --- baseline -------------------------------------------------------------------------------


def test_zero_iterations_returns_initialization():
    cfg = tiny_config(iters=0)
    det = train_baseline(tiny_dataset(4), cfg)
    ref = build_backbone(cfg.detector, cfg.train.param_seed, "backbone")
    for (k, a), (_, b) in zip(det.backbone.state_dict().items(), ref.state_dict().items()):
        assert torch.equal(a, b), k
    assert det.history.records == []


def test_deterministic_loss_logs():
    cfg = tiny_config(iters=5)
    a = train_step1(tiny_dataset(8), cfg).history.records
    b = train_step1(tiny_dataset(8), cfg).history.records
    assert a == b
    cfg2 = cfg.with_seed(1)
    assert train_step1(tiny_dataset(8), cfg2).history.records != a


def test_loss_decreases_on_synthetic_data():
    cfg = tiny_config(iters=200)
    cfg.train.log_every = 10
    hist = train_baseline(tiny_dataset(64), cfg).history.series("total")
    assert np.mean(hist[-3:]) < hist[0]


def test_nan_aborts_with_snapshot(tmp_path):
    ds = tiny_dataset(4)
    ds.samples[0].image[:] = np.nan
    cfg = tiny_config(iters=3)
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train_baseline(ds, cfg, snapshot_dir=tmp_path)
    assert (tmp_path / "diverged_iter0.ckpt").exists()
