import json
import logging
import zipfile

import pytest
import torch

from labelenc.checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from labelenc.config import config_hash
from labelenc.detector import Backbone, build_backbone, build_head
from labelenc.encoder import build_encoder
from labelenc.pipeline import load_detector, load_step1, save_detector, save_step1, train_step1

from helpers import tiny_config, tiny_dataset


def test_round_trip_bit_exact(tmp_path):
    cfg = tiny_config()
    stores = {"encoder": build_encoder(cfg.encoder, 0), "head": build_head(cfg.detector, 0)}
    extra = {"d": torch.randn(3, 4, dtype=torch.float64), "i": torch.arange(5, dtype=torch.int64)}
    p = save_checkpoint(stores, {"iteration": 7, "config_hash": "abc"}, tmp_path / "x.ckpt")
    arrays, meta = load_checkpoint(p)
    for prefix, m in stores.items():
        for k, v in m.state_dict().items():
            got = arrays[f"{prefix}/{k}"]
            assert got.dtype == v.dtype and got.numpy().tobytes() == v.numpy().tobytes()
    assert meta["iteration"] == 7 and "torch" in meta["versions"]
    p2 = save_checkpoint(extra, {}, tmp_path / "y.ckpt")
    back, _ = load_checkpoint(p2)
    assert all(torch.equal(back[k], v) and back[k].dtype == v.dtype for k, v in extra.items())


def test_archive_layout(tmp_path):
    p = save_checkpoint({"w": torch.ones(2, 3)}, {"note": "x"}, tmp_path / "c.ckpt")
    with zipfile.ZipFile(p) as zf:
        assert set(zf.namelist()) == {"index.json", "metadata.json", "arrays/00000.bin"}
        assert all(i.compress_type == zipfile.ZIP_STORED for i in zf.infolist())
        idx = json.loads(zf.read("index.json"))
        assert idx == [{"name": "w", "dtype": "<f4", "shape": [2, 3], "file": "arrays/00000.bin"}]
        assert zf.read("arrays/00000.bin") == torch.ones(2, 3).numpy().tobytes()


def test_corrupt_file_is_descriptive(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(p)
    good = save_checkpoint({"w": torch.ones(4)}, {}, tmp_path / "g.ckpt")
    with zipfile.ZipFile(good) as zf:
        files = {n: zf.read(n) for n in zf.namelist()}
    files["arrays/00000.bin"] = files["arrays/00000.bin"][:-2]
    with zipfile.ZipFile(tmp_path / "t.ckpt", "w") as zf:
        for n, b in files.items():
            zf.writestr(n, b)
    with pytest.raises(CheckpointError, match="array w"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_mismatched_config_names_first_array(tmp_path):
    cfg = tiny_config()
    p = save_checkpoint({"backbone": build_backbone(cfg.detector, 0)}, {}, tmp_path / "b.ckpt")
    arrays, _ = load_checkpoint(p)
    other = tiny_config()
    other.detector.backbone_widths = (8, 16, 16, 16)
    target = Backbone(other.detector)
    first_bad = next(
        k for k, v in target.state_dict().items() if tuple(v.shape) != tuple(arrays[f"backbone/{k}"].shape)
    )
    with pytest.raises(CheckpointError, match=f"backbone/{first_bad}"):
        load_into({"backbone": target}, arrays)


def test_config_hash_mismatch_warns(tmp_path, caplog):
    cfg = tiny_config(iters=1)
    s1 = train_step1(tiny_dataset(4), cfg)
    p = save_step1(s1, cfg, tmp_path / "s1.ckpt")
    other = tiny_config(iters=2)
    assert config_hash(other) != config_hash(cfg)
    with caplog.at_level(logging.WARNING):
        back = load_step1(p, other)
    assert "config hash" in caplog.text
    for k, v in s1.encoder.state_dict().items():
        assert torch.equal(back.encoder.state_dict()[k], v)


def test_detector_round_trip_and_kind_check(tmp_path):
    from labelenc.pipeline import TrainedDetector, LossHistory

    cfg = tiny_config()
    det = TrainedDetector(build_backbone(cfg.detector, 1), build_head(cfg.detector, 1), LossHistory())
    p = save_detector(det, cfg, tmp_path / "d.ckpt")
    back = load_detector(p, cfg)
    for a, b in ((det.backbone, back.backbone), (det.head, back.head)):
        for k, v in a.state_dict().items():
            assert torch.equal(b.state_dict()[k], v)
    _, meta = load_checkpoint(p)
    assert meta["config_hash"] == config_hash(cfg) and set(meta["seeds"]) == {"param", "data", "augment"}
    with pytest.raises(CheckpointError, match="not a Step-1"):
        load_step1(p, cfg)
