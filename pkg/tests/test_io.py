import json
import struct

import numpy as np
import pytest
import torch

from protoreplay.classifier import make_classifier
from protoreplay.conditioning import ClassPrototype, PrototypeStore, ZeroPrototypes
from protoreplay.denoiser import ImageDenoiser, VectorDenoiser
from protoreplay.errors import ContractViolation
from protoreplay.io import (load_checkpoint, load_replay, read_array, save_checkpoint, save_replay,
                            save_sample_grid, write_array)
from protoreplay.sampler import ReplayMemory
from protoreplay.schedule import build_schedule


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64, np.uint8])
def test_array_roundtrip(tmp_path, dtype):
    a = (np.arange(24) * 3 - 5).astype(dtype).reshape(2, 3, 4)
    write_array(tmp_path / "a.bin", a)
    b = read_array(tmp_path / "a.bin")
    assert b.dtype == a.dtype and b.shape == a.shape and np.array_equal(a, b)


def test_array_header_layout(tmp_path):
    write_array(tmp_path / "a.bin", np.zeros((5, 7), dtype=np.float32))
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:4] == b"PRAR" and raw[4] == 1 and raw[5:13] == b"<f4     "
    assert struct.unpack("<I2Q", raw[13:33]) == (2, 5, 7)
    assert len(raw) == 33 + 5 * 7 * 4


def test_array_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"\x93NUMPY....")
    with pytest.raises(ContractViolation):
        read_array(tmp_path / "x.bin")


def test_replay_roundtrip_and_manifest(tmp_path):
    mem = ReplayMemory(torch.randn(6, 2), torch.tensor([1, 1, 1, 4, 4, 4]),
                       {"seed": 9, "task": 3, "w": 4.0})
    save_replay(tmp_path / "r", mem)
    back = load_replay(tmp_path / "r")
    assert torch.equal(back.x, mem.x) and torch.equal(back.y, mem.y)
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert manifest["classes"] == [{"class_id": 1, "count": 3, "seed": 9}, {"class_id": 4, "count": 3, "seed": 9}]
    assert back.provenance == mem.provenance


@pytest.mark.parametrize("image", [False, True])
def test_checkpoint_roundtrip(tmp_path, image):
    torch.manual_seed(0)
    shape = (1, 8, 8) if image else (2,)
    net = ImageDenoiser(1, 4, width=4) if image else VectorDenoiser(2, 4, hidden=8)
    store = PrototypeStore(lr=0.5)
    store.add(ClassPrototype(3, torch.nn.Parameter(torch.randn(shape)), origin_task=1))
    store.freeze_task(1)
    clf = make_classifier(shape, 5, hidden=8)
    s = build_schedule(30, 1e-3, 0.05)
    save_checkpoint(tmp_path / "c.pt", net, s, store, clf, extra={"task": 1})
    ck = load_checkpoint(tmp_path / "c.pt")
    x = torch.randn(3, *shape)
    c, e = store.batch([3, 3, 3]), torch.randn(3, 4)
    with torch.no_grad():
        assert torch.equal(ck["denoiser"](x, 5, c, e), net(x, 5, c, e))
        assert torch.equal(ck["classifier"](x), clf(x))
    assert torch.equal(ck["schedule"].alpha_bar, s.alpha_bar)
    assert ck["prototypes"].checksums() == store.checksums()
    assert ck["prototypes"].trainable_parameters() == [] and ck["extra"] == {"task": 1}


def test_checkpoint_with_zero_prototypes(tmp_path):
    save_checkpoint(tmp_path / "c.pt", VectorDenoiser(2, 4, hidden=8), build_schedule(10),
                    ZeroPrototypes((2,)))
    ck = load_checkpoint(tmp_path / "c.pt")
    assert isinstance(ck["prototypes"], ZeroPrototypes) and ck["classifier"] is None


def test_checkpoint_rejects_unknown_format(tmp_path):
    torch.save({"format": "other"}, tmp_path / "c.pt")
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / "c.pt")


def test_sample_grids_are_deterministic(tmp_path):
    imgs = torch.linspace(-1, 1, 3 * 64).reshape(3, 1, 8, 8)
    save_sample_grid(tmp_path / "a.png", imgs, ncols=2)
    save_sample_grid(tmp_path / "b.png", imgs, ncols=2)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    from PIL import Image
    assert Image.open(tmp_path / "a.png").size == (2 * 9 + 1, 2 * 9 + 1)
    save_sample_grid(tmp_path / "v.png", torch.randn(10, 2), torch.arange(10) % 2)
    assert (tmp_path / "v.png").stat().st_size > 0
