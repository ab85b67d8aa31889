import json
import struct

import numpy as np
import pytest
import torch

from morphmark import io
from morphmark.exceptions import InvalidImage, MissingArtifact, OutputNotWritable


class TestImages:
    def test_write_then_read_quantizes_to_eight_bits(self, tmpdir):
        image = torch.linspace(0, 1, 64).reshape(8, 8)
        path = tmpdir.join("ramp.png")
        io.write_image(str(path), image)
        loaded = io.read_image(str(path))
        assert loaded.dtype == torch.float32
        assert loaded.shape == (8, 8)
        assert (loaded - image).abs().max() <= 0.5 / 255 + 1e-6

    def test_overshoot_is_clamped(self, tmpdir):
        path = tmpdir.join("overshoot.png")
        io.write_image(str(path), np.full((8, 8), 1.2))
        assert float(io.read_image(str(path)).max()) == 1.0

    def test_missing(self, tmpdir):
        with pytest.raises(MissingArtifact):
            io.read_image(str(tmpdir.join("nothing.png")))

    def test_not_an_image(self, tmpdir):
        path = tmpdir.join("text.png")
        path.write("not a png")
        with pytest.raises(InvalidImage):
            io.read_image(str(path))


def test_landmarks_csv(tmpdir):
    points = torch.tensor([[1.5, 2.25], [30.0, 0.125]])
    path = tmpdir.join("a.csv")
    io.write_landmarks(str(path), points)
    assert path.read().splitlines()[0] == "index,x,y"
    assert torch.equal(io.read_landmarks(str(path)), points)


def test_landmarks_are_ordered_by_index(tmpdir):
    path = tmpdir.join("shuffled.csv")
    path.write("index,x,y\n1,3.0,4.0\n0,1.0,2.0\n")
    assert io.read_landmarks(str(path)).tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_landmarks_header_is_checked(tmpdir):
    path = tmpdir.join("bad.csv")
    path.write("i,x,y\n0,1.0,2.0\n")
    with pytest.raises(ValueError):
        io.read_landmarks(str(path))


def test_labeled_landmarks_keep_image_order(tmpdir):
    labels = {"0003": torch.tensor([[1.0, 2.0]]), "0001": torch.tensor([[3.0, 4.0]])}
    path = tmpdir.join("labels.csv")
    io.write_labeled_landmarks(str(path), labels)
    loaded = io.read_labeled_landmarks(str(path))
    assert list(loaded) == ["0003", "0001"]
    assert torch.equal(loaded["0001"], labels["0001"])


def test_dfield_layout(tmpdir):
    field = torch.arange(24, dtype=torch.float32).reshape(2, 3, 4)
    path = tmpdir.join("warp.dfield")
    io.write_dfield(str(path), field)
    data = path.read_binary()
    assert struct.unpack_from("<II", data) == (3, 4)
    assert len(data) == 8 + 24 * 4
    assert torch.equal(io.read_dfield(str(path)), field)


def test_checkpoint(tmpdir):
    state = {
        "encoder.weight": torch.randn(3, 2, 3, 3),
        "head.bias": torch.randn(5),
        "scalar": torch.tensor(2.5),
    }
    path = tmpdir.join("model.ckpt")
    io.save_checkpoint(str(path), state)
    assert path.read_binary().startswith(io.CHECKPOINT_MAGIC)
    loaded = io.load_checkpoint(str(path))
    assert list(loaded) == list(state)
    for name, value in state.items():
        assert torch.equal(loaded[name], value)


def test_checkpoint_errors(tmpdir):
    with pytest.raises(MissingArtifact) as error:
        io.load_checkpoint(str(tmpdir.join("absent.ckpt")), produced_by="train-stage1")
    assert error.value.produced_by == "train-stage1"
    path = tmpdir.join("garbage.ckpt")
    path.write("hello")
    with pytest.raises(ValueError):
        io.load_checkpoint(str(path))


def test_ensure_output_dir(tmpdir, mocker):
    created = io.ensure_output_dir(str(tmpdir.join("a", "b")))
    assert created.is_dir()
    assert list(created.iterdir()) == []
    mocker.patch("pathlib.Path.mkdir", side_effect=PermissionError("denied"))
    with pytest.raises(OutputNotWritable):
        io.ensure_output_dir(str(tmpdir.join("c")))


def test_json_lines_log(tmpdir):
    path = tmpdir.join("log.jsonl")
    with io.JsonLinesLog(str(path)) as log:
        log.write({"epoch": 1, "loss": 0.5})
        log.write({"epoch": 2, "loss": 0.25})
    assert len(log) == 2
    assert [record["epoch"] for record in log] == [1, 2]
    assert io.read_json_lines(str(path)) == log.records
    assert json.loads(path.read().splitlines()[0]) == {"epoch": 1, "loss": 0.5}


def test_json_lines_log_in_memory():
    log = io.JsonLinesLog()
    with log:
        log.write({"step": 0})
    assert log.records == [{"step": 0}]
