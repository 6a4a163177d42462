import json

import numpy as np
import pytest

import skipgate as sg
from skipgate.checkpoint import load_checkpoint, save_checkpoint
from skipgate.errors import CheckpointError
from skipgate.moe import ExpertSkipRouters

from conftest import moe_config, small_config


class TestRoundTrip:
    def test_backbone_bitwise(self, tmp_path):
        model = sg.build_model(small_config(), seed=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, meta={"seed": 5})
        bundle = load_checkpoint(path)
        assert bundle.meta == {"seed": 5}
        assert bundle.model.cfg == model.cfg
        for name, t in model.params.items():
            assert np.array_equal(t.data, bundle.model.params[name].data)
        assert bundle.plan is None and bundle.routers is None

    def test_routers_and_plan(self, tmp_path):
        model = sg.build_model(small_config(), seed=6)
        plan = sg.default_plan(model.cfg.n_layers, granularity="token", tau=0.4)
        routers = sg.init_routers(model, plan)
        rng = np.random.default_rng(0)
        for r in routers.values():
            r.W.data[...] = rng.normal(size=r.W.data.shape).astype(np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, plan, routers)
        bundle = load_checkpoint(path)
        assert bundle.plan.to_dict() == plan.to_dict()
        for li, r in routers.items():
            assert np.array_equal(bundle.routers[li].W.data, r.W.data)
            assert bundle.routers[li].tau == 0.4

    def test_expert_routers(self, tmp_path):
        model = sg.build_model(moe_config(), seed=7)
        routers = ExpertSkipRouters(model, tau=0.6)
        routers.layers[1][2].data[...] = 3.0
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, expert_routers=routers)
        bundle = load_checkpoint(path)
        assert bundle.expert_routers.tau == 0.6
        assert np.array_equal(
            bundle.expert_routers.layers[1][2].data, routers.layers[1][2].data
        )

    def test_header_is_single_json_line_with_offsets(self, tmp_path):
        model = sg.build_model(small_config(), seed=8)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
        assert header["format"] == "skipgate-checkpoint"
        names = [e["name"] for e in header["params"]]
        assert names[0] == "tok_emb" and names[-1] == "lm_head"
        total = sum(int(np.prod(e["shape"])) * 4 for e in header["params"])
        assert len(payload) == total
        entry = header["params"][0]
        block = np.frombuffer(
            payload, dtype="<f4",
            count=int(np.prod(entry["shape"])), offset=entry["offset"],
        ).reshape(entry["shape"])
        assert np.array_equal(block, model.p("tok_emb").data)

    def test_byte_identical_rewrites(self, tmp_path):
        model = sg.build_model(small_config(), seed=9)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model)
        save_checkpoint(p2, model)
        assert p1.read_bytes() == p2.read_bytes()


class TestErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x93NUMPY not json\n\x00\x01")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_format_field(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(json.dumps({"format": "other"}).encode() + b"\n")
        with pytest.raises(CheckpointError, match="not a skipgate"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        model = sg.build_model(small_config(), seed=10)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
