import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest
import torch

from agmask_adapter.models import (
    AdapterConfig, VisionLanguageModel, build_segmenter,
)
from agmask_adapter.protocol import decode_tensor, dump_line, encode_tensor
from agmask_adapter.selfcheck import run_selfcheck
from agmask_adapter.serve import AdapterServer

SMALL = AdapterConfig(vision="resnet18", segmenter="threshold",
                      image_size=64, embed_dim=16, seed=3)


@pytest.fixture(scope="module")
def server():
    return AdapterServer(SMALL)


def card_image(h=48, w=48):
    """Flat light card with a dark square."""
    img = np.full((3, h, w), 230, dtype=np.uint8)
    img[:, 12:36, 12:36] = 40
    return img


def segment_request(req_id, image, prompts):
    return {"v": 1, "op": "segment", "id": req_id,
            "image": encode_tensor(image, "u8"), "prompts": prompts}


class TestHandlers:
    def test_encode_image_returns_embedding_and_features(self, server):
        req = {"v": 1, "op": "encode_image", "id": "e1",
               "image": encode_tensor(card_image(), "u8")}
        resp = server.handle(req)
        assert resp["ok"] and resp["id"] == "e1"
        emb = decode_tensor(resp["embedding"])
        feats = decode_tensor(resp["features"])
        assert emb.shape == (16,)
        assert feats.ndim == 3 and feats.shape[0] == 512

    def test_encode_text_deterministic(self, server):
        req = {"v": 1, "op": "encode_text", "id": "t1", "caption": "dark square"}
        r1 = server.handle(req)
        r2 = server.handle(dict(req, id="t2"))
        assert decode_tensor(r1["embedding"]).tobytes() == \
            decode_tensor(r2["embedding"]).tobytes()

    def test_feature_gradients_shape_matches_features(self, server):
        req = {"v": 1, "op": "feature_gradients", "id": "g1",
               "image": encode_tensor(card_image(), "u8"),
               "caption": "dark square"}
        resp = server.handle(req)
        grads = decode_tensor(resp["gradients"])
        feats = decode_tensor(resp["features"])
        assert grads.shape == feats.shape
        assert np.isfinite(grads).all()

    def test_segment_point(self, server):
        image = card_image()
        resp = server.handle(segment_request(
            "s1", image, {"v": 1, "kind": "points", "points": [[20, 20]]}))
        mask = decode_tensor(resp["mask"])
        assert mask.shape == (48, 48)
        assert mask[20, 20] == 255
        assert (mask > 0).sum() == 24 * 24  # exactly the dark square

    def test_segment_box(self, server):
        image = card_image()
        resp = server.handle(segment_request(
            "s2", image, {"v": 1, "kind": "box", "box": [10, 10, 40, 40]}))
        mask = decode_tensor(resp["mask"])
        ys, xs = np.nonzero(mask)
        assert ys.min() >= 10 and ys.max() <= 40
        assert xs.min() >= 10 and xs.max() <= 40


class TestServeLoop:
    def run_lines(self, server, lines):
        stdin = io.StringIO("\n".join(lines) + "\n")
        stdout = io.StringIO()
        server.serve(stdin=stdin, stdout=stdout)
        return [json.loads(line) for line in stdout.getvalue().splitlines()]

    def test_one_line_in_one_line_out(self, server):
        image = card_image(32, 32)
        lines = [dump_line(segment_request(
            f"r{i}", image, {"v": 1, "kind": "points", "points": [[5, 5]]}))
            for i in range(3)]
        responses = self.run_lines(server, lines)
        assert [r["id"] for r in responses] == ["r0", "r1", "r2"]
        assert all(r["ok"] for r in responses)

    def test_malformed_line_keeps_loop_alive(self, server):
        image = card_image(32, 32)
        good = dump_line(segment_request(
            "ok1", image, {"v": 1, "kind": "points", "points": [[5, 5]]}))
        responses = self.run_lines(server, ["this is not json", good])
        assert len(responses) == 2
        assert responses[0]["ok"] is False
        assert "malformed" in responses[0]["error"]
        assert responses[1]["ok"] is True and responses[1]["id"] == "ok1"

    def test_bad_point_is_per_request_error(self, server):
        image = card_image(16, 16)
        bad = dump_line(segment_request(
            "b1", image, {"v": 1, "kind": "points", "points": [[99, 99]]}))
        responses = self.run_lines(server, [bad])
        assert responses[0]["ok"] is False
        assert responses[0]["id"] == "b1"


class TestSsubprocessAdapter:
    def test_full_session(self):
        proc = subprocess.Popen(
            [sys.executable, "-m", "agmask_adapter", "--image-size", "64",
             "--embed-dim", "16"],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        try:
            image = card_image()
            requests = [
                {"v": 1, "op": "encode_text", "id": "a", "caption": "dark square"},
                segment_request("b", image,
                                {"v": 1, "kind": "points", "points": [[20, 20]]}),
                {"v": 1, "op": "nonsense", "id": "c"},
            ]
            for req in requests:
                proc.stdin.write(dump_line(req) + "\n")
            proc.stdin.flush()
            replies = [json.loads(proc.stdout.readline()) for _ in range(3)]
            assert replies[0]["ok"] and replies[0]["id"] == "a"
            assert replies[1]["ok"] and \
                decode_tensor(replies[1]["mask"]).shape == (48, 48)
            assert replies[2]["ok"] is False
        finally:
            proc.stdin.close()
            proc.wait(timeout=10)


class TestStateDict:
    def test_checkpoint_round_trip(self, tmp_path):
        model = VisionLanguageModel(SMALL)
        path = tmp_path / "vl.pt"
        torch.save(model.state_dict(), path)
        loaded = VisionLanguageModel(
            AdapterConfig(vision=f"resnet18:{path}", segmenter="threshold",
                          image_size=64, embed_dim=16, seed=99))
        img = card_image()
        e1, _ = model.encode_image(img)
        e2, _ = loaded.encode_image(img)
        assert e1.tobytes() == e2.tobytes()


class TestSelfcheck:
    def test_passes_with_builtin_models(self, capsys):
        assert run_selfcheck(SMALL) == 0
        out = capsys.readouterr().out
        assert "ok   protocol-echo" in out
        assert "ok   tensor-roundtrip" in out
        assert "ok   model-availability" in out
        assert "torch" in out  # versions printed

    def test_fails_without_models(self, capsys):
        bad = AdapterConfig(vision="resnet18:/no/such/weights.pt",
                            segmenter="threshold", image_size=64)
        assert run_selfcheck(bad) == 1
        assert "FAIL model-availability" in capsys.readouterr().out

    def test_unknown_segmenter_fails(self, capsys):
        bad = AdapterConfig(vision="resnet18", segmenter="magic", image_size=64)
        assert run_selfcheck(bad) == 1

    def test_protocol_version_pinned(self):
        with pytest.raises(ValueError, match="version"):
            AdapterConfig(protocol_version=2)

    def test_selfcheck_flag_exit_codes(self):
        ok = subprocess.run(
            [sys.executable, "-m", "agmask_adapter", "--selfcheck",
             "--image-size", "64"],
            capture_output=True, text=True)
        assert ok.returncode == 0, ok.stdout + ok.stderr
        bad = subprocess.run(
            [sys.executable, "-m", "agmask_adapter", "--selfcheck",
             "--vision", "resnet18:/missing.pt", "--image-size", "64"],
            capture_output=True, text=True)
        assert bad.returncode == 1


SAM_CHECKPOINT = os.environ.get("AGMASK_SAM_CHECKPOINT")


@pytest.mark.skipif(not SAM_CHECKPOINT, reason="AGMASK_SAM_CHECKPOINT not set")
class TestRealSamSmoke:
    def test_five_image_smoke(self):
        cfg = AdapterConfig(
            vision="resnet18",
            segmenter=f"sam:{SAM_CHECKPOINT}:"
                      f"{os.environ.get('AGMASK_SAM_TYPE', 'vit_b')}")
        segmenter = build_segmenter(cfg)
        rng = np.random.default_rng(5)
        for i in range(5):
            image = np.full((3, 96, 96), 235, dtype=np.uint8)
            r, c = 20 + 8 * i, 24 + 6 * i
            image[:, r:r + 30, c:c + 30] = rng.integers(0, 90, size=3)[:, None, None]
            mask = segmenter.segment(image, [(c + 15, r + 15)], None)
            assert mask.shape == (96, 96)
            assert (mask > 0).sum() > 0
