import os
import sys
import time

import numpy as np
import pytest

from occlane.core import RasterImage, RasterMask, load_raster, luma, save_raster
from occlane.inpaint import inpaint_oracle
from occlane.nodeproto import (
    NodeProtocolError,
    NodeRequest,
    NodeSpawnError,
    NodeTimeoutError,
    call,
    shutdown,
    spawn_node,
)

STUB = os.path.join(os.path.dirname(__file__), "stub_node.py")


def stub_cmd(mode):
    return [sys.executable, STUB, mode]


def spawn_stub(mode, role="segment", **kw):
    kw.setdefault("handshake_timeout", 10.0)
    return spawn_node(stub_cmd(mode), role, **kw)


@pytest.fixture
def images(tmp_path):
    rng = np.random.default_rng(21)
    img = RasterImage(rng.integers(0, 256, size=(24, 32, 3), dtype=np.uint8))
    img_path = str(tmp_path / "frame.png")
    save_raster(img, img_path)
    hole = np.zeros((24, 32), dtype=np.uint8)
    hole[6:14, 8:20] = 255
    hole_path = str(tmp_path / "hole.png")
    save_raster(RasterMask(hole), hole_path)
    clear = RasterImage(rng.integers(0, 256, size=(24, 32, 3), dtype=np.uint8))
    clear_path = str(tmp_path / "clear.png")
    save_raster(clear, clear_path)
    return img, img_path, hole, hole_path, clear, clear_path


def test_identity_segment_round_trip(images):
    img, img_path, *_ = images
    handle = spawn_stub("segment-identity")
    try:
        req = NodeRequest(role="segment", inputs={"image": img_path}, scratch_dir=handle.scratch_dir)
        resp = call(handle, req)
        assert resp.ok and "mask" in resp.outputs
        got = load_raster(resp.outputs["mask"])
        want = np.where(luma(img) >= 128, 255, 0).astype(np.uint8)
        assert np.array_equal(got.data, want)
    finally:
        shutdown(handle)
    assert handle.proc.returncode == 0
    assert not os.path.isdir(handle.scratch_dir)


def test_oracle_inpaint_node_matches_in_process(images):
    img, img_path, hole, hole_path, clear, clear_path = images
    handle = spawn_stub("inpaint-oracle", role="inpaint")
    try:
        req = NodeRequest(
            role="inpaint",
            inputs={"image": img_path, "mask": hole_path},
            scratch_dir=handle.scratch_dir,
            params={"clear_image": clear_path},
        )
        resp = call(handle, req)
        got = load_raster(resp.outputs["image"])
        want = inpaint_oracle(img, RasterMask(hole), clear)
        assert np.array_equal(got.data, want.data)
    finally:
        shutdown(handle)


def test_serial_ids_increase(images):
    _, img_path, *_ = images
    handle = spawn_stub("detect-echo", role="detect")
    try:
        seen = []
        for _ in range(3):
            req = NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir,
                              params={"boxes": [[1, 2, 3, 4, 0, 1.0]]})
            resp = call(handle, req)
            assert resp.ok
            assert resp.boxes == [[1.0, 2.0, 3.0, 4.0, 0.0, 1.0]]
            seen.append(resp.id)
        assert seen == sorted(seen) and len(set(seen)) == 3
    finally:
        shutdown(handle)


def test_spawn_nonexistent_executable():
    with pytest.raises(NodeSpawnError):
        spawn_node(["/nonexistent/binary/path"], "segment")


def test_role_mismatch_handshake():
    with pytest.raises(NodeSpawnError, match="role mismatch"):
        spawn_stub("wrong-role")


def test_junk_handshake_line():
    with pytest.raises(NodeSpawnError):
        spawn_stub("junk-handshake")


def test_silent_node_handshake_timeout():
    t0 = time.monotonic()
    with pytest.raises(NodeSpawnError, match="timed out"):
        spawn_stub("silent", handshake_timeout=1.0)
    assert time.monotonic() - t0 < 5.0


def test_call_timeout_kills_and_poisons(images):
    _, img_path, *_ = images
    handle = spawn_stub("slow", role="detect")
    try:
        req = NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir)
        with pytest.raises(NodeTimeoutError):
            call(handle, req, timeout=0.8)
        assert handle.poisoned
        assert handle.proc.poll() is not None
        with pytest.raises(Exception, match="poisoned"):
            call(handle, NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir))
    finally:
        shutdown(handle)


def test_malformed_line_includes_raw_text(images):
    handle = spawn_stub("junk-response", role="detect")
    try:
        req = NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir)
        with pytest.raises(NodeProtocolError, match="not a protocol document"):
            call(handle, req, timeout=5.0)
    finally:
        shutdown(handle)


def test_id_mismatch_rejected(images):
    handle = spawn_stub("bad-id", role="detect")
    try:
        req = NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir)
        with pytest.raises(NodeProtocolError, match="echo"):
            call(handle, req, timeout=5.0)
    finally:
        shutdown(handle)


def test_missing_output_file_rejected(images):
    handle = spawn_stub("missing-file", role="segment")
    try:
        req = NodeRequest(role="segment", inputs={}, scratch_dir=handle.scratch_dir)
        with pytest.raises(NodeProtocolError, match="missing on disk"):
            call(handle, req, timeout=5.0)
    finally:
        shutdown(handle)


def test_error_response_returned_not_raised(images):
    handle = spawn_stub("error-response", role="segment")
    try:
        req = NodeRequest(role="segment", inputs={}, scratch_dir=handle.scratch_dir)
        resp = call(handle, req, timeout=5.0)
        assert not resp.ok
        assert resp.message == "synthetic stage failure"
    finally:
        shutdown(handle)


def test_shutdown_is_idempotent_and_forces_hung_node():
    handle = spawn_stub("hang-shutdown", role="segment")
    t0 = time.monotonic()
    shutdown(handle, wait=1.0)
    assert time.monotonic() - t0 < 4.0
    assert handle.proc.poll() is not None
    shutdown(handle, wait=1.0)  # second call is a no-op


def test_scratch_kept_when_asked(images):
    _, img_path, *_ = images
    handle = spawn_stub("segment-identity", keep_scratch=True)
    scratch = handle.scratch_dir
    try:
        req = NodeRequest(role="segment", inputs={"image": img_path}, scratch_dir=scratch)
        resp = call(handle, req)
        out = resp.outputs["mask"]
    finally:
        shutdown(handle)
    assert os.path.isfile(out)
    import shutil

    shutil.rmtree(scratch)


def test_request_validation(tmp_path):
    with pytest.raises(ValueError):
        NodeRequest(role="paint", inputs={}, scratch_dir=str(tmp_path))
    with pytest.raises(ValueError, match="does not exist"):
        NodeRequest(role="segment", inputs={"image": str(tmp_path / "nope.png")},
                    scratch_dir=str(tmp_path))


def test_explicit_ids_must_increase(images):
    _, img_path, *_ = images
    handle = spawn_stub("detect-echo", role="detect")
    try:
        r1 = NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir, id=5)
        assert call(handle, r1).id == 5
        r2 = NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir, id=5)
        with pytest.raises(ValueError, match="not greater"):
            call(handle, r2)
        r3 = NodeRequest(role="detect", inputs={}, scratch_dir=handle.scratch_dir, id=6)
        assert call(handle, r3).id == 6
    finally:
        shutdown(handle)
