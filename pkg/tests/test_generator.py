import sys
import textwrap

import numpy as np
import pytest

from conftest import random_layout
from aerialsynth.conditions import ConditionBundle, build_bundle, write_bundle
from aerialsynth.errors import BackgroundSizeMismatch, CommandNotFound, MalformedResults
from aerialsynth.generator import GenerationRequest, read_results, run_builtin_compositor, run_external
from aerialsynth.geometry import BBox
from aerialsynth.prototypes import Prototype
from aerialsynth.raster import load_image, pixel_rect, save_image

CATS = {1: "car", 2: "person", 3: "truck"}
STUB = [sys.executable, "-m", "aerialsynth.stub_generator"]


def _bank():
    rng = np.random.default_rng(1)
    return {c: [Prototype(c, 1, BBox(0, 0, 7, 5), rng.integers(0, 256, (5, 7, 3), dtype=np.uint8), np.ones(2), 0)]
            for c in CATS}


def _bundle(seed=0, n=4, canvas=(48, 40)):
    layout = random_layout(np.random.default_rng(seed), n, canvas)
    return build_bundle(f"p{seed}", layout, _bank(), CATS, canvas, 0)


def _requests(tmp_path, n):
    reqs = []
    for i in range(n):
        manifest = write_bundle(tmp_path / f"b{i}", _bundle(i))
        reqs.append(GenerationRequest(f"p{i}", str(manifest), str(tmp_path / "out" / f"p{i}.png")))
    return reqs


def _script(tmp_path, body):
    path = tmp_path / "gen.py"
    path.write_text(textwrap.dedent(body))
    return [sys.executable, str(path)]


def test_stub_generator_all_ok(tmp_path):
    reqs = _requests(tmp_path, 5)
    res = run_external(reqs, STUB, parallelism=3)
    assert [r.patch_id for r in res] == [r.patch_id for r in reqs]
    assert all(r.ok for r in res)
    for r, q in zip(res, reqs):
        flat = load_image(tmp_path / f"b{q.patch_id[1:]}" / "flattened.png")
        assert np.array_equal(load_image(r.image_path), flat)


def test_nonzero_exit_fails_all(tmp_path):
    reqs = _requests(tmp_path, 3)
    res = run_external(reqs, _script(tmp_path, "import sys; sys.exit(3)"), parallelism=2)
    assert [(r.status, r.reason) for r in res] == [("failed", "exit 3")] * 3


def test_one_missing_output(tmp_path):
    reqs = _requests(tmp_path, 3)
    body = """
    import json, os, sys
    from aerialsynth.stub_generator import main
    main(sys.argv[1:])
    rows = [json.loads(l) for l in open(sys.argv[1])]
    os.remove(rows[1]["output_path"])
    """
    res = run_external(reqs, _script(tmp_path, body))
    assert [r.status for r in res] == ["ok", "failed", "ok"]
    assert res[1].reason == "missing output" and res[1].image_path is None


def test_wrong_size_and_missing_result(tmp_path):
    reqs = _requests(tmp_path, 2)
    body = """
    import json, sys
    import numpy as np
    from PIL import Image
    rows = [json.loads(l) for l in open(sys.argv[1])]
    Image.fromarray(np.zeros((3, 3, 3), np.uint8)).save(rows[0]["output_path"])
    open(sys.argv[2], "w").write(json.dumps({"patch_id": rows[0]["patch_id"], "status": "ok"}) + "\\n")
    """
    (tmp_path / "out").mkdir()
    res = run_external(reqs, _script(tmp_path, body))
    assert res[0].status == "failed" and "size" in res[0].reason
    assert res[1].reason == "missing result"


def test_timeout(tmp_path):
    reqs = _requests(tmp_path, 1)
    res = run_external(reqs, _script(tmp_path, "import time; time.sleep(10)"), timeout_s=0.5)
    assert res[0].reason == "timeout"


def test_command_not_found_and_bad_args(tmp_path):
    with pytest.raises(CommandNotFound):
        run_external([], "definitely-not-a-command-xyz")
    with pytest.raises(ValueError):
        run_external([], STUB, parallelism=0)
    dup = [GenerationRequest("a", "m", "o")] * 2
    with pytest.raises(ValueError):
        run_external(dup, STUB)


def test_read_results_malformed(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"patch_id": "a"}\n')
    with pytest.raises(MalformedResults):
        read_results(p)
    p.write_text('{"patch_id": "a", "status": "maybe"}\n')
    with pytest.raises(MalformedResults):
        read_results(p)
    p.write_text('{"patch_id": "a", "status": "failed", "reason": "x"}\n\n')
    assert read_results(p)["a"]["reason"] == "x"


def test_compositor_zero_background_equals_flattened():
    for seed in range(5):
        b = _bundle(seed, n=6)
        assert np.array_equal(run_builtin_compositor(b), b.flattened_canvas)


def test_compositor_solid_empty_layout():
    b = ConditionBundle("e", (10, 6), [], np.zeros((6, 10, 3), np.uint8), "", [], np.ones((6, 10)))
    out = run_builtin_compositor(b, (9, 8, 7))
    assert out.shape == (6, 10, 3) and np.all(out == (9, 8, 7))


def test_compositor_image_background_mask_oracle(tmp_path):
    b = _bundle(3, n=1)
    bg = np.random.default_rng(0).integers(0, 256, (40, 48, 3), dtype=np.uint8)
    save_image(tmp_path / "bg.png", bg)
    out = run_builtin_compositor(b, str(tmp_path / "bg.png"))
    x0, y0, x1, y1 = pixel_rect(b.objects[0].bbox, 48, 40)
    for r in range(40):
        for c in range(48):
            inside = x0 <= c < x1 and y0 <= r < y1
            src = b.per_object_canvases[0] if inside else bg
            assert (out[r, c] == src[r, c]).all()
    with pytest.raises(BackgroundSizeMismatch):
        run_builtin_compositor(b, np.zeros((5, 5, 3), np.uint8))


def test_compositor_noise_is_seeded():
    b = _bundle(1)
    a1 = run_builtin_compositor(b, seed=4, noise_std=3.0)
    a2 = run_builtin_compositor(b, seed=4, noise_std=3.0)
    assert np.array_equal(a1, a2) and not np.array_equal(a1, run_builtin_compositor(b, seed=5, noise_std=3.0))
